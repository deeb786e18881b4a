"""Embedding extraction, an exact nearest-neighbor index, and its file format.

Queries are a linear scan over float64 distances with ties broken by
ascending id, so results are total-ordered and reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .imaging import LabeledImage, image_to_tensor
from .layers import F32, F64
from .network import Network, embed

EMBEDDING_MAGIC = b"SEMB"
EMBEDDING_VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    label: int
    vector: np.ndarray


@dataclass(frozen=True)
class RetrievalHit:
    id: str
    label: int
    distance: float


@dataclass
class EmbeddingIndex:
    ids: list[str]
    labels: np.ndarray  # int64 (N,)
    vectors: np.ndarray  # float32 (N, dim)

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors.ndim == 2 else 0


def embed_dataset(net: Network, dataset: list[LabeledImage]) -> list[EmbeddingRecord]:
    """Embed every image in inference mode.

    Images go through the network one at a time on purpose: BLAS kernels are
    not bitwise-consistent across batch shapes, and single-image results must
    equal the embed() output exactly.
    """
    records = []
    for item in dataset:
        vec = embed(net, image_to_tensor(item.image), mode="infer")
        records.append(EmbeddingRecord(id=item.id, label=item.label, vector=vec))
    return records


def build_index(records: list[EmbeddingRecord]) -> EmbeddingIndex:
    """Validate records and pack them into a scannable index; empty is legal."""
    if not records:
        return EmbeddingIndex(ids=[], labels=np.zeros(0, dtype=np.int64), vectors=np.zeros((0, 0), dtype=F32))
    dim = int(np.asarray(records[0].vector).size)
    seen: set[str] = set()
    vectors = np.zeros((len(records), dim), dtype=F32)
    labels = np.zeros(len(records), dtype=np.int64)
    ids = []
    for i, rec in enumerate(records):
        if rec.id in seen:
            raise ValidationError(f"duplicate embedding id {rec.id!r}")
        seen.add(rec.id)
        vec = np.asarray(rec.vector, dtype=F32).reshape(-1)
        if vec.size != dim:
            raise ShapeError(
                f"embedding {rec.id!r} has dim {vec.size}, index dim is {dim}"
            )
        vectors[i] = vec
        labels[i] = rec.label
        ids.append(rec.id)
    return EmbeddingIndex(ids=ids, labels=labels, vectors=vectors)


def query_knn(
    index: EmbeddingIndex,
    vector: np.ndarray,
    k: int,
    exclude_id: str | None = None,
) -> list[RetrievalHit]:
    """k nearest records by Euclidean distance; ties broken by ascending id."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    q = np.asarray(vector, dtype=F32).reshape(-1)
    if index.size == 0:
        return []
    if q.size != index.dim:
        raise ShapeError(f"query dim {q.size} does not match index dim {index.dim}")
    diff = index.vectors.astype(F64) - q.astype(F64)
    dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    mask = np.ones(index.size, dtype=bool)
    if exclude_id is not None:
        for i, ident in enumerate(index.ids):
            if ident == exclude_id:
                mask[i] = False
    cand = np.flatnonzero(mask)
    if cand.size == 0:
        return []
    kk = min(k, cand.size)
    cd = dists[cand]
    # partial select, then widen to every candidate tied with the boundary so
    # the id tie-break cannot be cut off by the partition
    part = np.argpartition(cd, kk - 1)[:kk]
    boundary = cd[part].max()
    pool = cand[cd <= boundary]
    ranked = sorted(pool, key=lambda i: (dists[i], index.ids[i]))[:kk]
    return [
        RetrievalHit(id=index.ids[i], label=int(index.labels[i]), distance=float(dists[i]))
        for i in ranked
    ]


def save_embeddings(records: list[EmbeddingRecord], path) -> None:
    """Binary layout: magic, version u32, dim u32, count u64, then per record
    id length u32, utf-8 id bytes, label i32, dim little-endian f32 values."""
    dim = int(np.asarray(records[0].vector).size) if records else 0
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<I", EMBEDDING_VERSION))
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<Q", len(records)))
        for rec in records:
            vec = np.ascontiguousarray(rec.vector, dtype="<f4").reshape(-1)
            if vec.size != dim:
                raise ShapeError(f"embedding {rec.id!r} has dim {vec.size}, file dim is {dim}")
            ident = rec.id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<i", rec.label))
            fh.write(vec.tobytes())


def load_embeddings(path) -> list[EmbeddingRecord]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"bad embedding magic {data[:4]!r}, expected {EMBEDDING_MAGIC!r}")
    off = 4
    try:
        version, dim = struct.unpack_from("<II", data, off)
        off += 8
        (count,) = struct.unpack_from("<Q", data, off)
        off += 8
    except struct.error as exc:
        raise FormatError(f"embedding file truncated in header: {exc}") from exc
    if version != EMBEDDING_VERSION:
        raise FormatError(f"unsupported embedding file version {version}")
    records = []
    for n in range(count):
        try:
            (id_len,) = struct.unpack_from("<I", data, off)
            off += 4
            ident = data[off : off + id_len]
            if len(ident) != id_len:
                raise FormatError(f"embedding file truncated in record {n} id")
            off += id_len
            (label,) = struct.unpack_from("<i", data, off)
            off += 4
        except struct.error as exc:
            raise FormatError(f"embedding file truncated in record {n}: {exc}") from exc
        nbytes = dim * 4
        if off + nbytes > len(data):
            raise FormatError(f"embedding file truncated in record {n} vector")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(F32)
        off += nbytes
        records.append(
            EmbeddingRecord(id=ident.decode("utf-8"), label=label, vector=vec)
        )
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after embedding payload")
    return records
