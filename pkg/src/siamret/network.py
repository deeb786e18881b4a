"""Embedding network: an ordered layer stack with optional skip connections.

A network owns exactly one parameter store. Twin-branch training works by
pushing both branch batches through the same Network object, so there is no
weight copy to drift out of sync.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .layers import (
    F32,
    SPEC_KINDS,
    LayerSpec,
    LayerState,
    backward_layer,
    buffer_names,
    forward_layer,
    init_layer_state,
    layer_output_shape,
    param_names,
)
from .rngstreams import TAG_INIT, rng_stream

CHECKPOINT_MAGIC = b"SNET"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    embedding_dim: int
    input_shape: tuple[int, int, int]
    residual_blocks: tuple[tuple[int, int], ...] = ()


@dataclass
class Network:
    spec: NetworkSpec
    states: list[LayerState]


def infer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Per-sample shapes before each layer plus the final output shape."""
    shapes = [tuple(spec.input_shape)]
    for i, layer in enumerate(spec.layers):
        try:
            shapes.append(layer_output_shape(layer, shapes[-1]))
        except ShapeError as exc:
            raise ValidationError(f"layer {i} ({layer.kind}): {exc}") from exc
    return shapes


def validate_network_spec(spec: NetworkSpec) -> None:
    """Check layer chaining, residual shape agreement, and output size."""
    if not spec.layers:
        raise ValidationError("network needs at least one layer")
    if spec.embedding_dim < 1:
        raise ValidationError("embedding_dim must be positive")
    if len(spec.input_shape) != 3 or any(d < 1 for d in spec.input_shape):
        raise ValidationError(f"input_shape must be (C, H, W), got {spec.input_shape}")
    shapes = infer_shapes(spec)
    n = len(spec.layers)
    for start, end in spec.residual_blocks:
        if not (0 <= start <= end < n):
            raise ValidationError(
                f"residual block ({start}, {end}) out of range for {n} layers"
            )
        if shapes[start] != shapes[end + 1]:
            raise ValidationError(
                f"residual block ({start}, {end}) joins shape {shapes[start]} "
                f"to shape {shapes[end + 1]}; they must match"
            )
    starts = [s for s, _ in spec.residual_blocks]
    ends = [e for _, e in spec.residual_blocks]
    if len(set(starts)) != len(starts) or len(set(ends)) != len(ends):
        raise ValidationError("residual blocks must not share start or end layers")
    if shapes[-1] != (spec.embedding_dim,):
        raise ValidationError(
            f"final layer produces shape {shapes[-1]}, expected ({spec.embedding_dim},)"
        )


def build_network(spec: NetworkSpec, init_seed: int) -> Network:
    """Validate the spec and initialize all layer states deterministically."""
    validate_network_spec(spec)
    states = [
        init_layer_state(layer, rng_stream(init_seed, TAG_INIT, i))
        for i, layer in enumerate(spec.layers)
    ]
    return Network(spec=spec, states=states)


def forward_network(
    net: Network,
    x: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run a batch (N, C, H, W) through the stack; returns (N, embedding_dim)."""
    x = np.ascontiguousarray(x, dtype=F32)
    if x.ndim != 4 or x.shape[1:] != tuple(net.spec.input_shape):
        raise ShapeError(
            f"network expects (N, {', '.join(map(str, net.spec.input_shape))}), got {x.shape}"
        )
    skip_in = {start: None for start, _ in net.spec.residual_blocks}
    add_at = {end: start for start, end in net.spec.residual_blocks}
    out = x
    for i, (layer, state) in enumerate(zip(net.spec.layers, net.states)):
        if i in skip_in:
            skip_in[i] = out
        out = forward_layer(layer, state, out, mode=mode, rng=rng)
        if i in add_at:
            out = out + skip_in[add_at[i]]
    return out


def backward_network(net: Network, grad_embeddings: np.ndarray) -> list[np.ndarray]:
    """Backpropagate through the last forward pass.

    Returns gradients aligned with parameter_entries(net). Residual additions
    route gradient both into the block and directly to the block input.
    """
    start_of = {end: start for start, end in net.spec.residual_blocks}
    end_grads: dict[int, np.ndarray] = {}
    param_grads: dict[int, dict[str, np.ndarray]] = {}
    g = np.ascontiguousarray(grad_embeddings, dtype=F32)
    for i in range(len(net.spec.layers) - 1, -1, -1):
        if i in start_of:
            end_grads[start_of[i]] = g
        g, grads = backward_layer(net.spec.layers[i], net.states[i], g)
        param_grads[i] = grads
        if i in end_grads:
            g = g + end_grads.pop(i)
    flat: list[np.ndarray] = []
    for i, layer in enumerate(net.spec.layers):
        for name in param_names(layer):
            flat.append(param_grads[i][name])
    return flat


def parameter_entries(net: Network) -> list[tuple[int, str, np.ndarray]]:
    """All learned parameters in declaration order."""
    out = []
    for i, layer in enumerate(net.spec.layers):
        for name in param_names(layer):
            out.append((i, name, net.states[i].params[name]))
    return out


def embed(
    net: Network,
    image: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Embed one (C, H, W) image; returns a length-embedding_dim vector."""
    image = np.asarray(image, dtype=F32)
    if image.shape != tuple(net.spec.input_shape):
        raise ShapeError(
            f"embed expects shape {tuple(net.spec.input_shape)}, got {image.shape}"
        )
    return forward_network(net, image[None], mode=mode, rng=rng)[0]


def default_network_spec(
    input_size: int = 32,
    in_channels: int = 3,
    channels: int = 16,
    blocks: int = 2,
    embedding_dim: int = 32,
    dropout: float = 0.25,
) -> NetworkSpec:
    """Small residual conv stack ending in a linear embedding head."""
    from .layers import (
        BatchNormSpec,
        Conv2dSpec,
        DenseSpec,
        DropoutSpec,
        GlobalAvgPoolSpec,
        ReluSpec,
    )

    layers: list[LayerSpec] = [
        Conv2dSpec(in_channels, channels, 3, stride=1, padding=1),
        BatchNormSpec(channels),
        ReluSpec(),
    ]
    residuals = []
    for _ in range(blocks):
        start = len(layers)
        layers += [
            Conv2dSpec(channels, channels, 3, stride=1, padding=1),
            BatchNormSpec(channels),
            ReluSpec(),
        ]
        residuals.append((start, len(layers) - 1))
    layers += [GlobalAvgPoolSpec(), DropoutSpec(dropout), DenseSpec(channels, embedding_dim)]
    return NetworkSpec(
        layers=tuple(layers),
        embedding_dim=embedding_dim,
        input_shape=(in_channels, input_size, input_size),
        residual_blocks=tuple(residuals),
    )


def _spec_to_json(spec: NetworkSpec) -> bytes:
    layers = []
    for layer in spec.layers:
        entry = {"kind": layer.kind}
        entry.update(dataclasses.asdict(layer))
        layers.append(entry)
    doc = {
        "layers": layers,
        "embedding_dim": spec.embedding_dim,
        "input_shape": list(spec.input_shape),
        "residual_blocks": [list(b) for b in spec.residual_blocks],
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def _spec_from_json(raw: bytes) -> NetworkSpec:
    try:
        doc = json.loads(raw.decode("utf-8"))
        layers = []
        for entry in doc["layers"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            layers.append(SPEC_KINDS[kind](**entry))
        return NetworkSpec(
            layers=tuple(layers),
            embedding_dim=int(doc["embedding_dim"]),
            input_shape=tuple(int(d) for d in doc["input_shape"]),
            residual_blocks=tuple(
                (int(s), int(e)) for s, e in doc["residual_blocks"]
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed network spec in checkpoint: {exc}") from exc


def save_checkpoint(net: Network, path) -> None:
    """Write magic, version, spec JSON, then all tensors as little-endian f32."""
    blob = _spec_to_json(net.spec)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for i, layer in enumerate(net.spec.layers):
            for name in param_names(layer):
                fh.write(np.ascontiguousarray(net.states[i].params[name], dtype="<f4").tobytes())
            for name in buffer_names(layer):
                fh.write(np.ascontiguousarray(net.states[i].buffers[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Network:
    """Reconstruct a network bitwise-identically from save_checkpoint output."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", data, off)
        off += 4
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (spec_len,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + spec_len > len(data):
            raise FormatError("checkpoint truncated inside spec")
        spec = _spec_from_json(data[off : off + spec_len])
        off += spec_len
        validate_network_spec(spec)
        states = []
        for layer in spec.layers:
            state = init_layer_state(layer, rng_stream(0, TAG_INIT, 0))
            for name in param_names(layer):
                arr = state.params[name]
                nbytes = arr.size * 4
                if off + nbytes > len(data):
                    raise FormatError(f"checkpoint truncated in {layer.kind}.{name}")
                state.params[name] = np.frombuffer(
                    data, dtype="<f4", count=arr.size, offset=off
                ).reshape(arr.shape).astype(F32)
                off += nbytes
            for name in buffer_names(layer):
                arr = state.buffers[name]
                nbytes = arr.size * 4
                if off + nbytes > len(data):
                    raise FormatError(f"checkpoint truncated in {layer.kind}.{name}")
                state.buffers[name] = np.frombuffer(
                    data, dtype="<f4", count=arr.size, offset=off
                ).reshape(arr.shape).astype(F32)
                off += nbytes
            state.ctx = {}
            states.append(state)
    except struct.error as exc:
        raise FormatError(f"checkpoint truncated: {exc}") from exc
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after checkpoint payload")
    return Network(spec=spec, states=states)
