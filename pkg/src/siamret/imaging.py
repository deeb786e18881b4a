"""Image preprocessing, augmentation, dataset management, and file I/O.

Images are (H, W, 3) float32 arrays with values in [0, 1]. Interpolation and
filtering accumulate in float64; results are stored back as float32. Border
handling is mirror reflection without repeating the edge row/column.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .errors import FormatError, RadiusEstimationError, ValidationError
from .rngstreams import TAG_SYNTH, rng_stream

F32 = np.float32
F64 = np.float64


@dataclass(frozen=True)
class LabeledImage:
    id: str
    image: np.ndarray
    label: int
    parent_id: str | None = None


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: int


def _check_image(img: np.ndarray, where: str) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValidationError(f"{where} expects an (H, W, 3) image, got shape {img.shape}")
    return np.ascontiguousarray(img, dtype=F32)


def image_to_tensor(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) image to (3, H, W) network input."""
    img = _check_image(img, "image_to_tensor")
    return np.ascontiguousarray(img.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# geometry and filtering primitives


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror out-of-range indices into [0, n-1] without repeating edges."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.remainder(idx, period)
    return np.where(idx >= n, period - idx, idx)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centered sampling and edge clamping."""
    img = _check_image(img, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    if (out_h, out_w) == (h, w):
        return img.copy()
    sy = np.clip((np.arange(out_h, dtype=F64) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w, dtype=F64) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    src = img.astype(F64)
    # lerp form keeps constant regions exactly constant
    top = src[np.ix_(y0, x0)] + fx * (src[np.ix_(y0, x1)] - src[np.ix_(y0, x0)])
    bot = src[np.ix_(y1, x0)] + fx * (src[np.ix_(y1, x1)] - src[np.ix_(y1, x0)])
    out = top + fy * (bot - top)
    return out.astype(F32)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter, kernel truncated at 3 sigma, reflect borders."""
    img = _check_image(img, "gaussian_blur")
    if not sigma > 0:
        raise ValidationError("gaussian_blur sigma must be > 0")
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=F64)
    kernel = np.exp(-(t * t) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()

    out = img.astype(F64)
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for k, wgt in enumerate(kernel):
            sl = [slice(None)] * 3
            sl[axis] = slice(k, k + out.shape[axis])
            acc += wgt * padded[tuple(sl)]
        out = acc
    return out.astype(F32)


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counter-clockwise about the image center, bilinear sampling.

    Source coordinates outside the frame are mirror-reflected back in.
    """
    img = _check_image(img, "rotate_image")
    if angle_deg % 360.0 == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=F64), np.arange(w, dtype=F64), indexing="ij")
    dr, dc = rr - cy, cc - cx
    src_r = cy + dc * np.sin(theta) + dr * np.cos(theta)
    src_c = cx + dc * np.cos(theta) - dr * np.sin(theta)

    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    fr = (src_r - r0)[..., None]
    fc = (src_c - c0)[..., None]
    r0r = _reflect_index(r0, h)
    r1r = _reflect_index(r0 + 1, h)
    c0r = _reflect_index(c0, w)
    c1r = _reflect_index(c0 + 1, w)
    src = img.astype(F64)
    top = src[r0r, c0r] + fc * (src[r0r, c1r] - src[r0r, c0r])
    bot = src[r1r, c0r] + fc * (src[r1r, c1r] - src[r1r, c0r])
    out = top + fr * (bot - top)
    return np.clip(out, 0.0, 1.0).astype(F32)


# ---------------------------------------------------------------------------
# preprocessing


def estimate_field_radius(img: np.ndarray, image_id: str | None = None) -> float:
    """Half the widest per-row span of pixels brighter than 10% of the row max."""
    img = _check_image(img, "estimate_field_radius")
    intensity = img.astype(F64).mean(axis=2)
    row_max = intensity.max(axis=1)
    above = intensity > 0.1 * row_max[:, None]
    span = above.sum(axis=1).max()
    radius = span / 2.0
    if radius < 1.0:
        tag = f" (image {image_id})" if image_id else ""
        raise RadiusEstimationError(f"no usable field of view found{tag}")
    return float(radius)


def normalize_radius(
    img: np.ndarray, target_radius: float, image_id: str | None = None
) -> np.ndarray:
    """Rescale so the estimated field radius lands on target_radius."""
    if not target_radius > 0:
        raise ValidationError("target_radius must be > 0")
    radius = estimate_field_radius(img, image_id)
    scale = target_radius / radius
    out = img
    # interpolation smears the field edge, which the span estimator reads as
    # extra radius; measure the output and correct the scale, resizing from
    # the original each time so blur does not compound
    for _ in range(3):
        out_h = max(1, int(round(img.shape[0] * scale)))
        out_w = max(1, int(round(img.shape[1] * scale)))
        out = resize_bilinear(img, out_h, out_w)
        try:
            measured = estimate_field_radius(out, image_id)
        except RadiusEstimationError:
            break  # sub-pixel target: the rescaled field is unmeasurable
        if abs(measured - target_radius) <= 0.5:
            break
        scale *= target_radius / measured
    return out


def subtract_local_average(img: np.ndarray, sigma: float) -> np.ndarray:
    """Boost local contrast: clip(4 * (img - blur(img, sigma)) + 0.5, 0, 1)."""
    img = _check_image(img, "subtract_local_average")
    blurred = gaussian_blur(img, sigma)
    out = 4.0 * (img.astype(F64) - blurred.astype(F64)) + 0.5
    return np.clip(out, 0.0, 1.0).astype(F32)


def central_crop(img: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Keep the centered keep_fraction of each spatial dimension."""
    img = _check_image(img, "central_crop")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValidationError("keep_fraction must be in (0, 1]")
    h, w = img.shape[:2]
    out_h = int(round(h * keep_fraction))
    out_w = int(round(w * keep_fraction))
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"crop of {keep_fraction} leaves no pixels for {h}x{w}")
    oy = (h - out_h) // 2
    ox = (w - out_w) // 2
    return img[oy : oy + out_h, ox : ox + out_w].copy()


@dataclass(frozen=True)
class PreprocessConfig:
    target_radius: int = 64
    keep_fraction: float = 0.9
    out_size: int = 32

    def __post_init__(self):
        if self.target_radius < 1:
            raise ValidationError("target_radius must be >= 1")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValidationError("keep_fraction must be in (0, 1]")
        if self.out_size < 1:
            raise ValidationError("out_size must be >= 1")


def preprocess_image(
    img: np.ndarray, cfg: PreprocessConfig, image_id: str | None = None
) -> np.ndarray:
    """Radius normalization, local-average subtraction, central crop, resize."""
    out = normalize_radius(img, cfg.target_radius, image_id)
    out = subtract_local_average(out, cfg.target_radius / 30.0)
    out = central_crop(out, cfg.keep_fraction)
    return resize_bilinear(out, cfg.out_size, cfg.out_size)


def preprocess_dataset(
    items: list[LabeledImage], cfg: PreprocessConfig
) -> list[LabeledImage]:
    return [
        replace(item, image=preprocess_image(item.image, cfg, item.id)) for item in items
    ]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentSpec:
    crop_offset_max: int = 0
    allow_hflip: bool = False
    allow_vflip: bool = False
    blur_sigma_range: tuple[float, float] = (0.0, 0.0)
    rotation_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.crop_offset_max < 0:
            raise ValidationError("crop_offset_max must be >= 0")
        lo, hi = self.blur_sigma_range
        if not 0.0 <= lo <= hi:
            raise ValidationError("blur_sigma_range must satisfy 0 <= lo <= hi")
        rlo, rhi = self.rotation_range
        if not 0.0 <= rlo <= rhi <= 360.0:
            raise ValidationError("rotation_range must satisfy 0 <= lo <= hi <= 360")


def augment(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Offset crop, flips, blur, rotation, in that order; identity if all off."""
    out = _check_image(img, "augment")
    if spec.crop_offset_max > 0:
        m = spec.crop_offset_max
        dy, dx = (int(v) for v in rng.integers(-m, m + 1, size=2))
        padded = np.pad(out, ((m, m), (m, m), (0, 0)), mode="reflect")
        out = padded[m + dy : m + dy + img.shape[0], m + dx : m + dx + img.shape[1]].copy()
    if spec.allow_hflip and rng.random() < 0.5:
        out = out[:, ::-1].copy()
    if spec.allow_vflip and rng.random() < 0.5:
        out = out[::-1].copy()
    lo, hi = spec.blur_sigma_range
    if hi > 0.0:
        sigma = float(rng.uniform(lo, hi))
        if sigma > 1e-12:
            out = gaussian_blur(out, sigma)
    rlo, rhi = spec.rotation_range
    if rhi > 0.0:
        angle = float(rng.uniform(rlo, rhi))
        if angle % 360.0 != 0.0:
            out = rotate_image(out, angle)
    return out


# ---------------------------------------------------------------------------
# dataset operations


def _group_by_label(dataset: list[LabeledImage]) -> dict[int, list[LabeledImage]]:
    groups: dict[int, list[LabeledImage]] = {}
    for item in dataset:
        groups.setdefault(item.label, []).append(item)
    return groups


def balance_classes(
    dataset: list[LabeledImage], spec: AugmentSpec, rng: np.random.Generator
) -> list[LabeledImage]:
    """Top up every class to the largest class size with augmented copies.

    Originals are kept untouched; additions carry parent_id so downstream
    splits can keep derived copies beside their source image.
    """
    if not dataset:
        raise ValidationError("cannot balance an empty dataset")
    groups = _group_by_label(dataset)
    target = max(len(v) for v in groups.values())
    existing = {item.id for item in dataset}
    out = list(dataset)
    counter = 0
    for label in sorted(groups):
        members = groups[label]
        for _ in range(target - len(members)):
            parent = members[int(rng.integers(len(members)))]
            new_id = f"{parent.id}.aug{counter}"
            while new_id in existing:
                counter += 1
                new_id = f"{parent.id}.aug{counter}"
            existing.add(new_id)
            counter += 1
            out.append(
                LabeledImage(
                    id=new_id,
                    image=augment(parent.image, spec, rng),
                    label=parent.label,
                    parent_id=parent.id,
                )
            )
    return out


def stratified_split(
    dataset: list[LabeledImage], train_fraction: float, rng: np.random.Generator
) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Per-class split with round-half-up train counts.

    Items derived from a parent (see balance_classes) always land in the same
    side as the parent, so augmented near-duplicates cannot leak across the
    boundary. Both sides get at least one item per class.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must be in (0, 1)")
    if not dataset:
        raise ValidationError("cannot split an empty dataset")

    index_of = {item.id: i for i, item in enumerate(dataset)}
    # family root: follow parent_id when the parent is present in the dataset
    root_of: dict[str, str] = {}
    for item in dataset:
        root = item.id
        seen = {root}
        cur: LabeledImage | None = item
        while cur is not None and cur.parent_id is not None and cur.parent_id in index_of:
            root = cur.parent_id
            if root in seen:
                break
            seen.add(root)
            cur = dataset[index_of[root]]
        root_of[item.id] = root

    families: dict[str, list[LabeledImage]] = {}
    for item in dataset:
        families.setdefault(root_of[item.id], []).append(item)

    by_label: dict[int, list[list[LabeledImage]]] = {}
    for root, members in families.items():
        by_label.setdefault(dataset[index_of[root]].label, []).append(members)

    train: list[LabeledImage] = []
    test: list[LabeledImage] = []
    for label in sorted(by_label):
        fams = by_label[label]
        count = sum(len(f) for f in fams)
        if count < 2:
            raise ValidationError(
                f"class {label} has {count} item(s); need >= 2 to fill both splits"
            )
        want = int(np.floor(count * train_fraction + 0.5))
        want = min(max(want, 1), count - 1)
        order = rng.permutation(len(fams))
        got = 0
        for fi in order:
            fam = fams[int(fi)]
            if got + len(fam) <= want:
                train.extend(fam)
                got += len(fam)
            else:
                test.extend(fam)
        if got == 0 or got == count:
            raise ValidationError(
                f"class {label}: family sizes cannot fill both splits"
            )
    train.sort(key=lambda it: index_of[it.id])
    test.sort(key=lambda it: index_of[it.id])
    return train, test


# ---------------------------------------------------------------------------
# synthetic data


def _draw_disk(img: np.ndarray, cy: float, cx: float, radius: float, color) -> None:
    yy, xx = np.ogrid[: img.shape[0], : img.shape[1]]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    cover = np.clip(radius + 0.5 - dist, 0.0, 1.0)[..., None]
    img *= 1.0 - cover
    img += cover * np.asarray(color, dtype=F64)


def generate_synthetic(
    classes: int = 5, per_class: int = 150, size: int = 32, seed: int = 0
) -> list[LabeledImage]:
    """Ordinal toy dataset: a bright field whose lesion count grows with label.

    Label 0 images contain no lesions; label L > 0 images contain
    4L + {0,1,2} small dark blobs inside the field.
    """
    if classes < 1 or per_class < 1:
        raise ValidationError("classes and per_class must be >= 1")
    if size < 8:
        raise ValidationError("size must be >= 8")
    items: list[LabeledImage] = []
    field_radius = 0.42 * size
    cy = cx = (size - 1) / 2.0
    for label in range(classes):
        for i in range(per_class):
            rng = rng_stream(seed, TAG_SYNTH, label, i)
            img = np.full((size, size, 3), 0.04, dtype=F64)
            brightness = rng.uniform(0.93, 1.0)
            base = np.array([0.82, 0.50, 0.20]) * brightness
            base += rng.normal(0.0, 0.01, size=3)
            _draw_disk(img, cy, cx, field_radius, base)
            n_blobs = 0 if label == 0 else 4 * label + int(rng.integers(0, 3))
            for _ in range(n_blobs):
                ang = rng.uniform(0.0, 2.0 * np.pi)
                rad = field_radius * 0.75 * np.sqrt(rng.uniform())
                by, bx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
                br = rng.uniform(1.0, 1.7)
                _draw_disk(img, by, bx, br, base * rng.uniform(0.2, 0.35))
            img += rng.normal(0.0, 0.012, size=img.shape)
            items.append(
                LabeledImage(
                    id=f"synth-{label}-{i:04d}",
                    image=np.clip(img, 0.0, 1.0).astype(F32),
                    label=label,
                )
            )
    return items


# ---------------------------------------------------------------------------
# file I/O


def write_png(path, img: np.ndarray) -> None:
    img = _check_image(img, "write_png")
    arr = np.clip(np.rint(img.astype(F64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=F32)
    return arr / F32(255.0)


_SAFE_ID = re.compile(r"[^A-Za-z0-9._-]")


def write_dataset(out_dir, items: list[LabeledImage]) -> str:
    """Write images/<id>.png plus manifest.csv; returns the manifest path."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    used: set[str] = set()
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path", "label"])
        for item in items:
            stem = _SAFE_ID.sub("_", item.id) or "img"
            name, k = stem, 0
            while name in used:
                k += 1
                name = f"{stem}_{k}"
            used.add(name)
            rel = os.path.join("images", f"{name}.png")
            write_png(os.path.join(out_dir, rel), item.image)
            writer.writerow([item.id, rel, item.label])
    return manifest_path


def parse_manifest(path, num_classes: int | None = None) -> list[ManifestEntry]:
    """Read and validate an id,path,label manifest; paths resolve relative to it."""
    base = os.path.dirname(os.path.abspath(path))
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FormatError(f"cannot open manifest {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "path", "label"]:
            raise FormatError(
                f"manifest header must be id,path,label; got {header!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"manifest line {lineno}: expected 3 fields, got {len(row)}")
            ident, rel, label_str = (f.strip() for f in row)
            if not ident:
                raise FormatError(f"manifest line {lineno}: empty id")
            if ident in seen:
                raise FormatError(f"manifest line {lineno}: duplicate id {ident!r}")
            seen.add(ident)
            try:
                label = int(label_str)
            except ValueError as exc:
                raise FormatError(
                    f"manifest line {lineno}: label {label_str!r} is not an integer"
                ) from exc
            if label < -1:
                raise FormatError(f"manifest line {lineno}: label {label} below -1")
            if num_classes is not None and label >= num_classes:
                raise FormatError(
                    f"manifest line {lineno}: label {label} outside 0..{num_classes - 1}"
                )
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            entries.append(ManifestEntry(id=ident, path=full, label=label))
    return entries


def load_dataset(manifest_path, num_classes: int | None = None) -> list[LabeledImage]:
    items = []
    for entry in parse_manifest(manifest_path, num_classes):
        if not os.path.exists(entry.path):
            raise FormatError(f"manifest references missing image {entry.path}")
        items.append(LabeledImage(id=entry.id, image=read_png(entry.path), label=entry.label))
    return items
