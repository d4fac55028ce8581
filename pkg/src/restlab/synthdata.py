"""Synthetic chest-like images with bright elliptical blobs ("nodules").

Every image is generated from its own seed ``(master_seed, index)`` so the
dataset does not depend on generation order. Pixels are quantized to
multiples of 1/255 so the PGM round trip is exact.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

SUPPORTED_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class DataError(ValueError):
    pass


class ManifestError(DataError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"manifest line {line_no}: {msg}")
        self.line_no = line_no


@dataclass(frozen=True)
class ShapeConfig:
    size: int = 64
    radius: tuple = (3.0, 8.0)        # half-maximum radius range, pixels
    max_aspect: float = 1.5
    p_positive: float = 0.7           # probability of at least one blob
    count_weights: tuple = (0.6, 0.3, 0.1)  # P(1, 2, 3 blobs | positive)
    contrast: tuple = (0.22, 0.4)
    noise_sd: float = 0.025
    max_fg_rate: float = 0.08
    min_fg_rate: float = 0.005


@dataclass
class Blob:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    amplitude: float


@dataclass
class SampleGrid:
    id: int
    pixels: np.ndarray  # float32 HxW in [0, 1]


@dataclass
class MaskGrid:
    pixels: np.ndarray  # uint8 HxW in {0, 1}
    lesion_count: int = 0

    @classmethod
    def from_array(cls, arr) -> "MaskGrid":
        from .metrics import count_components
        px = (np.asarray(arr) > 0).astype(np.uint8)
        return cls(px, count_components(px))

    @property
    def empty(self) -> bool:
        return not self.pixels.any()


@dataclass
class DatasetSplit:
    labeled: list          # of (SampleGrid, MaskGrid)
    unlabeled: list        # of SampleGrid
    folds: Optional[list] = None  # k lists of labeled ids
    labeled_fraction: float = 1.0
    shape: ShapeConfig = field(default_factory=ShapeConfig)

    def labeled_ids(self) -> list[int]:
        return [s.id for s, _ in self.labeled]

    def by_id(self) -> dict:
        return {s.id: (s, m) for s, m in self.labeled}

    def fold_pairs(self, fold: int) -> tuple[list, list]:
        """(training pairs, held-out pairs) for one fold."""
        if self.folds is None:
            raise DataError("split has no fold assignment; call make_folds first")
        held = set(self.folds[fold])
        train = [p for p in self.labeled if p[0].id not in held]
        val = [p for p in self.labeled if p[0].id in held]
        return train, val


def blob_contribution(blob: Blob, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - blob.cy, xx - blob.cx
    c, s = math.cos(blob.angle), math.sin(blob.angle)
    u = (c * dx + s * dy) / blob.rx
    v = (-s * dx + c * dy) / blob.ry
    # half maximum sits exactly on the (rx, ry) ellipse
    return blob.amplitude * np.exp(-math.log(2.0) * (u * u + v * v))


def render_mask(blobs: list, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.uint8)
    for b in blobs:
        mask |= (blob_contribution(b, size) > b.amplitude / 2).astype(np.uint8)
    return mask


def _background(rng: np.random.Generator, size: int, noise_sd: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.25, 0.45)
    # lung-field-ish vignette plus a few rib-like bands
    field_ = base + 0.12 * (1 - ((xx - 0.5) ** 2 + (yy - 0.5) ** 2) * 2.5)
    n_ribs = rng.integers(3, 6)
    phase = rng.uniform(0, 2 * np.pi)
    tilt = rng.uniform(-0.4, 0.4)
    field_ += 0.04 * np.sin(2 * np.pi * n_ribs * (yy + tilt * (xx - 0.5)) + phase)
    smooth = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), sigma=size / 10)
    smooth /= smooth.std() + 1e-12
    field_ += 0.04 * smooth
    field_ += rng.normal(0, noise_sd, (size, size))
    return field_


def _place_blobs(rng: np.random.Generator, n: int, shape: ShapeConfig) -> list:
    size = shape.size
    lo, hi = shape.radius
    for _attempt in range(200):
        blobs = []
        for _ in range(n):
            r = rng.uniform(lo, hi)
            aspect = rng.uniform(1.0, shape.max_aspect)
            ry, rx = (r, r / aspect) if rng.random() < 0.5 else (r / aspect, r)
            rx, ry = max(rx, lo * 0.8), max(ry, lo * 0.8)
            margin = max(rx, ry) + 2
            blobs.append(Blob(cy=rng.uniform(margin, size - 1 - margin),
                              cx=rng.uniform(margin, size - 1 - margin),
                              ry=ry, rx=rx, angle=rng.uniform(0, np.pi),
                              amplitude=rng.uniform(*shape.contrast)))
        if _separated(blobs) and _rate_ok(blobs, shape):
            return blobs
    raise DataError("could not place non-overlapping blobs; shape config too crowded")


def _separated(blobs: list) -> bool:
    for i in range(len(blobs)):
        for j in range(i + 1, len(blobs)):
            a, b = blobs[i], blobs[j]
            gap = math.hypot(a.cy - b.cy, a.cx - b.cx)
            if gap < max(a.rx, a.ry) + max(b.rx, b.ry) + 3:
                return False
    return True


def _rate_ok(blobs: list, shape: ShapeConfig) -> bool:
    from .metrics import count_components
    mask = render_mask(blobs, shape.size)
    rate = mask.mean()
    return (shape.min_fg_rate <= rate <= shape.max_fg_rate
            and count_components(mask) == len(blobs))


def generate_sample(seed: int, index: int, shape: ShapeConfig = ShapeConfig()):
    """Return (pixels, mask, blobs) for one image; pure function of its arguments."""
    rng = np.random.default_rng([seed, index])
    if rng.random() < shape.p_positive:
        n = 1 + int(rng.choice(len(shape.count_weights), p=np.asarray(shape.count_weights) / sum(shape.count_weights)))
    else:
        n = 0
    blobs = _place_blobs(rng, n, shape) if n else []
    img = _background(rng, shape.size, shape.noise_sd)
    for b in blobs:
        img += blob_contribution(b, shape.size)
    # per-image exposure variation, which equalization is meant to remove
    gain = rng.uniform(0.7, 1.2)
    offset = rng.uniform(-0.08, 0.08)
    img = np.clip(img * gain + offset, 0.0, 1.0)
    pixels = (np.round(img * 255) / 255).astype(np.float32)
    return pixels, render_mask(blobs, shape.size), blobs


def generate_dataset(n_labeled: int, n_unlabeled: int, seed: int,
                     shape: ShapeConfig = ShapeConfig(), k: int = 5) -> DatasetSplit:
    if n_labeled < k:
        raise DataError(f"need at least k={k} labeled images, got {n_labeled}")
    if n_unlabeled < 0:
        raise DataError("n_unlabeled must be >= 0")
    labeled, unlabeled = [], []
    for i in range(n_labeled + n_unlabeled):
        px, mask, blobs = generate_sample(seed, i, shape)
        grid = SampleGrid(i, px)
        if i < n_labeled:
            labeled.append((grid, MaskGrid(mask, len(blobs))))
        else:
            unlabeled.append(grid)
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, shape=shape)


def dataset_digest(split: DatasetSplit) -> str:
    h = hashlib.sha256()
    for s, m in split.labeled:
        h.update(s.id.to_bytes(8, "little"))
        h.update(to_u8(s.pixels).tobytes())
        h.update(m.pixels.tobytes())
    for s in split.unlabeled:
        h.update(s.id.to_bytes(8, "little"))
        h.update(to_u8(s.pixels).tobytes())
    return h.hexdigest()


def hist_equalize(image: SampleGrid) -> SampleGrid:
    """Per-image histogram equalization over 256 levels."""
    levels = to_u8(image.pixels)
    hist = np.bincount(levels.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cdf_min = cdf[hist > 0][0]
    n = levels.size
    if n == cdf_min:
        return SampleGrid(image.id, image.pixels.copy())
    lut = (cdf - cdf_min) / (n - cdf_min)
    lut = np.clip(np.round(lut * 255), 0, 255) / 255
    return SampleGrid(image.id, lut[levels].astype(np.float32))


def subset_labeled(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    if not any(abs(fraction - f) < 1e-12 for f in SUPPORTED_FRACTIONS):
        raise DataError(f"labeled fraction must be one of {SUPPORTED_FRACTIONS}, got {fraction}")
    n = len(split.labeled)
    keep = int(math.floor(fraction * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    chosen = sorted(order[:keep].tolist())
    return replace(split, labeled=[split.labeled[i] for i in chosen], folds=None,
                   labeled_fraction=fraction)


def make_folds(split: DatasetSplit, k: int, repeat_seed: int) -> list[list[int]]:
    if k < 2:
        raise DataError(f"fold count must be >= 2, got {k}")
    ids = split.labeled_ids()
    if len(ids) < k:
        raise DataError(f"{len(ids)} labeled images cannot fill {k} folds")
    perm = np.random.default_rng(repeat_seed).permutation(len(ids))
    folds: list[list[int]] = [[] for _ in range(k)]
    for pos, idx in enumerate(perm):
        folds[pos % k].append(ids[idx])
    return [sorted(f) for f in folds]


def with_folds(split: DatasetSplit, k: int, repeat_seed: int) -> DatasetSplit:
    return replace(split, folds=make_folds(split, k, repeat_seed))


# --- persistence ---------------------------------------------------------

def to_u8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported")
    body = raw[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise DataError(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


MANIFEST_NAME = "manifest.txt"


def save_dataset(split: DatasetSplit, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    fold_of = {}
    for f, ids in enumerate(split.folds or []):
        for i in ids:
            fold_of[i] = f
    lines = ["# id role image mask fold"]
    for s, m in split.labeled:
        img, msk = f"images/{s.id:06d}.pgm", f"masks/{s.id:06d}.pgm"
        write_pgm(out / img, to_u8(s.pixels))
        write_pgm(out / msk, m.pixels * 255)
        lines.append(f"{s.id} labeled {img} {msk} {fold_of.get(s.id, '-')}")
    for s in split.unlabeled:
        img = f"images/{s.id:06d}.pgm"
        write_pgm(out / img, to_u8(s.pixels))
        lines.append(f"{s.id} unlabeled {img} - -")
    path = out / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def load_dataset(root, shape: Optional[ShapeConfig] = None) -> DatasetSplit:
    from .metrics import count_components
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    labeled, unlabeled = [], []
    folds: dict[int, list[int]] = {}
    seen = set()
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ManifestError(line_no, f"expected 5 fields, got {len(parts)}")
        sid, role, img, msk, fold = parts
        try:
            sid = int(sid)
        except ValueError:
            raise ManifestError(line_no, f"bad id {sid!r}") from None
        if sid in seen:
            raise ManifestError(line_no, f"duplicate id {sid}")
        seen.add(sid)
        if role not in ("labeled", "unlabeled"):
            raise ManifestError(line_no, f"bad role {role!r}")
        try:
            grid = SampleGrid(sid, (read_pgm(root / img) / 255.0).astype(np.float32))
        except (OSError, DataError) as exc:
            raise ManifestError(line_no, f"cannot read image: {exc}") from None
        if role == "labeled":
            if msk == "-":
                raise ManifestError(line_no, "labeled row without mask")
            try:
                m = (read_pgm(root / msk) > 0).astype(np.uint8)
            except (OSError, DataError) as exc:
                raise ManifestError(line_no, f"cannot read mask: {exc}") from None
            labeled.append((grid, MaskGrid(m, count_components(m))))
            if fold != "-":
                try:
                    folds.setdefault(int(fold), []).append(sid)
                except ValueError:
                    raise ManifestError(line_no, f"bad fold {fold!r}") from None
        else:
            unlabeled.append(grid)
    size = labeled[0][0].pixels.shape[0] if labeled else (unlabeled[0].pixels.shape[0] if unlabeled else 64)
    shape = shape or replace(ShapeConfig(), size=size)
    fold_list = [sorted(folds[k]) for k in sorted(folds)] if folds else None
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, folds=fold_list, shape=shape)
