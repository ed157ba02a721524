"""Dataset ingestion, stratified splitting, augmentation, and synthetic
generators.

Datasets are either stacks of H x W grayscale grids in [0, 1] or plain
feature-vector matrices. The manifest format is a two-column CSV,
``path_or_vector,label``: the first field is a path to an 8-bit PGM image
(relative to the manifest) or an inline semicolon-separated float vector.

The two generators exist as ground-truth oracles: ``gen_blobs`` makes
linearly separable Gaussian clusters with known structure, ``gen_glyphs``
renders rotation-sensitive bump patterns so augmentation effects are
measurable. Both are pure functions of their seeds.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

# RNG stream tags: every consumer of a user seed derives its own stream via
# default_rng([seed, TAG, ...]) so streams never collide across subsystems.
TAG_SPLIT = 11
TAG_BLOBS = 21
TAG_GLYPHS = 22
TAG_AUGMENT = 31

AUGMENT_OPS = ("R", "S", "G")
NOISE_SIGMA = 0.05
SCALE_RANGE = (0.8, 1.25)


class DataError(ValueError):
    """Malformed manifest, image file, or split request."""


@dataclass
class Dataset:
    """Labeled samples: (N, H, W) image grids or an (N, F) feature matrix."""

    samples: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    provenance: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.samples.ndim not in (2, 3):
            raise DataError(f"samples must be (N, F) or (N, H, W), got {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise DataError("need exactly one label per sample")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= len(self.class_names)):
            raise DataError("label id outside class_names range")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def is_images(self) -> bool:
        return self.samples.ndim == 3

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.samples[idx], self.labels[idx], list(self.class_names),
                       provenance=self.provenance)


@dataclass(frozen=True)
class SplitSpec:
    """Stratified split request: holdout fraction or k folds."""

    kind: str
    test_fraction: float | None = None
    fold_count: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "holdout":
            if self.test_fraction is None or not 0.0 < self.test_fraction < 1.0:
                raise DataError("holdout needs test_fraction in (0, 1)")
        elif self.kind == "kfold":
            if self.fold_count is None or self.fold_count < 2:
                raise DataError("kfold needs fold_count >= 2")
        else:
            raise DataError(f"unknown split kind {self.kind!r}")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    test: np.ndarray


# ---------------------------------------------------------------------------
# PGM files


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit grayscale PGM (ASCII P2 or binary P5) as floats in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()

    tokens = []
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] not in (10, 13):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        return raw[start:pos]

    magic = next_token()
    if magic not in (b"P2", b"P5"):
        raise DataError(f"{path}: not a PGM file (magic {magic!r})")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as e:
        raise DataError(f"{path}: bad PGM header: {e}") from None
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad PGM dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise DataError(f"{path}: maxval {maxval} outside 8-bit range")

    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        if len(raw) - pos < width * height:
            raise DataError(f"{path}: truncated PGM pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    else:
        values = raw[pos:].split()
        if len(values) != width * height:
            raise DataError(f"{path}: expected {width * height} pixels, got {len(values)}")
        pixels = np.array([int(v) for v in values], dtype=np.int64)
        if pixels.min() < 0 or pixels.max() > maxval:
            raise DataError(f"{path}: pixel value outside [0, {maxval}]")
    grid = pixels.reshape(height, width).astype(np.float64) / maxval
    return grid


def write_pgm(path, grid, binary: bool = True) -> None:
    """Write a [0, 1] float grid as an 8-bit PGM (maxval 255)."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise DataError(f"write_pgm: expected an H x W grid, got shape {g.shape}")
    pixels = np.clip(np.rint(g * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        if binary:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(pixels.tobytes())
        else:
            f.write(f"P2\n{w} {h}\n255\n".encode())
            for row in pixels:
                f.write((" ".join(str(int(v)) for v in row) + "\n").encode())


# ---------------------------------------------------------------------------
# manifest loading


def _parse_vector(text: str) -> np.ndarray | None:
    """Inline vector field: semicolon-separated floats. None if not a vector."""
    parts = text.split(";")
    try:
        return np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError:
        return None


def load_dataset(manifest_path) -> Dataset:
    """Load a ``path_or_vector,label`` manifest CSV.

    Image paths resolve relative to the manifest's directory; a field whose
    semicolon-separated tokens all parse as floats is an inline vector.
    Class names become contiguous ids in first-appearance order. Errors
    name the 1-based manifest row.
    """
    if not os.path.isfile(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    base = os.path.dirname(os.path.abspath(manifest_path))

    samples: list[np.ndarray] = []
    labels: list[int] = []
    class_ids: dict[str, int] = {}

    with open(manifest_path, newline="") as f:
        for row_num, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise DataError(f"row {row_num}: expected 2 fields, got {len(row)}")
            field_one, label_name = row[0].strip(), row[1].strip()
            if not label_name:
                raise DataError(f"row {row_num}: empty label")
            vector = _parse_vector(field_one)
            if vector is not None:
                sample = vector
            else:
                path = os.path.join(base, field_one)
                if not os.path.isfile(path):
                    raise DataError(f"row {row_num}: file not found: {field_one}")
                try:
                    sample = read_pgm(path)
                except DataError as e:
                    raise DataError(f"row {row_num}: {e}") from None
            if samples and sample.shape != samples[0].shape:
                raise DataError(
                    f"row {row_num}: sample shape {sample.shape} differs from "
                    f"first sample {samples[0].shape}")
            samples.append(sample)
            labels.append(class_ids.setdefault(label_name, len(class_ids)))

    if not samples:
        raise DataError("no samples in manifest")
    return Dataset(np.stack(samples), np.array(labels),
                   class_names=list(class_ids), provenance=str(manifest_path))


# ---------------------------------------------------------------------------
# stratified splitting


def _class_indices(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def split(dataset: Dataset, spec: SplitSpec):
    """Stratified split: a single Split for holdout, a fold list for kfold.

    Index sets are disjoint and exhaustive; per-class test counts land
    within one sample of the requested proportion. Deterministic per seed.
    """
    rng = np.random.default_rng([spec.seed, TAG_SPLIT])
    per_class = _class_indices(dataset.labels)

    if spec.kind == "holdout":
        train, test = [], []
        for c in sorted(per_class):
            idx = per_class[c].copy()
            rng.shuffle(idx)
            n_test = int(round(idx.size * spec.test_fraction))
            if idx.size >= 2:
                n_test = min(max(n_test, 1), idx.size - 1)
            test.append(idx[:n_test])
            train.append(idx[n_test:])
        return Split(train=np.sort(np.concatenate(train)),
                     test=np.sort(np.concatenate(test)))

    for c in sorted(per_class):
        if per_class[c].size < spec.fold_count:
            name = dataset.class_names[c]
            raise DataError(f"class {name!r} has {per_class[c].size} samples, "
                            f"fewer than fold_count={spec.fold_count}")
    assignments = np.empty(dataset.n, dtype=np.intp)
    for c in sorted(per_class):
        idx = per_class[c].copy()
        rng.shuffle(idx)
        assignments[idx] = np.arange(idx.size) % spec.fold_count
    folds = []
    for f_id in range(spec.fold_count):
        test_mask = assignments == f_id
        folds.append(Split(train=np.flatnonzero(~test_mask),
                           test=np.flatnonzero(test_mask)))
    return folds


# ---------------------------------------------------------------------------
# augmentation


def _bilinear_sample(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample a grid at fractional (row, col) positions; outside is 0."""
    h, w = grid.shape
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape, dtype=np.float64)
    for dr, dc, weight in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                           (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[valid] += weight[valid] * grid[rr[valid], cc[valid]]
    return out


def _dest_offsets(shape):
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    v, u = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    return u, v, cy, cx


def rotate(grid: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the grid center with bilinear resampling; background 0."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise DataError("rotate: needs an H x W grid")
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    u, v, cy, cx = _dest_offsets(g.shape)
    src_c = cos_t * u + sin_t * v + cx
    src_r = -sin_t * u + cos_t * v + cy
    return _bilinear_sample(g, src_r, src_c)


def rescale(grid: np.ndarray, factor: float) -> np.ndarray:
    """Scale about the center; output keeps the grid shape (crop or 0-pad)."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise DataError("rescale: needs an H x W grid")
    if factor <= 0:
        raise DataError("rescale: factor must be positive")
    u, v, cy, cx = _dest_offsets(g.shape)
    return _bilinear_sample(g, v / factor + cy, u / factor + cx)


def add_noise(sample: np.ndarray, rng, sigma: float = NOISE_SIGMA) -> np.ndarray:
    """Additive Gaussian noise clamped to [0, 1]."""
    noisy = sample + rng.normal(0.0, sigma, size=sample.shape)
    return np.clip(noisy, 0.0, 1.0)


def augment(sample: np.ndarray, ops, rng) -> np.ndarray:
    """Apply the requested transforms in the fixed order R, S, G.

    R: rotation by a uniform angle in [0, 360); S: scale by a uniform
    factor in [0.8, 1.25]; G: Gaussian noise sigma=0.05 clamped to [0, 1].
    Vector samples accept only G.
    """
    chosen = set(ops)
    unknown = chosen - set(AUGMENT_OPS)
    if unknown:
        raise DataError(f"unknown augmentation op(s): {sorted(unknown)}")
    out = np.asarray(sample, dtype=np.float64)
    if out.ndim == 1 and chosen & {"R", "S"}:
        raise DataError("rotation/scale augmentation needs grid samples")
    if "R" in chosen:
        out = rotate(out, rng.uniform(0.0, 360.0))
    if "S" in chosen:
        out = rescale(out, rng.uniform(*SCALE_RANGE))
    if "G" in chosen:
        out = add_noise(out, rng)
    return out


def augment_rng(seed: int, epoch: int, sample_index: int):
    """Per-sample augmentation stream; schedule-independent by construction."""
    return np.random.default_rng([seed, TAG_AUGMENT, epoch, sample_index])


# ---------------------------------------------------------------------------
# synthetic generators


def gen_blobs(class_count: int, per_class: int, dim: int, separation: float,
              seed: int) -> Dataset:
    """Isotropic unit-variance Gaussians at the vertices of a regular
    simplex with edge length ``separation``, embedded along a seeded random
    orthonormal basis. Needs dim >= class_count - 1."""
    if class_count < 2:
        raise DataError("gen_blobs needs at least 2 classes")
    if dim < class_count - 1:
        raise DataError(f"dim={dim} cannot hold a {class_count}-vertex simplex")
    rng = np.random.default_rng([seed, TAG_BLOBS])

    # centered identity rows form a regular simplex with edge sqrt(2)
    simplex = np.eye(class_count) - 1.0 / class_count
    u, s, _ = np.linalg.svd(simplex, full_matrices=False)
    coords = (u[:, :class_count - 1] * s[:class_count - 1]) * (separation / np.sqrt(2.0))
    basis, _ = np.linalg.qr(rng.normal(size=(dim, class_count - 1)))
    centers = coords @ basis.T

    samples = np.concatenate([
        rng.normal(loc=centers[c], scale=1.0, size=(per_class, dim))
        for c in range(class_count)
    ])
    labels = np.repeat(np.arange(class_count), per_class)
    return Dataset(samples, labels,
                   class_names=[f"blob_{c}" for c in range(class_count)],
                   provenance=f"blobs(K={class_count},per_class={per_class},"
                              f"dim={dim},separation={separation},seed={seed})")


def _glyph_bumps(class_id: int, size: int) -> np.ndarray:
    """Base bump centers for one glyph class: 2-5 bumps on a 250-degree arc
    (never rotationally symmetric), radius and center bump varying by class."""
    if not 0 <= class_id < 16:
        raise DataError("glyph classes are 0..15")
    if size < 16:
        raise DataError("glyph size must be >= 16")
    bump_count = 2 + class_id % 4
    radius = (0.18 + 0.10 * ((class_id // 4) % 2)) * size
    center_bump = (class_id // 8) % 2 == 1

    c = (size - 1) / 2.0
    arc = np.deg2rad(250.0)
    centers = []
    for i in range(bump_count):
        a = arc * i / (bump_count - 1)
        centers.append((c + radius * np.sin(a), c + radius * np.cos(a)))
    if center_bump:
        centers.append((c, c))
    return np.asarray(centers)


def glyph_prototype(class_id: int, size: int) -> np.ndarray:
    """Clean (jitter-free) rendering of one glyph class."""
    centers = _glyph_bumps(class_id, size)
    return _render_bumps(size, centers, np.full(len(centers), 0.9), size / 14.0)


def _render_bumps(size, centers, amplitudes, sigma) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    grid = np.zeros((size, size), dtype=np.float64)
    for (r, c), amp in zip(centers, amplitudes):
        grid += amp * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2.0 * sigma ** 2))
    return np.clip(grid, 0.0, 1.0)


def gen_glyphs(class_count: int, per_class: int, size: int, seed: int,
               jitter: float = 0.02) -> Dataset:
    """Render jittered glyph samples for ``class_count`` classes.

    Jitter perturbs bump positions (sd = jitter * size) and amplitudes;
    jitter=0 reproduces the prototype exactly for every sample.
    """
    if not 2 <= class_count <= 16:
        raise DataError("glyph class_count must be in [2, 16]")
    if size < 16:
        raise DataError("glyph size must be >= 16")
    rng = np.random.default_rng([seed, TAG_GLYPHS])

    grids = np.empty((class_count * per_class, size, size), dtype=np.float64)
    row = 0
    for cls in range(class_count):
        base = _glyph_bumps(cls, size)
        for _ in range(per_class):
            offsets = rng.normal(0.0, jitter * size, size=base.shape)
            amps = 0.9 * (1.0 + rng.normal(0.0, 2.0 * jitter, size=len(base)))
            grids[row] = _render_bumps(size, base + offsets,
                                       np.clip(amps, 0.2, None), size / 14.0)
            row += 1
    labels = np.repeat(np.arange(class_count), per_class)
    return Dataset(grids, labels,
                   class_names=[f"glyph_{c}" for c in range(class_count)],
                   provenance=f"glyphs(K={class_count},per_class={per_class},"
                              f"size={size},seed={seed},jitter={jitter})")
