"""Synthetic identity datasets with controllable intra-class variance.

Images are small grayscale patterns (default 24x24, pixels in [0, 1]).
Each class is built from a smooth random template; normal classes add a
per-sample geometric shift whose magnitude is ``pose_spread``, while
duplicate-flagged classes replicate the template with sub-tolerance
pixel noise, modelling web-crawled identities whose samples are
near-identical copies.  A configurable fraction of samples is degraded
on generation via the same three quality-degrading operators used for
on-the-fly augmentation (rescale blur, random erase, brightness and
contrast jitter), and the injected degradation level is stored as
ground truth so quality scores can be validated against it.

Dataset container format (little-endian):
    magic b"IGFQDS1"
    u32 num_classes, u32 samples_per_class, u32 side
    per sample (class-major order): u32 label, f32 degradation_level,
        side*side f32 pixels row-major
    per class: u8 flag (0 = normal, 1 = duplicate)
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .rngstreams import (
    T_CLASS_FLAGS,
    T_DEGRADE,
    T_DEGRADE_SHARED,
    T_SAMPLE,
    T_TEMPLATE,
    rng_for,
)

MAGIC = b"IGFQDS1"

FLAG_NORMAL = 0
FLAG_DUPLICATE = 1

# Duplicate-class samples differ pairwise by at most this much before
# degradation; the injected noise amplitude is a quarter of it.
DUPLICATE_PIXEL_TOL = 1e-3

# Decided operator ranges (the erase range is also a tested contract).
ERASE_AREA_LO = 0.05
ERASE_AREA_HI = 0.30
JITTER_GAIN_LO = 0.6
JITTER_GAIN_HI = 1.4
JITTER_SHIFT = 0.2
BLUR_FACTOR_LO = 0.25
BLUR_FACTOR_HI = 0.95

# Strength scaling for level-proportional degradation at generation.
_DEG_BLUR_MAX = 0.75
_DEG_ERASE_MAX = 0.30
_DEG_GAIN_MAX = 0.4

# Fine enough that blur genuinely destroys class detail, the way it
# destroys identity detail in real face images.
_TEMPLATE_GRID = 12

# Per-class diversity multiplier range: normal classes draw their own
# pose scale from pose_spread * U(lo, hi), so intra-class variance is an
# intrinsic, class-dependent data property (as it is for real
# identities) rather than one global constant.  The range is kept
# moderate; squaring (variance vs shift scale) widens it further.
_POSE_SCALE_LO = 0.8
_POSE_SCALE_HI = 1.2


@dataclass(frozen=True)
class SynthConfig:
    """Generation parameters for one synthetic identity dataset."""

    num_classes: int
    samples_per_class: int
    side: int = 24
    duplicate_class_fraction: float = 0.0
    pose_spread: float = 0.5
    degrade_fraction: float = 0.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class must be >= 2")
        if self.side < 4:
            raise ConfigError("side must be >= 4")
        for name in ("duplicate_class_fraction", "degrade_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.pose_spread < 0.0:
            raise ConfigError("pose_spread must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")


@dataclass
class IdentityDataset:
    """Images grouped into classes, with ground-truth degradation levels.

    ``images`` is (n, side, side) float32 in [0, 1], samples stored
    class-major; ``labels`` holds the class index of every sample;
    ``degradation_level`` is 0 exactly for pristine samples;
    ``class_flags`` marks duplicate-flagged classes.
    """

    images: np.ndarray
    labels: np.ndarray
    degradation_level: np.ndarray
    class_flags: np.ndarray

    @property
    def num_samples(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return self.class_flags.shape[0]

    @property
    def samples_per_class(self):
        return self.num_samples // self.num_classes

    @property
    def side(self):
        return self.images.shape[1]

    def validate(self):
        n = self.num_samples
        if self.labels.shape != (n,) or self.degradation_level.shape != (n,):
            raise FormatError("per-sample arrays disagree on sample count")
        counts = np.bincount(self.labels.astype(np.int64),
                             minlength=self.num_classes)
        if counts.size != self.num_classes or np.any(counts < 2):
            raise FormatError("every class must appear at least twice")
        if np.any(self.images < 0.0) or np.any(self.images > 1.0):
            raise FormatError("pixel values outside [0, 1]")


# ---------------------------------------------------------------------------
# resampling primitives

def _area_downscale_matrix(n_in, n_out):
    """Row-stochastic matrix averaging n_in cells into n_out boxes."""
    ratio = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * ratio, (i + 1) * ratio
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            m[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    return m / ratio


def _bilinear_upscale_matrix(n_in, n_out):
    """Row-stochastic matrix resampling n_in cells to n_out, half-pixel
    centers, edge-clamped."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        j0 = int(np.floor(src))
        j1 = min(j0 + 1, n_in - 1)
        t = src - j0
        m[i, j0] += 1.0 - t
        m[i, j1] += t
    return m


def rescale_blur(img, factor):
    """Shrink the image by ``factor`` (area averaging) and restore it to
    its original size (bilinear), blurring it.  factor=1 is the identity.
    """
    if not 0.0 < factor <= 1.0:
        raise DomainError(f"rescale factor must lie in (0, 1], got {factor}")
    side = img.shape[0]
    small = max(1, int(round(side * factor)))
    if small == side:
        return img.copy()
    down = _area_downscale_matrix(side, small)
    up = _bilinear_upscale_matrix(small, side)
    out = up @ (down @ img @ down.T) @ up.T
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def _erase_rect(img, rng, lo_frac, hi_frac):
    """Zero out a random rectangle covering a fraction of the image in
    [lo_frac, hi_frac] after integer rounding.  No-op when the range
    rounds below one pixel.
    """
    side = img.shape[0]
    total = side * side
    lo_px = max(1, int(np.ceil(lo_frac * total)))
    hi_px = int(np.floor(hi_frac * total))
    if hi_px < 1:
        return img.copy()
    lo_px = min(lo_px, hi_px)
    area = rng.uniform(lo_frac, hi_frac) * total
    aspect = rng.uniform(0.5, 2.0)
    h_lo = max(1, int(np.ceil(lo_px / side)))
    h_hi = min(side, hi_px)
    h = int(np.clip(int(round(np.sqrt(area * aspect))), h_lo, max(h_lo, h_hi)))
    w_lo = max(1, int(np.ceil(lo_px / h)))
    w_hi = min(side, hi_px // h)
    w = int(np.clip(int(round(area / h)), w_lo, max(w_lo, w_hi)))
    top = int(rng.integers(0, side - h + 1))
    left = int(rng.integers(0, side - w + 1))
    out = img.copy()
    out[top:top + h, left:left + w] = 0.0
    return out


def random_erase(img, rng):
    """Set a random axis-aligned rectangle (5% to 30% of the image) to 0."""
    return _erase_rect(img, rng, ERASE_AREA_LO, ERASE_AREA_HI)


def jitter_affine(img, gain, shift):
    """Contrast/brightness map clamp(gain*(img - 0.5) + 0.5 + shift)."""
    out = gain * (img - 0.5) + 0.5 + shift
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def color_jitter(img, rng):
    """Randomly modify brightness and contrast (grayscale jitter)."""
    gain = rng.uniform(JITTER_GAIN_LO, JITTER_GAIN_HI)
    shift = rng.uniform(-JITTER_SHIFT, JITTER_SHIFT)
    return jitter_affine(img, gain, shift)


def flip_columns(img):
    """Mirror the image left-right."""
    return img[:, ::-1].copy()


def hflip(img, rng):
    """Mirror left-right with probability 0.5, else return a copy."""
    if rng.random() < 0.5:
        return flip_columns(img)
    return img.copy()


def augment(img, rng, p=0.3):
    """Apply each quality-degrading operator independently with
    probability ``p``, in the fixed order blur -> erase -> jitter.

    With an image-and-epoch-specific ``rng`` this makes augmentation a
    pure function of the stream, so epochs redraw independently.
    """
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"augmentation probability must lie in [0, 1], got {p}")
    out = img
    if rng.random() < p:
        out = rescale_blur(out, rng.uniform(BLUR_FACTOR_LO, BLUR_FACTOR_HI))
    if rng.random() < p:
        out = random_erase(out, rng)
    if rng.random() < p:
        out = color_jitter(out, rng)
    if out is img:
        out = img.copy()
    return out


def degrade(img, level, rng):
    """Apply all three degradation operators with strength proportional
    to ``level`` in (0, 1].  Used to bake ground-truth quality loss into
    generated samples.
    """
    if not 0.0 < level <= 1.0:
        raise DomainError(f"degradation level must lie in (0, 1], got {level}")
    out = rescale_blur(img, 1.0 - _DEG_BLUR_MAX * level)
    out = _erase_rect(out, rng, 0.5 * _DEG_ERASE_MAX * level,
                      _DEG_ERASE_MAX * level)
    gain = 1.0 - _DEG_GAIN_MAX * level
    shift = rng.uniform(-JITTER_SHIFT, JITTER_SHIFT) * level
    return jitter_affine(out, gain, shift)


# ---------------------------------------------------------------------------
# generation

def _sample_template(grid, side, dy, dx):
    """Evaluate the coarse template grid at a shifted pixel lattice."""
    g = grid.shape[0]
    coords = np.linspace(0.0, g - 1.0, side)
    ys = np.clip(coords + dy, 0.0, g - 1.0)
    xs = np.clip(coords + dx, 0.0, g - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, g - 1)
    x1 = np.minimum(x0 + 1, g - 1)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - tx) + grid[np.ix_(y0, x1)] * tx
    bot = grid[np.ix_(y1, x0)] * (1 - tx) + grid[np.ix_(y1, x1)] * tx
    return top * (1 - ty) + bot * ty


def gen_dataset(cfg):
    """Generate a dataset deterministically from ``cfg``.

    Duplicate-flagged classes draw one class-level degradation decision
    and apply identical operator draws to every sample, so the class
    stays a near-identical cluster of (possibly degraded) images; this
    is the mislabel trap the variance guidance is meant to catch.
    Normal classes draw degradation per sample.
    """
    cfg.validate()
    c_total, n, side = cfg.num_classes, cfg.samples_per_class, cfg.side
    seed = cfg.seed

    n_dup = int(round(cfg.duplicate_class_fraction * c_total))
    flags = np.zeros(c_total, dtype=np.uint8)
    dup_classes = rng_for(seed, T_CLASS_FLAGS).permutation(c_total)[:n_dup]
    flags[dup_classes] = FLAG_DUPLICATE

    grid_side = min(_TEMPLATE_GRID, side)
    images = np.empty((c_total * n, side, side), dtype=np.float32)
    labels = np.empty(c_total * n, dtype=np.uint32)
    levels = np.empty(c_total * n, dtype=np.float32)

    for c in range(c_total):
        template = rng_for(seed, T_TEMPLATE, c).uniform(0.0, 1.0,
                                                        (grid_side, grid_side))
        # Left-right symmetric templates, like the faces they stand in
        # for: a horizontal flip then acts as another pose draw instead
        # of injecting variance the pose model does not account for.
        template = 0.5 * (template + template[:, ::-1])
        if flags[c] == FLAG_DUPLICATE:
            class_rng = rng_for(seed, T_DEGRADE, c)
            degraded = class_rng.random() < cfg.degrade_fraction
            class_level = 1.0 - class_rng.random() if degraded else 0.0
        else:
            class_pose = cfg.pose_spread * rng_for(seed, T_TEMPLATE, c, 1).uniform(
                _POSE_SCALE_LO, _POSE_SCALE_HI)
        for i in range(n):
            row = c * n + i
            srng = rng_for(seed, T_SAMPLE, c, i)
            if flags[c] == FLAG_DUPLICATE:
                img = _sample_template(template, side, 0.0, 0.0)
                img = img + srng.uniform(-DUPLICATE_PIXEL_TOL / 4,
                                         DUPLICATE_PIXEL_TOL / 4,
                                         (side, side))
                img = np.clip(img, 0.0, 1.0)
                level = class_level
                if level > 0.0:
                    # Fresh stream per sample with identical draws keeps the
                    # degraded copies within the duplicate tolerance.
                    img = degrade(img, level, rng_for(seed, T_DEGRADE_SHARED, c))
            else:
                dy, dx = srng.normal(0.0, class_pose, 2)
                img = _sample_template(template, side, dy, dx)
                drng = rng_for(seed, T_DEGRADE, c, i)
                level = 0.0
                if drng.random() < cfg.degrade_fraction:
                    level = 1.0 - drng.random()
                    img = degrade(img, level, drng)
            images[row] = img
            labels[row] = c
            levels[row] = level

    return IdentityDataset(images=images, labels=labels,
                           degradation_level=levels, class_flags=flags)


# ---------------------------------------------------------------------------
# container i/o

def save_dataset(dataset, path):
    """Write the dataset container file."""
    dataset.validate()
    c_total = dataset.num_classes
    n = dataset.samples_per_class
    side = dataset.side
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", c_total, n, side))
        for row in range(dataset.num_samples):
            fh.write(struct.pack("<I", int(dataset.labels[row])))
            fh.write(struct.pack("<f", float(dataset.degradation_level[row])))
            fh.write(np.ascontiguousarray(
                dataset.images[row], dtype="<f4").tobytes())
        fh.write(dataset.class_flags.astype(np.uint8).tobytes())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated dataset file while reading {what}",
                          offset=fh.tell())
    return data


def load_dataset(path):
    """Read a dataset container file; raises FormatError on corruption."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC), "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}",
                              offset=0)
        c_total, n, side = struct.unpack("<III", _read_exact(fh, 12, "header"))
        total = c_total * n
        images = np.empty((total, side, side), dtype=np.float32)
        labels = np.empty(total, dtype=np.uint32)
        levels = np.empty(total, dtype=np.float32)
        pix_bytes = side * side * 4
        for row in range(total):
            labels[row] = struct.unpack(
                "<I", _read_exact(fh, 4, f"label of sample {row}"))[0]
            levels[row] = struct.unpack(
                "<f", _read_exact(fh, 4, f"level of sample {row}"))[0]
            images[row] = np.frombuffer(
                _read_exact(fh, pix_bytes, f"pixels of sample {row}"),
                dtype="<f4").reshape(side, side)
        flags = np.frombuffer(
            _read_exact(fh, c_total, "class flags"), dtype=np.uint8).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError("unexpected trailing bytes", offset=fh.tell() - 1)
    ds = IdentityDataset(images=images, labels=labels,
                         degradation_level=levels, class_flags=flags)
    ds.validate()
    return ds
