"""Synthetic image data, SimCLR-style augmentations and a graded corruption suite.

Images are float arrays of shape ``(H, W, C)`` with values in ``[0, 1]``;
batches add a leading axis. Every random operation takes an explicit seed
or ``numpy.random.Generator``.

Corruption severity grids (index = severity 0..5)::

    gaussian_noise  sigma       0, .04, .08, .12, .18, .25    x + N(0, sigma)
    speckle_noise   sigma       0, .10, .20, .30, .45, .60    x + x * N(0, sigma)
    brightness      shift       0, .025, .05, .075, .10, .125 x + shift
    contrast        factor      1, .75, .55, .40, .28, .18    m + (x - m) * factor
    box_blur        (radius, passes)  (0,0) (1,1) (1,2) (2,1) (2,2) (3,2)
    pixelate        scale       1, .80, .65, .50, .40, .30    block-average at scale*16

Results are clipped to ``[0, 1]``. The box-blur grid keeps the radii
0,1,1,2,2,3 and adds passes so that the blur variance (0, 2/3, 4/3, 2, 4, 8
pixels^2 per axis) grows strictly with severity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

HEIGHT = WIDTH = 16
CHANNELS = 3
DATA_VERSION = 1

CORRUPTIONS = ("gaussian_noise", "speckle_noise", "brightness", "contrast", "box_blur", "pixelate")

SEVERITY_GRIDS = {
    "gaussian_noise": (0.0, 0.04, 0.08, 0.12, 0.18, 0.25),
    "speckle_noise": (0.0, 0.10, 0.20, 0.30, 0.45, 0.60),
    "brightness": (0.0, 0.025, 0.05, 0.075, 0.10, 0.125),
    "contrast": (1.0, 0.75, 0.55, 0.40, 0.28, 0.18),
    "box_blur": ((0, 0), (1, 1), (1, 2), (2, 1), (2, 2), (3, 2)),
    "pixelate": (1.0, 0.80, 0.65, 0.50, 0.40, 0.30),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float32
    labels: np.ndarray  # (N,) int64
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1).astype(np.float64)


# ---------------------------------------------------------------- generation


def _hsv_to_rgb(h, s, v):
    h = np.asarray(h, dtype=np.float64) % 1.0
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    i = i.astype(int) % 6
    table = np.stack(
        [np.stack(c, -1) for c in ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    )
    return table[i, np.arange(np.size(h))] if np.ndim(h) else table[i]


_YY, _XX = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float64)
_YY = (_YY + 0.5) / HEIGHT - 0.5
_XX = (_XX + 0.5) / WIDTH - 0.5


def _in_domain_pattern(c: int, k: int, rng: np.random.Generator, difficulty: float) -> np.ndarray:
    """Class ``c`` of ``k``: gratings, blobs or checkers with class-specific geometry."""
    family = c % 3
    variant = c // 3
    n_variants = (k + 2 - family) // 3
    jitter = 1.0 + 2.0 * difficulty
    if family == 0:
        angle = np.pi * variant / max(n_variants, 1) + rng.normal(0, 0.08 * jitter)
        freq = 3.0
        proj = _XX * np.cos(angle) + _YY * np.sin(angle)
        return 0.5 + 0.5 * np.cos(2 * np.pi * freq * proj + rng.uniform(0, 2 * np.pi))
    if family == 1:
        theta = 2 * np.pi * variant / max(n_variants, 1) + np.pi / 4
        cy, cx = 0.22 * np.sin(theta), 0.22 * np.cos(theta)
        cy += rng.normal(0, 0.04 * jitter)
        cx += rng.normal(0, 0.04 * jitter)
        width = 0.13 * np.exp(rng.normal(0, 0.1))
        return np.exp(-((_YY - cy) ** 2 + (_XX - cx) ** 2) / (2 * width**2))
    freq = 2.0 + variant
    py, px = rng.uniform(0, 1, size=2)
    return ((np.floor((_YY + 0.5) * freq + py) + np.floor((_XX + 0.5) * freq + px)) % 2).astype(np.float64)


def _out_domain_pattern(c: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Disjoint generator: concentric rings and diagonal plaid, unseen in training."""
    if c % 2 == 0:
        cy, cx = rng.uniform(-0.25, 0.25, size=2)
        r = np.sqrt((_YY - cy) ** 2 + (_XX - cx) ** 2)
        return 0.5 + 0.5 * np.cos(2 * np.pi * (2.0 + c / max(k, 1) * 3.0) * r + rng.uniform(0, 2 * np.pi))
    a, b = rng.uniform(0, 2 * np.pi, size=2)
    f = 1.5 + (c % 5) * 0.5
    return 0.25 * (2 + np.cos(2 * np.pi * f * (_XX + _YY) + a) + np.cos(2 * np.pi * f * (_XX - _YY) + b))


def generate_dataset(
    n_per_class: int, classes: int, seed: int, domain: str = "in", difficulty: float = 0.0
) -> Dataset:
    """Balanced synthetic dataset in class-major order (labels ``repeat(arange(K), n)``).

    ``domain="out"`` switches to a disjoint pattern generator. ``difficulty``
    in ``[0, 1]`` widens the per-sample jitter (weaker, noisier patterns).
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if domain not in ("in", "out"):
        raise ValueError(f"unknown domain {domain!r}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must be in [0, 1]")
    rng = np.random.default_rng(seed)
    offset = 0.5 / classes if domain == "out" else 0.0
    hues = (np.arange(classes) / classes + offset) % 1.0
    images = np.empty((classes * n_per_class, HEIGHT, WIDTH, CHANNELS), dtype=np.float32)
    idx = 0
    for c in range(classes):
        fg_base = _hsv_to_rgb(hues[c], 0.75, 0.9)
        bg_base = _hsv_to_rgb((hues[c] + 0.5) % 1.0, 0.5, 0.25)
        for _ in range(n_per_class):
            if domain == "in":
                pattern = _in_domain_pattern(c, classes, rng, difficulty)
            else:
                pattern = _out_domain_pattern(c, classes, rng)
            lo_amp = 0.7 - 0.55 * difficulty
            amp = rng.uniform(lo_amp, 1.0)
            fg = np.clip(fg_base + rng.normal(0, 0.05 + 0.1 * difficulty, 3), 0, 1)
            bg = np.clip(bg_base + rng.normal(0, 0.05 + 0.1 * difficulty, 3), 0, 1)
            mid = 0.5 * (fg + bg)
            img = mid + (amp * (pattern - 0.5))[..., None] * (fg - bg)
            noise = rng.uniform(0.0, 0.03 + 0.15 * difficulty)
            img = img + rng.normal(0, noise, img.shape)
            images[idx] = np.clip(img, 0.0, 1.0)
            idx += 1
    labels = np.repeat(np.arange(classes), n_per_class).astype(np.int64)
    meta = {
        "version": DATA_VERSION,
        "K": classes,
        "n": n_per_class,
        "seed": seed,
        "domain": domain,
        "difficulty": difficulty,
        "shape": [HEIGHT, WIDTH, CHANNELS],
    }
    return Dataset(images, labels, meta)


def save_dataset(ds: Dataset, directory) -> Path:
    """Write ``meta.json`` and ``data.bin`` (little-endian float32, image-major)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "meta.json").write_text(json.dumps(ds.meta, sort_keys=True, indent=2) + "\n")
    (directory / "data.bin").write_bytes(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("version") != DATA_VERSION:
        raise ValueError(f"{directory}: unsupported dataset version {meta.get('version')}")
    shape = tuple(meta["shape"])
    n = meta["K"] * meta["n"]
    raw = np.frombuffer((directory / "data.bin").read_bytes(), dtype="<f4")
    if raw.size != n * int(np.prod(shape)):
        raise ValueError(f"{directory}: data.bin size does not match meta.json")
    images = raw.reshape((n, *shape)).astype(np.float32)
    labels = np.repeat(np.arange(meta["K"]), meta["n"]).astype(np.int64)
    return Dataset(images, labels, meta)


def nearest_centroid_accuracy(train: Dataset, test: Dataset | None = None) -> float:
    """Pixel-space nearest-centroid classifier accuracy (separability check)."""
    test = test or train
    x, xt = train.flat(), test.flat()
    classes = np.unique(train.labels)
    cents = np.stack([x[train.labels == c].mean(axis=0) for c in classes])
    d = ((xt[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(classes[np.argmin(d, axis=1)] == test.labels))


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    hue_p: float = 0.2
    hue_shift: float = 0.1
    noise_sigma: float = 0.0  # extra Gaussian-noise augmentation, off by default

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls((1.0, 1.0), (1.0, 1.0), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        for key in ("crop_scale", "crop_ratio"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"], d["crop_ratio"] = list(self.crop_scale), list(self.crop_ratio)
        return d


def _interp_matrix(start, length, size: int) -> np.ndarray:
    """Rows of linear-interpolation weights sampling ``[start, start+length)`` at ``size`` points."""
    pos = np.clip(start[:, None] + (np.arange(size) + 0.5) * (length[:, None] / size) - 0.5, 0, size - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = pos - lo
    m = np.zeros((start.size, size, size))
    n_idx = np.arange(start.size)[:, None]
    r_idx = np.arange(size)[None, :]
    np.add.at(m, (n_idx, r_idx, lo), 1 - frac)
    np.add.at(m, (n_idx, r_idx, hi), frac)
    return m


def _bilinear_crop_resize(images: np.ndarray, top, left, h, w) -> np.ndarray:
    n, H, W, C = images.shape
    ry = _interp_matrix(top, h, H)
    rx = _interp_matrix(left, w, W)
    rows = (ry @ images.reshape(n, H, W * C)).reshape(n, H, W, C)
    return rx[:, None] @ rows


_GRAY = np.array([0.299, 0.587, 0.114])
_TO_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_FROM_YIQ = np.linalg.inv(_TO_YIQ)


def augment_batch(images: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """One independent draw of the augmentation pipeline per image."""
    x = np.asarray(images, dtype=np.float64)
    n, H, W, _ = x.shape
    scale = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1], n)
    ratio = np.exp(rng.uniform(np.log(cfg.crop_ratio[0]), np.log(cfg.crop_ratio[1]), n))
    h = np.minimum(np.sqrt(scale / ratio) * H, H)
    w = np.minimum(np.sqrt(scale * ratio) * W, W)
    top = rng.uniform(0, 1, n) * (H - h)
    left = rng.uniform(0, 1, n) * (W - w)
    x = _bilinear_crop_resize(x, top, left, h, w)

    flip = rng.uniform(size=n) < cfg.flip_p
    x[flip] = x[flip, :, ::-1]

    if cfg.brightness > 0:
        f = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness, n)
        x = np.clip(x * f[:, None, None, None], 0, 1)
    if cfg.contrast > 0:
        f = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast, n)[:, None, None, None]
        m = (x @ _GRAY).mean(axis=(1, 2))[:, None, None, None]
        x = np.clip(m + (x - m) * f, 0, 1)
    if cfg.saturation > 0:
        f = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation, n)[:, None, None, None]
        g = (x @ _GRAY)[..., None]
        x = np.clip(g + (x - g) * f, 0, 1)
    if cfg.hue_p > 0 and cfg.hue_shift > 0:
        apply = rng.uniform(size=n) < cfg.hue_p
        angle = np.where(apply, rng.uniform(-cfg.hue_shift, cfg.hue_shift, n), 0.0) * 2 * np.pi
        if apply.any():
            c, sn = np.cos(angle[apply]), np.sin(angle[apply])
            rot = np.zeros((c.size, 3, 3))
            rot[:, 0, 0] = 1.0
            rot[:, 1, 1], rot[:, 1, 2], rot[:, 2, 1], rot[:, 2, 2] = c, -sn, sn, c
            mats = _FROM_YIQ @ rot @ _TO_YIQ
            x[apply] = np.clip(x[apply] @ mats.transpose(0, 2, 1)[:, None], 0, 1)
    if cfg.noise_sigma > 0:
        sig = rng.uniform(0, cfg.noise_sigma, n)[:, None, None, None]
        x = np.clip(x + rng.normal(size=x.shape) * sig, 0, 1)
    return x


def augment_pair(image: np.ndarray, seed: int, cfg: AugmentConfig = AugmentConfig()):
    rng = np.random.default_rng(seed)
    views = augment_batch(np.stack([image, image]), rng, cfg)
    return views[0], views[1]


# ---------------------------------------------------------------- corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if int(self.severity) != self.severity or not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be an integer in 0..5, got {self.severity}")

    @property
    def parameter(self):
        return SEVERITY_GRIDS[self.kind][self.severity]


def _box_blur(x: np.ndarray, radius: int, passes: int) -> np.ndarray:
    k = 2 * radius + 1
    for _ in range(passes):
        for axis in (1, 2):
            pad = [(0, 0)] * x.ndim
            pad[axis] = (radius, radius)
            xp = np.pad(x, pad, mode="reflect")
            c = np.cumsum(xp, axis=axis)
            c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
            n = x.shape[axis]
            x = (np.take(c, np.arange(k, k + n), axis=axis) - np.take(c, np.arange(n), axis=axis)) / k
    return x


def _pixelate(x: np.ndarray, scale: float) -> np.ndarray:
    _, H, W, _ = x.shape
    sh, sw = max(1, round(H * scale)), max(1, round(W * scale))
    by = (np.arange(H) * sh) // H
    bx = (np.arange(W) * sw) // W
    sums = np.zeros((x.shape[0], sh, sw, x.shape[3]))
    np.add.at(sums, (slice(None), by[:, None], bx[None, :]), x)
    counts = np.zeros((sh, sw))
    np.add.at(counts, (by[:, None], bx[None, :]), 1.0)
    means = sums / counts[None, :, :, None]
    return means[:, by[:, None], bx[None, :]]


def corrupt_batch(images: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if spec.severity == 0:
        return x.copy()
    p = spec.parameter
    rng = np.random.default_rng(seed)
    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0, p, x.shape)
    elif spec.kind == "speckle_noise":
        out = x + x * rng.normal(0, p, x.shape)
    elif spec.kind == "brightness":
        out = x + p
    elif spec.kind == "contrast":
        m = x.mean(axis=(1, 2, 3), keepdims=True)
        out = m + (x - m) * p
    elif spec.kind == "box_blur":
        out = _box_blur(x, *p)
    else:
        out = _pixelate(x, p)
    return np.clip(out, 0.0, 1.0)


def corrupt(image: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    return corrupt_batch(np.asarray(image)[None], spec, seed)[0]


def full_manifest() -> list[CorruptionSpec]:
    return [CorruptionSpec(k, s) for k in CORRUPTIONS for s in range(6)]


def save_manifest(specs, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([{"kind": s.kind, "severity": s.severity} for s in specs], indent=2) + "\n")
    return path


def load_manifest(path) -> list[CorruptionSpec]:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise ValueError("corruption manifest must be a JSON array")
    return [CorruptionSpec(e["kind"], int(e["severity"])) for e in entries]
