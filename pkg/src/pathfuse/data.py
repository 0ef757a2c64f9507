"""Procedural multi-domain image benchmark with controllable domain shift.

Ten glyph classes are rendered analytically at 16x16 RGB with per-sample
jitter, then pushed through a per-domain transform (rotation, inversion,
noise, hue shift, blur). Everything is driven by a SplitMix64 stream so the
output depends only on (spec, class count) and is portable across platforms.

SplitMix64 test vectors (state advanced from seed 0):
    0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int):
    """Advance a SplitMix64 state; returns (new_state, 64-bit output)."""
    state = (state + _GOLDEN) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Rng:
    """Tiny deterministic PRNG built on SplitMix64."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def u64(self) -> int:
        self.state, out = splitmix64(self.state)
        return out

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # 53-bit mantissa, standard u64 -> [0,1) mapping
        return lo + (hi - lo) * ((self.u64() >> 11) * (1.0 / (1 << 53)))

    def normal(self) -> float:
        # Box-Muller; u1 kept away from 0
        u1 = max(self.uniform(), 1e-12)
        u2 = self.uniform()
        return float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2))

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)])

    def split(self, label: int) -> "Rng":
        """Derive an independent child stream, e.g. one per class."""
        _, mixed = splitmix64((self.state ^ (label * 0xA5A5A5A5A5A5A5A5)) & _MASK)
        return Rng(mixed)


@dataclass
class DomainSpec:
    """One synthetic domain: a transform plus sampling parameters."""

    transform: str = "identity"   # identity | rotate | invert | noise | hue | blur
    angle: float = 0.0            # degrees, rotate only, in [-45, 45]
    noise_sigma: float = 0.0      # noise only, in [0, 0.5]
    hue_shift: float = 0.0        # degrees, hue only
    blur_radius: int = 0          # blur only
    samples_per_class: int = 50
    seed: int = 0

    def validate(self):
        if self.transform not in ("identity", "rotate", "invert", "noise", "hue", "blur"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if not -45.0 <= self.angle <= 45.0:
            raise ValueError("rotation angle must lie in [-45, 45] degrees")
        if not 0.0 <= self.noise_sigma <= 0.5:
            raise ValueError("noise sigma must lie in [0, 0.5]")
        if self.samples_per_class < 1:
            raise ValueError("need at least one sample per class")

    def to_dict(self) -> dict:
        return {"transform": self.transform, "angle": self.angle,
                "noise_sigma": self.noise_sigma, "hue_shift": self.hue_shift,
                "blur_radius": self.blur_radius,
                "samples_per_class": self.samples_per_class, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "DomainSpec":
        return DomainSpec(**d)


@dataclass
class LabeledSet:
    """Images in [0,1] with integer labels; labels hidden from adaptation."""

    images: np.ndarray  # [N, 3, H, W] float32
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on N")

    def __len__(self):
        return self.images.shape[0]


SIZE = 16
_BG = 0.08

# Glyph masks on normalized coordinates u, v in [-1, 1]. Bar orientations at
# 0/45/90/135 degrees make the class boundary rotation-sensitive on purpose.


def _bar(u, v, theta_deg):
    t = np.deg2rad(theta_deg)
    a = u * np.cos(t) + v * np.sin(t)
    b = -u * np.sin(t) + v * np.cos(t)
    return (np.abs(b) < 0.26) & (np.abs(a) < 0.95)


_GLYPHS = [
    lambda u, v: _bar(u, v, 0),
    lambda u, v: _bar(u, v, 45),
    lambda u, v: _bar(u, v, 90),
    lambda u, v: _bar(u, v, 135),
    lambda u, v: _bar(u, v, 0) | _bar(u, v, 90),                      # plus
    lambda u, v: _bar(u, v, 45) | _bar(u, v, 135),                    # x
    lambda u, v: (np.maximum(np.abs(u), np.abs(v)) < 0.85)
                 & (np.maximum(np.abs(u), np.abs(v)) > 0.55),          # square ring
    lambda u, v: u * u + v * v < 0.25,                                 # disk
    lambda u, v: u * u + v * v < 0.06,                                 # small dot
    lambda u, v: ((u - 0.5) ** 2 + (v + 0.5) ** 2 < 0.07)
                 | ((u + 0.5) ** 2 + (v - 0.5) ** 2 < 0.07),           # dot pair
]

NUM_GLYPHS = len(_GLYPHS)


def _render_glyph(cls: int, tx: float, ty: float, scale: float) -> np.ndarray:
    """Rasterize one glyph with 2x supersampling; returns [H, W] in [0, 1]."""
    n = SIZE * 2
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    v, u = np.meshgrid(coords, coords, indexing="ij")
    mask = _GLYPHS[cls]((u - tx) / scale, (v - ty) / scale).astype(np.float64)
    return mask.reshape(SIZE, 2, SIZE, 2).mean(axis=(1, 3))


def _rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate around the image center with bilinear sampling."""
    c, h, w = img.shape
    t = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map
    sy = cy + (ys - cy) * np.cos(t) - (xs - cx) * np.sin(t)
    sx = cx + (ys - cy) * np.sin(t) + (xs - cx) * np.cos(t)
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 2)
    fy = np.clip(sy - y0, 0.0, 1.0)
    fx = np.clip(sx - x0, 0.0, 1.0)
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    out = np.empty_like(img)
    for ch in range(c):
        p = img[ch]
        val = (p[y0, x0] * (1 - fy) * (1 - fx) + p[y0 + 1, x0] * fy * (1 - fx)
               + p[y0, x0 + 1] * (1 - fy) * fx + p[y0 + 1, x0 + 1] * fy * fx)
        out[ch] = np.where(inside, val, _BG)
    return out


def _hue_rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate RGB around the gray axis (standard hue-rotation matrix)."""
    t = np.deg2rad(degrees)
    cos, sin = np.cos(t), np.sin(t)
    mat = np.array([
        [0.213 + cos * 0.787 - sin * 0.213, 0.715 - cos * 0.715 - sin * 0.715, 0.072 - cos * 0.072 + sin * 0.928],
        [0.213 - cos * 0.213 + sin * 0.143, 0.715 + cos * 0.285 + sin * 0.140, 0.072 - cos * 0.072 - sin * 0.283],
        [0.213 - cos * 0.213 - sin * 0.787, 0.715 - cos * 0.715 + sin * 0.715, 0.072 + cos * 0.928 + sin * 0.072],
    ])
    return np.einsum("ij,jhw->ihw", mat, img)


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius < 1:
        return img
    k = 2 * radius + 1
    pad = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(k):
        for dx in range(k):
            out += pad[:, dy:dy + img.shape[1], dx:dx + img.shape[2]]
    return out / (k * k)


def _apply_transform(img: np.ndarray, spec: DomainSpec, rng: Rng) -> np.ndarray:
    if spec.transform == "identity":
        return img
    if spec.transform == "rotate":
        return _rotate(img, spec.angle)
    if spec.transform == "invert":
        return 1.0 - img
    if spec.transform == "noise":
        noise = rng.normals(img.size).reshape(img.shape) * spec.noise_sigma
        return img + noise
    if spec.transform == "hue":
        return _hue_rotate(img, spec.hue_shift)
    if spec.transform == "blur":
        return _box_blur(img, spec.blur_radius)
    raise ValueError(f"unknown transform {spec.transform!r}")


def gen_domain(spec: DomainSpec, classes: int = 10) -> LabeledSet:
    """Render one domain. Bit-identical output for identical (spec, classes)."""
    spec.validate()
    if not 1 <= classes <= NUM_GLYPHS:
        raise ValueError(f"classes must lie in [1, {NUM_GLYPHS}]")
    images, labels = [], []
    root = Rng(spec.seed)
    for cls in range(classes):
        rng = root.split(cls + 1)
        for _ in range(spec.samples_per_class):
            tx = rng.uniform(-2.0, 2.0) / (SIZE / 2)   # +-2 px translate
            ty = rng.uniform(-2.0, 2.0) / (SIZE / 2)
            scale = rng.uniform(0.9, 1.1)
            mask = _render_glyph(cls, tx, ty, scale)
            brightness = rng.uniform(0.95, 1.0)
            fg = brightness * (1.0 + 0.05 * np.array([rng.normal() for _ in range(3)]))
            img = _BG + mask[None, :, :] * (fg[:, None, None] - _BG)
            img = _apply_transform(img, spec, rng)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    return LabeledSet(images=np.asarray(images, dtype=np.float32),
                      labels=np.asarray(labels, dtype=np.int64))


def split(dataset: LabeledSet, fractions=(0.5, 0.5), seed: int = 0):
    """Label-stratified deterministic split into (first, second)."""
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be two values summing to 1")
    idx_a, idx_b = [], []
    rng = Rng(seed)
    for cls in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == cls)
        keys = np.array([rng.u64() for _ in idx], dtype=np.uint64)
        order = np.argsort(keys, kind="stable")
        idx = idx[order]
        n_a = int(round(fractions[0] * len(idx)))
        idx_a.extend(idx[:n_a])
        idx_b.extend(idx[n_a:])
    if not idx_a or not idx_b:
        raise ValueError("split produced an empty side")
    idx_a, idx_b = np.sort(idx_a), np.sort(idx_b)
    return (LabeledSet(dataset.images[idx_a], dataset.labels[idx_a]),
            LabeledSet(dataset.images[idx_b], dataset.labels[idx_b]))


def default_benchmark(samples_per_class: int = 700, seed: int = 7):
    """The 4-domain default: identity, rotate(25), invert, noise(0.2)."""
    specs = [
        DomainSpec("identity", samples_per_class=samples_per_class, seed=seed + 11),
        DomainSpec("rotate", angle=25.0, samples_per_class=samples_per_class, seed=seed + 23),
        DomainSpec("invert", samples_per_class=samples_per_class, seed=seed + 37),
        DomainSpec("noise", noise_sigma=0.2, samples_per_class=samples_per_class, seed=seed + 51),
    ]
    return specs


def parse_domain_spec(text: str, samples_per_class: int, seed: int) -> DomainSpec:
    """Parse CLI shorthand like 'identity', 'rotate:25', 'noise:0.2', 'blur:1'."""
    name, _, arg = text.partition(":")
    spec = DomainSpec(transform=name, samples_per_class=samples_per_class, seed=seed)
    if name == "rotate":
        spec.angle = float(arg or 0.0)
    elif name == "noise":
        spec.noise_sigma = float(arg or 0.0)
    elif name == "hue":
        spec.hue_shift = float(arg or 0.0)
    elif name == "blur":
        spec.blur_radius = int(arg or 0)
    spec.validate()
    return spec
