"""Synthetic two-modality phantom volumes.

Every volume is a random label phantom (background, a large organ, a small
organ) rendered under one of two intensity models with opposite class
contrast ordering.  Volumes are z-scored per volume and cut into axial
slices.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialize import read_tensor, write_tensor

CLASSES = (0, 1, 2)
CLASS_NAMES = {1: "large", 2: "small"}
DEFAULT_GRID = (16, 32, 32)


class PhantomError(RuntimeError):
    pass


@dataclass
class Phantom:
    labels: np.ndarray  # (D, H, W) uint8
    params: dict = field(default_factory=dict)

    def geometry_hash(self) -> str:
        return hashlib.sha1(self.labels.tobytes()).hexdigest()


def _smooth_field(rng: np.random.Generator, shape, n_waves: int = 2) -> np.ndarray:
    """Sum of random low-frequency sinusoids, scaled to [-1, 1]."""
    d, h, w = shape
    zz, yy, xx = np.meshgrid(np.arange(d) / d, np.arange(h) / h, np.arange(w) / w, indexing="ij")
    f = np.zeros(shape)
    for _ in range(n_waves):
        fz, fy, fx = rng.uniform(0.2, 1.0, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        f += np.sin(2 * np.pi * (fz * zz + fy * yy + fx * xx) + phase)
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _ellipsoid(coords, center, radii, angle) -> np.ndarray:
    zz, yy, xx = coords
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - center[1], xx - center[2]
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return ((zz - center[0]) / radii[0]) ** 2 + (u / radii[1]) ** 2 + (v / radii[2]) ** 2 <= 1.0


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for axis in range(3):
        out |= np.roll(mask, 1, axis=axis) | np.roll(mask, -1, axis=axis)
    return out


def generate_phantom(rng: np.random.Generator, grid=DEFAULT_GRID, divisor: int = 4,
                     max_attempts: int = 100) -> Phantom:
    """Two non-touching warped ellipsoids; the small one covers 1-5% of the grid."""
    d, h, w = grid
    if d < 8 or h != w or h % divisor:
        raise PhantomError(f"grid must have D >= 8 and H == W divisible by {divisor}, got {tuple(grid)}")
    idx = np.meshgrid(np.arange(d, dtype=float), np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    amp = np.array([0.6, 1.5, 1.5]) * (h / 32)
    coords = tuple(c + a * _smooth_field(rng, grid) for c, a in zip(idx, amp))
    total = d * h * w

    # fixed anatomical layout: large organ left of centre, small organ to its right
    for _ in range(max_attempts):
        c1 = (rng.uniform(0.4, 0.6) * d, rng.uniform(0.4, 0.6) * h, rng.uniform(0.28, 0.38) * w)
        r1 = (rng.uniform(0.25, 0.35) * d, rng.uniform(0.2, 0.28) * h, rng.uniform(0.18, 0.26) * w)
        a1 = rng.uniform(0, np.pi)
        r2 = (rng.uniform(0.18, 0.25) * d, rng.uniform(0.11, 0.16) * h, rng.uniform(0.11, 0.16) * w)
        c2 = (rng.uniform(0.35, 0.65) * d, rng.uniform(0.3, 0.7) * h, rng.uniform(0.7, 0.82) * w)
        a2 = rng.uniform(0, np.pi)
        large = _ellipsoid(coords, c1, r1, a1)
        small = _ellipsoid(coords, c2, r2, a2)
        frac = small.sum() / total
        if 0.01 <= frac <= 0.05 and not (small & _dilate(large)).any() and large.sum() > small.sum():
            labels = np.zeros(grid, dtype=np.uint8)
            labels[large] = 1
            labels[small] = 2
            return Phantom(labels, {"large_center": c1, "large_radii": r1, "large_angle": a1,
                                    "small_center": c2, "small_radii": r2, "small_angle": a2})
    raise PhantomError(f"could not place both organs in grid {tuple(grid)} after {max_attempts} attempts")


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class ModalityModel:
    name: str
    class_means: tuple  # background, large organ, small organ
    noise_std: float
    nonlinearity: str = "identity"  # identity | gamma | log
    bias_amplitude: float = 0.0
    intensity_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if len(set(self.class_means)) != len(self.class_means):
            raise ValueError(f"class means must be pairwise distinct, got {self.class_means}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.nonlinearity not in _NONLIN:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


_NONLIN = {
    "identity": lambda u: u,
    "gamma": lambda u: u ** 0.6,
    "log": lambda u: np.log1p(9 * u) / np.log(10),
}

# CT-like: bright organs, noisy, no inhomogeneity.
MODALITY_A = ModalityModel("A", class_means=(40.0, 180.0, 120.0), noise_std=18.0, nonlinearity="identity",
                           bias_amplitude=0.0, intensity_range=(-200.0, 400.0))
# MRI-like: dark organs on bright background, smooth multiplicative bias field.
MODALITY_B = ModalityModel("B", class_means=(700.0, 180.0, 420.0), noise_std=12.0, nonlinearity="gamma",
                           bias_amplitude=0.3, intensity_range=(0.0, 1000.0))
MODALITIES = {"A": MODALITY_A, "B": MODALITY_B}
DOMAIN_IDS = {"A": 0, "B": 1}


def render(phantom: Phantom, modality: ModalityModel, rng: np.random.Generator,
           noise: bool = True, bias: bool = True) -> np.ndarray:
    """``nonlinearity(class mean) * bias_field + noise``, clipped to the modality range."""
    lo, hi = modality.intensity_range
    u = (np.asarray(modality.class_means, dtype=float) - lo) / (hi - lo)
    levels = lo + (hi - lo) * _NONLIN[modality.nonlinearity](u)
    vol = levels[phantom.labels]
    if bias and modality.bias_amplitude > 0:
        vol = vol * (1.0 + modality.bias_amplitude * _smooth_field(rng, phantom.labels.shape))
    if noise and modality.noise_std > 0:
        vol = vol + rng.normal(0.0, modality.noise_std, size=vol.shape)
    return np.clip(vol, lo, hi).astype(np.float32)


def zscore_normalize(volume: np.ndarray) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    sd = v.std()
    if not sd > 0:
        raise ValueError("cannot z-score a constant volume")
    return ((v - v.mean()) / sd).astype(np.float32)


# ---------------------------------------------------------------------------
# slices and datasets


@dataclass
class SliceSample:
    image: np.ndarray  # (1, H, W) float32
    mask: np.ndarray  # (H, W) uint8
    volume_id: str
    slice_index: int
    modality: str


def slice_axial(volume: np.ndarray, labels: np.ndarray, volume_id: str = "", modality: str = "") -> list:
    if volume.shape != labels.shape:
        raise ValueError(f"volume {volume.shape} and labels {labels.shape} differ in shape")
    return [SliceSample(np.ascontiguousarray(volume[i][None]), np.ascontiguousarray(labels[i]), volume_id, i, modality)
            for i in range(volume.shape[0])]


def restack(slices) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`slice_axial` (slices may come in any order)."""
    ordered = sorted(slices, key=lambda s: s.slice_index)
    idx = [s.slice_index for s in ordered]
    if idx != list(range(len(idx))):
        missing = sorted(set(range(max(idx) + 1)) - set(idx)) if idx else [0]
        raise ValueError(f"volume {ordered[0].volume_id if ordered else '?'}: missing slice indices {missing}")
    return np.stack([s.image[0] for s in ordered]), np.stack([s.mask for s in ordered])


@dataclass
class Volume:
    volume_id: str
    modality: str
    image: np.ndarray  # z-scored (D, H, W)
    labels: np.ndarray  # (D, H, W) uint8
    seed: int
    split: str = "train"
    client: str = ""

    def slices(self) -> list:
        return slice_axial(self.image, self.labels, self.volume_id, self.modality)


@dataclass(frozen=True)
class ClientSpec:
    client_id: str
    modality: str
    n_volumes: int
    seed: int
    split: str = "train"


def make_volume(volume_id: str, modality: str, seed: int, index: int, grid=DEFAULT_GRID, split: str = "train",
                client: str = "") -> Volume:
    """Geometry and rendering use separate streams derived from (seed, index)."""
    phantom = generate_phantom(np.random.default_rng([seed, index, 0]), grid)
    raw = render(phantom, MODALITIES[modality], np.random.default_rng([seed, index, 1]))
    return Volume(volume_id, modality, zscore_normalize(raw), phantom.labels, seed, split, client)


def build_client_datasets(specs, grid=DEFAULT_GRID) -> dict:
    """client id -> list of :class:`Volume`, each client rendered in one modality."""
    out: dict = {}
    seeds: set = set()
    for spec in specs:
        if spec.client_id in out:
            raise ValueError(f"duplicate client id {spec.client_id!r}")
        if spec.seed in seeds:
            raise ValueError(f"client {spec.client_id!r} reuses seed {spec.seed}; seeds must be disjoint")
        if spec.modality not in MODALITIES:
            raise ValueError(f"unknown modality {spec.modality!r}")
        seeds.add(spec.seed)
        out[spec.client_id] = [
            make_volume(f"{spec.client_id}-{i:03d}", spec.modality, spec.seed, i, grid, spec.split, spec.client_id)
            for i in range(spec.n_volumes)
        ]
    return out


def dataset_slices(volumes) -> list:
    return [s for v in volumes for s in v.slices()]


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/<volume_id>.fgt (image tensor, label tensor) + manifest.txt

MANIFEST = "manifest.txt"


def write_dataset(directory, groups: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# volume_id modality split seed client"]
    for vols in groups.values():
        for v in vols:
            with open(directory / f"{v.volume_id}.fgt", "wb") as fh:
                write_tensor(fh, v.image)
                write_tensor(fh, v.labels.astype(np.float32))
            lines.append(f"{v.volume_id} {v.modality} {v.split} {v.seed} {v.client or '-'}")
    with open(directory / MANIFEST, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return directory / MANIFEST


def read_dataset(directory) -> dict:
    """group (client id, or ``split`` for client-less volumes) -> list of Volume."""
    directory = Path(directory)
    groups: dict = {}
    with open(directory / MANIFEST, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{directory / MANIFEST}:{lineno}: expected 5 fields, got {len(parts)}")
            vid, modality, split, seed, client = parts
            with open(directory / f"{vid}.fgt", "rb") as vf:
                image = read_tensor(vf)
                labels = read_tensor(vf).astype(np.uint8)
            client = "" if client == "-" else client
            vol = Volume(vid, modality, image, labels, int(seed), split, client)
            groups.setdefault(client or split, []).append(vol)
    return groups
