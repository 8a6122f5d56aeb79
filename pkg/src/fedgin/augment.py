"""On-the-fly intensity augmentation.

``gin``: a shallow random conv net (fresh weights every call) blended with
the input and rescaled so each image keeps its Frobenius norm.

``fourier``: low-frequency amplitude mixing against another image of the
same client, keeping the source phase.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, conv2d_forward

METHODS = ("none", "gin", "fourier")


@dataclass(frozen=True)
class GinConfig:
    n_layers: int = 4
    kernel_choices: tuple = (1, 3)
    hidden_channels: int = 2
    slope_range: tuple = (0.01, 0.3)
    alpha_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError(f"GIN needs at least 2 layers, got {self.n_layers}")
        if not self.kernel_choices or any(k < 1 or k % 2 == 0 for k in self.kernel_choices):
            raise ValueError(f"kernel sizes must be odd and positive, got {self.kernel_choices}")
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be >= 1")
        lo, hi = self.slope_range
        if not 0 < lo < hi < 1:
            raise ValueError(f"slope_range must lie inside (0, 1), got {self.slope_range}")
        lo, hi = self.alpha_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"alpha_range must lie inside [0, 1], got {self.alpha_range}")


@dataclass
class GinSample:
    """One draw of the random intensity network.

    ``slopes`` has one entry per activated layer (all but the last).
    """

    weights: list
    biases: list
    slopes: list
    alpha: float
    kernel_sizes: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def paddings(self) -> list:
        return [k // 2 for k in self.kernel_sizes]


def sample_gin(rng: np.random.Generator, config: GinConfig = GinConfig()) -> GinSample:
    weights, biases, ks, slopes = [], [], [], []
    last = config.n_layers - 1
    for layer in range(config.n_layers):
        k = int(config.kernel_choices[rng.integers(len(config.kernel_choices))])
        cin = 1 if layer == 0 else config.hidden_channels
        cout = 1 if layer == last else config.hidden_channels
        weights.append(rng.standard_normal((cout, cin, k, k)).astype(np.float32))
        biases.append(rng.standard_normal(cout).astype(np.float32))
        ks.append(k)
        if layer != last:
            slopes.append(float(rng.uniform(*config.slope_range)))
    alpha = float(rng.uniform(*config.alpha_range))
    return GinSample(weights=weights, biases=biases, slopes=slopes, alpha=alpha, kernel_sizes=ks)


def gin_net_forward(x: np.ndarray, sample: GinSample) -> np.ndarray:
    """Apply the random network to a single-channel batch (N, 1, H, W)."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError("gin_net_forward expects a single-channel batch [N,1,H,W]", x.shape)
    z = x
    last = sample.n_layers - 1
    for layer, (w, b, k) in enumerate(zip(sample.weights, sample.biases, sample.kernel_sizes)):
        z = conv2d_forward(z, w, b, stride=1, padding=k // 2)
        if layer != last:
            s = np.float32(sample.slopes[layer])
            z = np.where(z < 0, z * s, z)
    return z


def _norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.square(x, dtype=np.float64), axis=(1, 2, 3)))


def gin_forward(x: np.ndarray, sample: GinSample, rng: np.random.Generator | None = None,
                config: GinConfig | None = None) -> np.ndarray:
    """Blend the random-network output with ``x`` and restore each image's norm.

    Zero-norm images are returned unchanged.  If the blend of a non-zero image
    vanishes, the network is redrawn once (needs ``rng``); failing that the
    image is returned unchanged.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError("gin_forward expects a single-channel batch [N,1,H,W]", x.shape)
    a = np.float32(sample.alpha)
    mix = a * gin_net_forward(x, sample) + (np.float32(1.0) - a) * x
    x_norm = _norms(x)
    mix_norm = _norms(mix)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        if x_norm[i] == 0:
            out[i] = x[i]
            continue
        m, mn = mix[i], mix_norm[i]
        if mn == 0 or not np.isfinite(mn):
            m, mn = _retry_one(x[i:i + 1], rng, config)
            if m is None:
                out[i] = x[i]
                continue
        out[i] = (m * (x_norm[i] / mn)).astype(np.float32)
    return out


def _retry_one(xi, rng, config):
    if rng is None:
        return None, 0.0
    s = sample_gin(rng, config or GinConfig())
    a = np.float32(s.alpha)
    m = a * gin_net_forward(xi, s) + (np.float32(1.0) - a) * xi
    n = _norms(m)[0]
    if n == 0 or not np.isfinite(n):
        return None, 0.0
    return m[0], n


# ---------------------------------------------------------------------------
# frequency-domain baseline


@dataclass(frozen=True)
class FourierMixConfig:
    window_ratio: float = 0.25
    mix_strength: float = 1.0

    def __post_init__(self):
        if not 0 < self.window_ratio <= 1:
            raise ValueError(f"window_ratio must lie in (0, 1], got {self.window_ratio}")
        if not 0 <= self.mix_strength <= 1:
            raise ValueError(f"mix_strength must lie in [0, 1], got {self.mix_strength}")


def low_frequency_window(h: int, w: int, ratio: float) -> tuple[slice, slice]:
    """Centered window (in fftshift-ed coordinates) with side ``ratio * min(h, w)``."""
    side = max(1, int(round(ratio * min(h, w))))
    r0 = h // 2 - side // 2
    c0 = w // 2 - side // 2
    return slice(max(r0, 0), min(r0 + side, h)), slice(max(c0, 0), min(c0 + side, w))


def fourier_amplitude_mix(x: np.ndarray, ref: np.ndarray, config: FourierMixConfig) -> np.ndarray:
    """Mix low-frequency DFT amplitude of ``x`` toward ``ref``; phase of ``x`` kept.

    Uses ``config.mix_strength`` as the mixing weight.
    """
    x = np.asarray(x, dtype=np.float32)
    ref = np.asarray(ref, dtype=np.float32)
    if x.shape != ref.shape:
        raise ShapeError("fourier_amplitude_mix: image and reference shapes differ", x.shape, ref.shape)
    h, w = x.shape[-2:]
    fx = np.fft.fftshift(np.fft.fft2(x.astype(np.float64)), axes=(-2, -1))
    fr = np.fft.fftshift(np.fft.fft2(ref.astype(np.float64)), axes=(-2, -1))
    amp, phase = np.abs(fx), np.angle(fx)
    rows, cols = low_frequency_window(h, w, config.window_ratio)
    lam = config.mix_strength
    amp[..., rows, cols] = (1 - lam) * amp[..., rows, cols] + lam * np.abs(fr[..., rows, cols])
    spec = np.fft.ifftshift(amp * np.exp(1j * phase), axes=(-2, -1))
    return np.real(np.fft.ifft2(spec)).astype(np.float32)


# ---------------------------------------------------------------------------


def augment_batch(images: np.ndarray, method: str, rng: np.random.Generator, gin_config: GinConfig | None = None,
                  fourier_config: FourierMixConfig | None = None, ref_pool: np.ndarray | None = None) -> np.ndarray:
    """Augment a batch of images (N, 1, H, W); masks are never touched.

    ``gin`` draws one network for the whole batch.  ``fourier`` draws, per
    image, a reference from ``ref_pool`` (same client's images) and a mixing
    weight uniformly in ``[0, mix_strength]``.
    """
    if method == "none":
        return images
    if method == "gin":
        cfg = gin_config or GinConfig()
        return gin_forward(images, sample_gin(rng, cfg), rng=rng, config=cfg)
    if method == "fourier":
        if ref_pool is None or len(ref_pool) == 0:
            raise ValueError("fourier augmentation needs a non-empty reference pool")
        cfg = fourier_config or FourierMixConfig()
        out = np.empty_like(images, dtype=np.float32)
        for i in range(images.shape[0]):
            ref = ref_pool[int(rng.integers(len(ref_pool)))]
            lam = float(rng.uniform(0.0, cfg.mix_strength))
            out[i] = fourier_amplitude_mix(images[i], ref, FourierMixConfig(cfg.window_ratio, lam))
        return out
    raise ValueError(f"unknown augmentation method {method!r}; expected one of {METHODS}")
