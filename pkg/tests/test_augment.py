import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgin.augment import (FourierMixConfig, GinConfig, GinSample, augment_batch, fourier_amplitude_mix,
                            gin_forward, gin_net_forward, low_frequency_window, sample_gin)
from fedgin.tensor import ShapeError


def _fro(x):
    return np.sqrt(np.sum(np.asarray(x, np.float64) ** 2, axis=(1, 2, 3)))


def _k1_sample(ws, bs, slopes, alpha=1.0):
    """Hand-built sample whose layers are all 1x1 convolutions."""
    weights = [np.asarray(w, np.float32).reshape(np.shape(w)[:2] + (1, 1)) for w in ws]
    biases = [np.asarray(b, np.float32) for b in bs]
    return GinSample(weights, biases, list(slopes), alpha, [1] * len(ws))


# --- config / sampler --------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(n_layers=1), dict(kernel_choices=(2,)), dict(slope_range=(0.0, 0.3)),
                                    dict(slope_range=(0.1, 1.0)), dict(alpha_range=(0.0, 1.5))])
def test_gin_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        GinConfig(**kwargs)


def test_sample_gin_reproducible():
    a = sample_gin(np.random.default_rng(42))
    b = sample_gin(np.random.default_rng(42))
    assert a.kernel_sizes == b.kernel_sizes and a.alpha == b.alpha and a.slopes == b.slopes
    assert all(np.array_equal(x, y) for x, y in zip(a.weights + a.biases, b.weights + b.biases))


def test_sample_gin_k1_only_gives_zero_padding():
    s = sample_gin(np.random.default_rng(0), GinConfig(kernel_choices=(1,)))
    assert s.kernel_sizes == [1, 1, 1, 1] and s.paddings == [0, 0, 0, 0]


def test_sample_gin_invariants(rng):
    cfg = GinConfig()
    for _ in range(200):
        s = sample_gin(rng, cfg)
        assert s.n_layers == cfg.n_layers == len(s.biases)
        assert s.weights[0].shape[1] == 1 and s.weights[-1].shape[0] == 1
        assert all(w.shape[0] == b.shape[0] for w, b in zip(s.weights, s.biases))
        assert s.paddings == [k // 2 for k in s.kernel_sizes]
        assert len(s.slopes) == cfg.n_layers - 1
        assert all(0.01 < b < 0.3 for b in s.slopes) and 0 <= s.alpha <= 1


def test_sample_gin_monte_carlo():
    rng = np.random.default_rng(7)
    draws = [sample_gin(rng) for _ in range(10_000)]
    alphas = np.array([d.alpha for d in draws])
    slopes = np.concatenate([d.slopes for d in draws])
    assert abs(alphas.mean() - 0.5) <= 0.02
    assert slopes.min() > 0.01 and slopes.max() < 0.3
    ks = np.concatenate([d.kernel_sizes for d in draws])
    assert abs((ks == 3).mean() - 0.5) < 0.02


# --- random network ----------------------------------------------------------

def test_gin_net_identity_chain(rng):
    s = _k1_sample([[[1.0]]] * 3, [[0.0]] * 3, [0.1, 0.2])
    x = rng.uniform(0.1, 2.0, (2, 1, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(gin_net_forward(x, s), x)


def test_gin_net_zero_in_zero_out(rng):
    s = sample_gin(rng)
    s.biases = [np.zeros_like(b) for b in s.biases]
    assert not gin_net_forward(np.zeros((1, 1, 6, 6), np.float32), s).any()


def test_gin_net_two_layer_closed_form():
    # layer 1: 1 -> 2 channels, leaky slope 0.2; layer 2: 2 -> 1, no activation
    w1, b1 = np.array([[[2.0]], [[-1.0]]]), np.array([0.5, 0.25])
    w2, b2 = np.array([[3.0, 4.0]]), np.array([-1.0])
    s = _k1_sample([w1, w2], [b1, b2], [0.2])
    pixels = np.array([-1.5, -0.2, 0.0, 0.3, 2.0])
    out = gin_net_forward(pixels.reshape(1, 1, 1, -1).astype(np.float32), s).ravel()

    def leaky(v):
        return v if v >= 0 else 0.2 * v

    for p, o in zip(pixels, out):
        h0, h1 = leaky(2.0 * p + 0.5), leaky(-1.0 * p + 0.25)
        assert o == pytest.approx(3.0 * h0 + 4.0 * h1 - 1.0, abs=1e-5)


def test_gin_net_rejects_multichannel(rng):
    with pytest.raises(ShapeError):
        gin_net_forward(np.zeros((1, 2, 4, 4), np.float32), sample_gin(rng))


def test_gin_net_preserves_shape(rng):
    for _ in range(10):
        x = rng.standard_normal((3, 1, 7, 9)).astype(np.float32)
        assert gin_net_forward(x, sample_gin(rng)).shape == x.shape


# --- GIN transform -----------------------------------------------------------

def test_gin_alpha_zero_is_identity(rng):
    x = rng.standard_normal((4, 1, 16, 16)).astype(np.float32)
    s = sample_gin(rng)
    s.alpha = 0.0
    assert np.max(np.abs(gin_forward(x, s) - x)) <= 1e-5


def test_gin_scale_invariance_oracle(rng):
    s = _k1_sample([[[3.7]]], [[0.0]], [], alpha=1.0)
    s.slopes = []
    x = rng.uniform(0.1, 1.0, (1, 1, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(gin_forward(x, s), x, rtol=1e-6)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), h=st.integers(2, 16), w=st.integers(2, 16), scale=st.floats(1e-3, 1e3))
def test_gin_energy_preserved(seed, h, w, scale):
    rng = np.random.default_rng(seed)
    x = (scale * rng.standard_normal((2, 1, h, w))).astype(np.float32)
    y = gin_forward(x, sample_gin(rng), rng=rng)
    assert y.shape == x.shape
    np.testing.assert_allclose(_fro(y), _fro(x), rtol=1e-4)


def test_gin_zero_image_unchanged(rng):
    x = np.zeros((1, 1, 8, 8), np.float32)
    assert np.array_equal(gin_forward(x, sample_gin(rng)), x)


def test_gin_degenerate_mix_falls_back():
    # alpha=1 with an all-zero network makes x_mix vanish; without an rng x comes back
    s = _k1_sample([[[0.0]], [[0.0]]], [[0.0], [0.0]], [0.1], alpha=1.0)
    x = np.ones((1, 1, 4, 4), np.float32)
    np.testing.assert_array_equal(gin_forward(x, s), x)
    y = gin_forward(x, s, rng=np.random.default_rng(3))
    np.testing.assert_allclose(_fro(y), _fro(x), rtol=1e-5)


def test_gin_k1_permutation_equivariant(rng):
    s = sample_gin(rng, GinConfig(kernel_choices=(1,)))
    x = rng.standard_normal((1, 1, 6, 6)).astype(np.float32)
    perm = rng.permutation(36)
    xp = x.reshape(1, 1, -1)[..., perm].reshape(x.shape)
    a = gin_forward(xp, s)
    b = gin_forward(x, s).reshape(1, 1, -1)[..., perm].reshape(x.shape)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


def test_gin_net_translation_equivariant_interior(rng):
    cfg = GinConfig(kernel_choices=(3,))
    for _ in range(5):
        s = sample_gin(rng, cfg)
        margin = sum(k // 2 for k in s.kernel_sizes)
        x = rng.standard_normal((1, 1, 20, 20)).astype(np.float32)
        shift = 3
        full = gin_net_forward(x, s)
        crop = gin_net_forward(np.ascontiguousarray(x[..., shift:, shift:]), s)
        a = full[..., shift + margin:20 - margin, shift + margin:20 - margin]
        b = crop[..., margin:20 - shift - margin, margin:20 - shift - margin]
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5 * np.abs(a).max())


def test_gin_outputs_vary(rng):
    x = rng.standard_normal((1, 1, 12, 12)).astype(np.float32)
    outs = [gin_forward(x, sample_gin(rng), rng=rng) for _ in range(100)]
    diffs = [np.mean(np.abs(outs[i] - outs[j])) for i in range(100) for j in range(i + 1, 100)]
    assert np.mean(diffs) > 0


# --- Fourier baseline --------------------------------------------------------

def _dft2(x):
    h, w = x.shape
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    f = fh @ x @ fw
    # exact zeros have phase 0, as with a zero-valued FFT bin
    return np.where(np.abs(f) < 1e-9, 0, f)


def _idft2(f):
    h, w = f.shape
    fh = np.exp(2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return fh @ f @ fw / (h * w)


def test_fourier_naive_dft_oracle():
    x = np.full((1, 4, 4), 2.0, np.float32)
    ref = np.zeros((1, 4, 4), np.float32)
    ref[0, 1, 2] = 5.0
    out = fourier_amplitude_mix(x, ref, FourierMixConfig(window_ratio=1.0, mix_strength=1.0))
    fx, fr = _dft2(x[0].astype(np.float64)), _dft2(ref[0].astype(np.float64))
    expected = np.real(_idft2(np.abs(fr) * np.exp(1j * np.angle(fx))))
    assert out.shape == x.shape and out.dtype == np.float32
    np.testing.assert_allclose(out[0], expected, atol=1e-5)


def test_fourier_partial_window_against_dft(rng):
    x = rng.standard_normal((1, 8, 8)).astype(np.float32)
    ref = rng.standard_normal((1, 8, 8)).astype(np.float32)
    lam = 0.6
    out = fourier_amplitude_mix(x, ref, FourierMixConfig(window_ratio=0.5, mix_strength=lam))
    fx, fr = _dft2(x[0].astype(np.float64)), _dft2(ref[0].astype(np.float64))
    amp, amp_r = np.fft.fftshift(np.abs(fx)), np.fft.fftshift(np.abs(fr))
    rows, cols = low_frequency_window(8, 8, 0.5)
    amp[rows, cols] = (1 - lam) * amp[rows, cols] + lam * amp_r[rows, cols]
    expected = np.real(_idft2(np.fft.ifftshift(amp) * np.exp(1j * np.angle(fx))))
    np.testing.assert_allclose(out[0], expected, atol=1e-4)


def test_low_frequency_window_centred():
    rows, cols = low_frequency_window(8, 8, 0.25)
    assert (rows.start, rows.stop, cols.start, cols.stop) == (3, 5, 3, 5)
    rows, cols = low_frequency_window(8, 8, 1.0)
    assert (rows.start, rows.stop) == (0, 8)
    rows, _ = low_frequency_window(4, 4, 0.01)
    assert rows.stop - rows.start == 1


def test_fourier_lambda_zero_and_self_reference(rng):
    x = rng.standard_normal((1, 16, 16)).astype(np.float32)
    ref = rng.standard_normal((1, 16, 16)).astype(np.float32)
    np.testing.assert_allclose(fourier_amplitude_mix(x, ref, FourierMixConfig(0.5, 0.0)), x, atol=1e-4)
    np.testing.assert_allclose(fourier_amplitude_mix(x, x, FourierMixConfig(0.5, 0.8)), x, atol=1e-4)


def test_fourier_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        fourier_amplitude_mix(np.zeros((1, 4, 4), np.float32), np.zeros((1, 4, 5), np.float32), FourierMixConfig())


@pytest.mark.parametrize("kwargs", [dict(window_ratio=0.0), dict(window_ratio=1.5), dict(mix_strength=-0.1)])
def test_fourier_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        FourierMixConfig(**kwargs)


# --- batch driver ------------------------------------------------------------

def test_augment_none_is_identity(rng):
    x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
    assert augment_batch(x, "none", rng) is x


def test_augment_gin_reproducible_and_norm_preserving():
    x = np.random.default_rng(0).standard_normal((4, 1, 8, 8)).astype(np.float32)
    a = augment_batch(x, "gin", np.random.default_rng(5))
    b = augment_batch(x, "gin", np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(_fro(a), _fro(x), rtol=1e-4)


def test_augment_gin_one_sample_per_batch():
    # the same image twice in one batch gets the same network and so the same output
    img = np.random.default_rng(1).standard_normal((1, 1, 8, 8)).astype(np.float32)
    out = augment_batch(np.concatenate([img, img]), "gin", np.random.default_rng(2))
    assert np.array_equal(out[0], out[1])


def test_augment_fourier_needs_pool(rng):
    x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
    with pytest.raises(ValueError):
        augment_batch(x, "fourier", rng, ref_pool=np.zeros((0, 1, 8, 8), np.float32))
    out = augment_batch(x, "fourier", rng, ref_pool=x)
    assert out.shape == x.shape and np.isfinite(out).all()


def test_augment_unknown_method(rng):
    with pytest.raises(ValueError):
        augment_batch(np.zeros((1, 1, 4, 4), np.float32), "mixup", rng)
