import numpy as np
import pytest
from hypothesis import given, strategies as st

from tfcorrnet import tensor as T
from tfcorrnet.gradcheck import gradcheck
from tfcorrnet.stft import StftConfig, istft, istft_tensor, read_wav, sqrt_hann, stft, write_wav
from tfcorrnet.tensor import Tensor


def test_shapes():
    x = np.zeros((3, 1000), dtype=np.float32)
    s = stft(x, 128, 64)
    assert s.shape == (3, -(-1000 // 64) + 1, 65)
    assert s.dtype == np.complex64


def test_window_is_power_complementary_at_half_overlap():
    w = sqrt_hann(64)
    np.testing.assert_allclose(w[:32] ** 2 + w[32:] ** 2, 1.0, atol=1e-15)


@pytest.mark.parametrize("n_fft,hop", [(128, 64), (512, 256), (512, 128), (64, 16)])
def test_round_trip_f64(n_fft, hop, rng):
    x = rng.standard_normal((2, 3001))
    y = istft(stft(x, n_fft, hop), n_fft, hop, length=x.shape[-1])
    assert np.max(np.abs(x - y)) < 1e-12


@given(st.integers(1, 2000), st.integers(0, 2 ** 31 - 1))
def test_round_trip_any_length_f32(n, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, n).astype(np.float32)
    y = istft(stft(x, 128, 64), 128, 64, length=n)
    assert y.dtype == np.float32
    assert np.max(np.abs(x - y)) < 1e-6


def test_impulse_lands_in_every_bin():
    x = np.zeros(512)
    x[256] = 1.0
    s = stft(x, 128, 64)
    center = 256 // 64
    np.testing.assert_allclose(np.abs(s[center]), sqrt_hann(128)[64], atol=1e-12)


def test_errors():
    with pytest.raises(ValueError):
        StftConfig(100, 50)
    with pytest.raises(ValueError):
        StftConfig(128, 48)
    with pytest.raises(ValueError):
        istft(np.zeros((5, 33), complex), 128, 64)
    with pytest.raises(ValueError):
        istft(np.zeros((5, 65), complex), 128, 64, length=1000)


def test_istft_tensor_matches_numpy(rng):
    cfg = StftConfig(32, 8)
    s = stft(rng.standard_normal((2, 100)), 32, 8)
    out = istft_tensor(Tensor(s.real, dtype=np.float64), Tensor(s.imag, dtype=np.float64), cfg, 100).data
    np.testing.assert_allclose(out, istft(s, 32, 8, 100), atol=1e-12)


@pytest.mark.parametrize("hop", [8, 16])
def test_istft_tensor_gradient(hop, rng):
    cfg = StftConfig(32, hop)
    n = 50
    shape = (cfg.num_frames(n), cfg.n_bins)
    re = Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)
    im = Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)
    target = rng.standard_normal(n)
    fn = lambda: T.tsum(T.mul(istft_tensor(re, im, cfg, n), Tensor(target, dtype=np.float64)))
    assert gradcheck(fn, [re, im]) < 1e-5


@pytest.mark.parametrize("subtype,tol", [("float32", 0.0), ("pcm16", 1 / 32768)])
def test_wav_round_trip(tmp_path, subtype, tol, rng):
    x = rng.uniform(-0.9, 0.9, (3, 400)).astype(np.float32)
    write_wav(tmp_path / "a.wav", x, 8000, subtype)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 8000 and y.shape == x.shape
    assert np.max(np.abs(x - y)) <= tol
