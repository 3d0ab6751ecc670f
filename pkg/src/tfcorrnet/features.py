"""Spatial correlation features with trainable per-frequency PHAT-beta weighting.

Spectrograms enter as complex arrays (..., M, T, F). Correlation features
come out as real tensors (..., M(M+1), T, F): real parts of the upper
triangular channel pairs followed by their imaginary parts.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Module, param
from .tensor import Tensor

INPUT_MODES = ("correlation", "mag+ipd", "raw")
PHAT_EPS = 1e-8


def channel_pairs(n_mics: int) -> list[tuple[int, int]]:
    return [(m, mm) for m in range(n_mics) for mm in range(m, n_mics)]


def feature_channels(n_mics: int, mode: str = "correlation") -> int:
    if mode == "correlation":
        return n_mics * (n_mics + 1)
    if mode == "mag+ipd":
        return 1 + 2 * (n_mics - 1)
    if mode == "raw":
        return 2 * n_mics
    raise ValueError(f"unknown input mode {mode!r}")


def normalize_waveform(x: np.ndarray, ref: int = 0) -> tuple[np.ndarray, float]:
    """Scale a (M, N) mixture to unit RMS on the reference mic; returns (scaled, scale)."""
    rms = float(np.sqrt(np.mean(np.asarray(x[ref], dtype=np.float64) ** 2)))
    scale = rms if rms > 0 else 1.0
    return (x / scale).astype(x.dtype, copy=False), scale


def pairwise_correlations(x: np.ndarray) -> np.ndarray:
    """Phi[p] = X_m conj(X_m') for the pairs m <= m' in lexicographic order.

    ``x`` is (..., M, T, F); the result is (..., M(M+1)/2, T, F).
    """
    n_mics = x.shape[-3]
    if n_mics < 1:
        raise ValueError("need at least one channel")
    first, second = zip(*channel_pairs(n_mics))
    return x[..., list(first), :, :] * np.conj(x[..., list(second), :, :])


class BetaParams(Module):
    """Free per-bin parameters b with beta = sigmoid(b), so 0 <= beta <= 1."""

    def __init__(self, n_bins: int, init: float = 0.5, dtype=np.float32):
        init = float(np.clip(init, 1e-6, 1 - 1e-6))
        self.b = param(np.full(n_bins, np.log(init / (1 - init)), dtype=dtype))

    def beta(self) -> Tensor:
        return T.sigmoid(self.b)


def phat_beta(phi: np.ndarray, beta, eps: float = PHAT_EPS, dtype=np.float32) -> tuple[Tensor, Tensor]:
    """Phi / max(|Phi|, eps) ** beta_f, returned as (real, imag) tensors.

    ``beta`` is a :class:`BetaParams`, a tensor of per-bin weights, or a
    constant (scalar or (F,) array). Gradients flow to the beta parameters.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(beta, BetaParams):
        beta = beta.beta()
    elif not isinstance(beta, Tensor):
        beta = Tensor(np.broadcast_to(np.asarray(beta, dtype=dtype), (phi.shape[-1],)).copy())
    beta = T.reshape(beta, (1,) * (phi.ndim - 1) + (phi.shape[-1],))
    log_mag = Tensor(np.log(np.maximum(np.abs(phi), eps)).astype(dtype))
    factor = T.exp(T.neg(T.mul(log_mag, beta)))
    re = T.mul(Tensor(phi.real.astype(dtype)), factor)
    im = T.mul(Tensor(phi.imag.astype(dtype)), factor)
    return re, im


def flatten_features(re: Tensor, im: Tensor) -> Tensor:
    """Stack real parts then imaginary parts along the pair axis (-3)."""
    return T.concat([re, im], axis=-3)


def unflatten_features(z: np.ndarray) -> np.ndarray:
    n = z.shape[-3] // 2
    return z[..., :n, :, :] + 1j * z[..., n:, :, :]


def alt_features(x: np.ndarray, mode: str, dtype=np.float32) -> Tensor:
    """Ablation inputs: 'mag+ipd' (|X_1|, cos/sin IPD to mic 1) or 'raw' (Re/Im of every mic)."""
    if mode == "raw":
        return Tensor(np.concatenate([x.real, x.imag], axis=-3).astype(dtype))
    if mode == "mag+ipd":
        ref = x[..., :1, :, :]
        ipd = np.angle(x[..., 1:, :, :] * np.conj(ref))
        feats = np.concatenate([np.abs(ref), np.cos(ipd), np.sin(ipd)], axis=-3)
        return Tensor(feats.astype(dtype))
    raise ValueError(f"unknown alternative input mode {mode!r}")


def input_features(x: np.ndarray, mode: str, beta=None, dtype=np.float32) -> Tensor:
    """Network input for spectrogram ``x`` (..., M, T, F) under ``mode``."""
    if mode == "correlation":
        re, im = phat_beta(pairwise_correlations(x), beta, dtype=dtype)
        return flatten_features(re, im)
    return alt_features(x, mode, dtype=dtype)
