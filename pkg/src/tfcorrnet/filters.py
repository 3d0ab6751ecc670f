"""Multi-tap complex filtering of the mixture spectrogram.

For each source k and bin (t, f) the output is y = W x~ where x~ stacks the
mixture frames t-L..t+L of all microphones (frame offset major, microphone
minor) and W is (M_out, (2L+1)M). Complex products are expanded into real
ones so the filters stay differentiable in the real autodiff core.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def stack_taps(x: np.ndarray, taps_l: int) -> np.ndarray:
    """(..., M, T, F) -> (..., (2L+1)M, T, F), zero outside the valid frames."""
    if taps_l < 0:
        raise ValueError(f"L must be >= 0, got {taps_l}")
    n_frames = x.shape[-2]
    blocks = []
    for offset in range(-taps_l, taps_l + 1):
        shifted = np.zeros_like(x)
        lo, hi = max(0, -offset), min(n_frames, n_frames - offset)
        if hi > lo:
            shifted[..., lo:hi, :] = x[..., lo + offset:hi + offset, :]
        blocks.append(shifted)
    return np.concatenate(blocks, axis=-3)


def _as_pair(x, dtype) -> tuple[Tensor, Tensor]:
    if isinstance(x, tuple):
        return x
    return Tensor(np.ascontiguousarray(x.real, dtype=dtype)), Tensor(np.ascontiguousarray(x.imag, dtype=dtype))


def apply_filters(w_re: Tensor, w_im: Tensor, x_stacked) -> tuple[Tensor, Tensor]:
    """Apply filters (..., K, M_out, P, T, F) to the stacked mixture (..., P, T, F).

    ``x_stacked`` is a complex array or a (real, imag) tensor pair. Returns
    (real, imag) tensors shaped (..., K, M_out, T, F).
    """
    if w_re.shape != w_im.shape:
        raise ValueError(f"filter re/im shapes differ: {w_re.shape} vs {w_im.shape}")
    x_re, x_im = _as_pair(x_stacked, w_re.dtype)
    if w_re.shape[-3:] != x_re.shape[-3:] or w_re.shape[:-5] != x_re.shape[:-3]:
        raise ValueError(f"filters {w_re.shape} do not match stacked mixture {x_re.shape}")
    lead = x_re.shape[:-3]
    x_re = T.reshape(x_re, lead + (1, 1) + x_re.shape[-3:])
    x_im = T.reshape(x_im, lead + (1, 1) + x_im.shape[-3:])
    y_re = T.tsum(T.sub(T.mul(w_re, x_re), T.mul(w_im, x_im)), axis=-3)
    y_im = T.tsum(T.add(T.mul(w_re, x_im), T.mul(w_im, x_re)), axis=-3)
    return y_re, y_im


def selector_filters(n_src: int, n_out: int, n_mics: int, taps_l: int, n_frames: int, n_bins: int,
                     ref: int = 0, dtype=np.float64) -> tuple[Tensor, Tensor]:
    """Filters picking the center tap of mic ``ref`` (MISO) or of mic m for output m (MIMO)."""
    n_taps = (2 * taps_l + 1) * n_mics
    w = np.zeros((n_src, n_out, n_taps, n_frames, n_bins), dtype=dtype)
    for o in range(n_out):
        mic = ref if n_out == 1 else o
        w[:, o, taps_l * n_mics + mic] = 1.0
    return Tensor(w), Tensor(np.zeros_like(w))
