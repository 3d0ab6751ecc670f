"""Multi-channel STFT analysis/synthesis and WAV I/O.

Spectrograms are complex numpy arrays shaped (..., T, F) with
F = n_fft // 2 + 1. Analysis and synthesis both use a periodic square-root
Hann window. Synthesis divides by the overlap-added squared window, which is
identically 1 for hop = n_fft / 2 and stays positive over the signal for any
hop dividing n_fft into at least two parts, so reconstruction is exact.
Signals are center-padded by n_fft // 2 zeros on the left.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from .tensor import Tensor, apply_op


def sqrt_hann(n_fft: int) -> np.ndarray:
    n = np.arange(n_fft)
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / n_fft))


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    hop: int = 256

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.hop <= 0 or self.n_fft % self.hop or self.n_fft // self.hop < 2:
            raise ValueError(f"hop must divide n_fft into >= 2 parts, got hop={self.hop}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return sqrt_hann(self.n_fft)

    def envelope(self, length: int) -> np.ndarray:
        """Overlap-added squared window over the ``length`` original samples."""
        n_frames = self.num_frames(length)
        w2 = np.broadcast_to(self.window ** 2, (n_frames, self.n_fft))
        left = self.n_fft // 2
        return _overlap_add(w2, self.hop)[left:left + length]

    def num_frames(self, length: int) -> int:
        return -(-length // self.hop) + 1

    def stft(self, x: np.ndarray) -> np.ndarray:
        return stft(x, self.n_fft, self.hop)

    def istft(self, spec: np.ndarray, length: int) -> np.ndarray:
        return istft(spec, self.n_fft, self.hop, length)


def _frame(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    length = x.shape[-1]
    n_frames = -(-length // hop) + 1
    total = (n_frames - 1) * hop + n_fft
    left = n_fft // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(left, total - left - length)]
    xp = np.pad(x, pad)
    return sliding_window_view(xp, n_fft, axis=-1)[..., ::hop, :]


def stft(x: np.ndarray, n_fft: int = 512, hop: int = 256) -> np.ndarray:
    """Complex STFT of ``x`` (..., N) -> (..., T, n_fft // 2 + 1)."""
    cfg = StftConfig(n_fft, hop)
    x = np.asarray(x)
    if x.shape[-1] == 0:
        raise ValueError("stft of an empty signal")
    out_dtype = np.complex64 if x.dtype == np.float32 else np.complex128
    frames = _frame(x.astype(np.float64, copy=False), n_fft, hop) * cfg.window
    return np.fft.rfft(frames, n=n_fft, axis=-1).astype(out_dtype, copy=False)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    *lead, n_frames, n_fft = frames.shape
    out = np.zeros(tuple(lead) + ((n_frames - 1) * hop + n_fft,), dtype=frames.dtype)
    for t in range(n_frames):
        out[..., t * hop:t * hop + n_fft] += frames[..., t, :]
    return out


def istft(spec: np.ndarray, n_fft: int = 512, hop: int = 256, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`stft`; returns (..., length) real samples."""
    cfg = StftConfig(n_fft, hop)
    if spec.shape[-1] != cfg.n_bins:
        raise ValueError(f"spectrogram has {spec.shape[-1]} bins, expected {cfg.n_bins} for n_fft={n_fft}")
    n_frames = spec.shape[-2]
    if length is None:
        length = (n_frames - 1) * hop
    if cfg.num_frames(length) != n_frames:
        raise ValueError(f"{n_frames} frames inconsistent with length {length}")
    out_dtype = np.float32 if spec.dtype == np.complex64 else np.float64
    frames = np.fft.irfft(spec.astype(np.complex128, copy=False), n=n_fft, axis=-1) * cfg.window
    left = n_fft // 2
    y = _overlap_add(frames, hop)[..., left:left + length] / cfg.envelope(length)
    return y.astype(out_dtype)


def istft_tensor(re: Tensor, im: Tensor, cfg: StftConfig, length: int) -> Tensor:
    """Differentiable :func:`istft` of a spectrogram held as real/imag tensors (..., T, F)."""
    if re.shape != im.shape:
        raise ValueError(f"re/im shapes differ: {re.shape} vs {im.shape}")
    dtype = re.dtype
    n_fft, hop = cfg.n_fft, cfg.hop
    n_frames = re.shape[-2]
    if cfg.num_frames(length) != n_frames or re.shape[-1] != cfg.n_bins:
        raise ValueError(f"spectrogram {re.shape} inconsistent with length {length} and n_fft {n_fft}")
    window = cfg.window.astype(dtype)
    inv_env = (1.0 / cfg.envelope(length)).astype(dtype)
    left = n_fft // 2
    spec = re.data + 1j * im.data
    frames = np.fft.irfft(spec, n=n_fft, axis=-1).astype(dtype, copy=False) * window
    out = _overlap_add(frames, hop)[..., left:left + length] * inv_env
    # adjoint of irfft: bins 1..n_fft/2-1 appear twice in the real signal
    weight = np.full(cfg.n_bins, 2.0 / n_fft)
    weight[0] = weight[-1] = 1.0 / n_fft

    def bw(g):
        total = (n_frames - 1) * hop + n_fft
        gp = np.zeros(g.shape[:-1] + (total,), dtype=dtype)
        gp[..., left:left + length] = g * inv_env
        gframes = sliding_window_view(gp, n_fft, axis=-1)[..., ::hop, :] * window
        spec_g = np.fft.rfft(gframes, n=n_fft, axis=-1) * weight
        return (spec_g.real.astype(dtype) if re.requires_grad else None,
                spec_g.imag.astype(dtype) if im.requires_grad else None)

    return apply_op(np.ascontiguousarray(out), (re, im), bw, "istft")


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def write_wav(path, samples: np.ndarray, sample_rate: int, subtype: str = "float32") -> None:
    """Write (M, N) or (N,) samples as interleaved little-endian PCM-16 or float32."""
    data = np.asarray(samples)
    if data.ndim == 2:
        data = data.T
    if subtype == "float32":
        data = data.astype("<f4")
    elif subtype == "pcm16":
        data = np.round(np.clip(data, -1.0, 32767 / 32768) * 32768).astype("<i2")
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(sample_rate), data)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return (samples (M, N) float, sample_rate); PCM-16 is scaled to [-1, 1)."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype.kind != "f":
        raise ValueError(f"unsupported WAV sample type {data.dtype}")
    data = data.T if data.ndim == 2 else data[None, :]
    return np.ascontiguousarray(data), int(sr)
