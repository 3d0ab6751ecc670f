"""TF-CorrNet: dual-path time/frequency + spectral transformer estimating separation filters.

Internal features are channels-last, (B, T, F, C). Sequence blocks take
(N, L, D) and every residual sub-unit ends in a zero-initialized projection,
so a freshly built block is the identity map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .features import BetaParams, feature_channels, input_features, INPUT_MODES
from .filters import apply_filters, stack_taps
from .layers import Conv2d, DepthwiseConv1d, LayerNorm, Linear, Module
from .tensor import Tensor

HEAD_MODES = ("MIMO", "MISO")
OUTPUT_MODES = ("filtering", "mapping")


@dataclass
class ModelConfig:
    n_mics: int = 2
    n_src: int = 2
    channels: int = 16
    proj_channels: int = 8
    proj_bins: int = 32
    stages: int = 2
    heads: int = 2
    dconv_kernel: int = 9
    downsample: int = 2
    taps_l: int = 1
    n_bins: int = 65
    head_mode: str = "MISO"
    input_mode: str = "correlation"
    output_mode: str = "filtering"
    efn_expansion: int = 3
    spectral: bool = True
    beta_init: float = 0.5
    fixed_beta: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_mics < 1 or self.n_src < 1:
            raise ValueError("need at least one microphone and one source")
        if self.spectral and not self.proj_channels < self.channels:
            raise ValueError(f"C' ({self.proj_channels}) must be < C ({self.channels})")
        if self.spectral and not self.proj_bins < self.n_bins:
            raise ValueError(f"F' ({self.proj_bins}) must be < F ({self.n_bins})")
        if self.dconv_kernel % 2 == 0:
            raise ValueError(f"dconv_kernel must be odd, got {self.dconv_kernel}")
        if self.downsample < 1:
            raise ValueError("downsample factor must be >= 1")
        if self.channels % self.heads or (self.spectral and self.proj_bins % self.heads):
            raise ValueError(f"heads ({self.heads}) must divide C and F'")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.taps_l < 0:
            raise ValueError("taps_l must be >= 0")

    @property
    def n_out(self) -> int:
        return self.n_mics if self.head_mode == "MIMO" else 1

    @property
    def n_taps(self) -> int:
        return (2 * self.taps_l + 1) * self.n_mics

    @property
    def in_channels(self) -> int:
        return feature_channels(self.n_mics, self.input_mode)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def full_size(cls, **overrides) -> "ModelConfig":
        """The full-size 7-channel, 16 kHz configuration."""
        base = dict(n_mics=7, n_src=2, channels=96, proj_channels=16, proj_bins=96, stages=4,
                    heads=4, dconv_kernel=65, downsample=4, taps_l=1, n_bins=257, head_mode="MISO")
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# sequence blocks, (N, L, D) -> (N, L, D)
# ---------------------------------------------------------------------------

class EFN(Module):
    """Efficient FFN: downsampled GLU feed-forward, upsampled and gated at full rate."""

    def __init__(self, dim: int, factor: int, expansion: int, rng, dtype):
        hidden = expansion * dim
        self.factor = factor
        self.norm = LayerNorm(dim, dtype)
        self.fc_in = Linear(dim, 2 * hidden, rng, dtype)
        self.fc_out = Linear(hidden, dim, rng, dtype, zero=True)
        self.gate = Linear(dim, dim, rng, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        u = self.norm(h)
        d = T.pool_avg(u, self.factor, axis=1)
        d = self.fc_out(T.glu(self.fc_in(d)))
        up = T.upsample_repeat(d, self.factor, axis=1, length=h.shape[1])
        return T.mul(up, T.sigmoid(self.gate(u)))


class EGA(Module):
    """Efficient global attention: multi-head self-attention on the downsampled sequence."""

    def __init__(self, dim: int, heads: int, factor: int, rng, dtype):
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide width ({dim})")
        self.heads = heads
        self.factor = factor
        self.norm = LayerNorm(dim, dtype)
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype, zero=True)
        self.gate = Linear(dim, dim, rng, dtype)

    def attend(self, d: Tensor) -> Tensor:
        n, length, dim = d.shape
        dh = dim // self.heads
        q, k, v = (T.transpose(T.reshape(part, (n, length, self.heads, dh)), (0, 2, 1, 3))
                   for part in T.split(self.qkv(d), 3, axis=-1))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        o = T.matmul(T.softmax_lastaxis(scores), v)
        return self.proj(T.reshape(T.transpose(o, (0, 2, 1, 3)), (n, length, dim)))

    def __call__(self, h: Tensor) -> Tensor:
        u = self.norm(h)
        d = self.attend(T.pool_avg(u, self.factor, axis=1))
        up = T.upsample_repeat(d, self.factor, axis=1, length=h.shape[1])
        return T.mul(up, T.sigmoid(self.gate(u)))


class CLA(Module):
    """Convolutional local attention: PConv -> GLU -> depthwise conv -> PConv."""

    def __init__(self, dim: int, kernel: int, rng, dtype):
        self.norm = LayerNorm(dim, dtype)
        self.pw_in = Linear(dim, 2 * dim, rng, dtype)
        self.dconv = DepthwiseConv1d(dim, kernel, rng, dtype)
        self.pw_out = Linear(dim, dim, rng, dtype, zero=True)

    def __call__(self, h: Tensor) -> Tensor:
        a = T.glu(self.pw_in(self.norm(h)))
        a = T.transpose(self.dconv(T.transpose(a, (0, 2, 1))), (0, 2, 1))
        return self.pw_out(a)


class GLBlock(Module):
    """Global transformer (EGA + EFN) followed by local transformer (CLA + EFN)."""

    def __init__(self, dim: int, cfg: ModelConfig, rng, dtype):
        f, e = cfg.downsample, cfg.efn_expansion
        self.ega = EGA(dim, cfg.heads, f, rng, dtype)
        self.efn_global = EFN(dim, f, e, rng, dtype)
        self.cla = CLA(dim, cfg.dconv_kernel, rng, dtype)
        self.efn_local = EFN(dim, f, e, rng, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        for unit in (self.ega, self.efn_global, self.cla, self.efn_local):
            h = T.add(h, unit(h))
        return h


# ---------------------------------------------------------------------------
# time-frequency modules, (B, T, F, C) -> (B, T, F, C)
# ---------------------------------------------------------------------------

class TemporalModule(Module):
    """F independent sequences of length T, shared weights."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.block = GLBlock(cfg.channels, cfg, rng, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        b, t, f, c = h.shape
        seq = T.reshape(T.transpose(h, (0, 2, 1, 3)), (b * f, t, c))
        seq = self.block(seq)
        return T.transpose(T.reshape(seq, (b, f, t, c)), (0, 2, 1, 3))


class FrequencyModule(Module):
    """T independent sequences of length F, shared weights."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.block = GLBlock(cfg.channels, cfg, rng, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        b, t, f, c = h.shape
        return T.reshape(self.block(T.reshape(h, (b * t, f, c))), (b, t, f, c))


class SpectralBranch(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.to_latent = Linear(cfg.n_bins, cfg.proj_bins, rng, dtype)
        self.block = GLBlock(cfg.proj_bins, cfg, rng, dtype)
        self.from_latent = Linear(cfg.proj_bins, cfg.n_bins, rng, dtype)

    def __call__(self, s: Tensor) -> Tensor:
        """``s`` is (B, C', T, F)."""
        b, cp, t, _ = s.shape
        z = self.to_latent(s)
        z = T.reshape(self.block(T.reshape(z, (b * cp, t, z.shape[-1]))), (b, cp, t, z.shape[-1]))
        return self.from_latent(z)


class SpectralModule(Module):
    """Two C'-channel spectral branches over a latent F' axis, summed and projected back to C."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        c, cp = cfg.channels, cfg.proj_channels
        self.to_branches = Linear(c, 2 * cp, rng, dtype)
        self.branches = [SpectralBranch(cfg, rng, dtype) for _ in range(2)]
        self.expand = Linear(cp, c, rng, dtype)
        self.out = Linear(c, c, rng, dtype, zero=True)

    def __call__(self, h: Tensor) -> Tensor:
        parts = T.split(self.to_branches(h), 2, axis=-1)
        total = None
        for branch, part in zip(self.branches, parts):
            y = branch(T.transpose(part, (0, 3, 1, 2)))
            total = y if total is None else T.add(total, y)
        s = T.transpose(total, (0, 2, 3, 1))
        return T.add(h, self.out(self.expand(s)))


class Stage(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.temporal = TemporalModule(cfg, rng, dtype)
        self.frequency = FrequencyModule(cfg, rng, dtype)
        self.spectral = SpectralModule(cfg, rng, dtype) if cfg.spectral else None

    def __call__(self, h: Tensor) -> Tensor:
        h = self.frequency(self.temporal(h))
        return self.spectral(h) if self.spectral is not None else h


class FilterHead(Module):
    """Per-source channel split, then a 3x3 conv shared across sources."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        c = cfg.channels
        per_out = cfg.n_taps if cfg.output_mode == "filtering" else 1
        self.split = Linear(c, cfg.n_src * c, rng, dtype)
        self.conv = Conv2d(c, 2 * cfg.n_out * per_out, rng, dtype=dtype)

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        b, t, f, c = h.shape
        s = T.reshape(self.split(h), (b, t, f, cfg.n_src, c))
        s = T.reshape(T.transpose(s, (0, 3, 4, 1, 2)), (b * cfg.n_src, c, t, f))
        o = self.conv(s)
        per_out = o.shape[1] // (2 * cfg.n_out)
        o = T.reshape(o, (b, cfg.n_src, 2, cfg.n_out, per_out, t, f))
        re, im = T.getitem(o, (slice(None), slice(None), 0)), T.getitem(o, (slice(None), slice(None), 1))
        if cfg.output_mode == "mapping":
            re, im = (T.reshape(p, (b, cfg.n_src, cfg.n_out, t, f)) for p in (re, im))
        return re, im


class TFCorrNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dtype = cfg.np_dtype
        use_beta = cfg.input_mode == "correlation" and cfg.fixed_beta is None
        self.beta = BetaParams(cfg.n_bins, cfg.beta_init, dtype) if use_beta else None
        self.encoder = Conv2d(cfg.in_channels, cfg.channels, rng, dtype=dtype)
        self.encoder_norm = LayerNorm(cfg.channels, dtype)
        self.stages = [Stage(cfg, rng, dtype) for _ in range(cfg.stages)]
        self.head = FilterHead(cfg, rng, dtype)

    def features(self, x: np.ndarray) -> Tensor:
        cfg = self.cfg
        beta = self.beta if self.beta is not None else cfg.fixed_beta
        return input_features(x, cfg.input_mode, beta, dtype=cfg.np_dtype)

    def encode(self, z: Tensor) -> Tensor:
        """(B, C_in, T, F) features -> (B, T, F, C)."""
        if z.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {z.shape[1]}")
        return self.encoder_norm(T.transpose(self.encoder(z), (0, 2, 3, 1)))

    def body(self, h: Tensor) -> Tensor:
        for stage in self.stages:
            h = stage(h)
        return h

    def head_output(self, x: np.ndarray) -> tuple[Tensor, Tensor]:
        """Raw head output for a complex batch (B, M, T, F): filters or direct estimates."""
        if x.ndim != 4 or x.shape[1] != self.cfg.n_mics or x.shape[-1] != self.cfg.n_bins:
            raise ValueError(f"expected (B, {self.cfg.n_mics}, T, {self.cfg.n_bins}) input, got {x.shape}")
        return self.head(self.body(self.encode(self.features(x))))

    def __call__(self, x: np.ndarray) -> tuple[Tensor, Tensor]:
        """Separated spectrogram estimates (re, im), each (B, K, M_out, T, F)."""
        re, im = self.head_output(x)
        if self.cfg.output_mode == "mapping":
            return re, im
        return apply_filters(re, im, stack_taps(x, self.cfg.taps_l))
