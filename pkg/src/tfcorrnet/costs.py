"""Analytic parameter and multiply-accumulate accounting.

MACs count linear layers, attention matmuls and convolutions, the same set
of ops instrumented by :func:`tfcorrnet.tensor.count_macs`. Applying the
estimated complex filters is listed separately (four real MACs per complex
product). Norms, gates and activations are not counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .features import feature_channels
from .model import ModelConfig


@dataclass
class Cost:
    params: int = 0
    macs: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.params + other.params, self.macs + other.macs)


def linear(n_in: int, n_out: int, positions: int, bias: bool = True) -> Cost:
    """A p x q linear layer costs p*q MACs per position."""
    return Cost(n_in * n_out + (n_out if bias else 0), positions * n_in * n_out)


def layernorm(dim: int) -> Cost:
    return Cost(2 * dim, 0)


def _pooled(length: int, factor: int) -> int:
    return math.ceil(length / factor)


def ega(n: int, length: int, dim: int, factor: int) -> Cost:
    ld = _pooled(length, factor)
    attn = Cost(0, 2 * n * ld * ld * dim)
    return (layernorm(dim) + linear(dim, 3 * dim, n * ld) + attn + linear(dim, dim, n * ld)
            + linear(dim, dim, n * length))


def efn(n: int, length: int, dim: int, factor: int, expansion: int) -> Cost:
    ld, hidden = _pooled(length, factor), expansion * dim
    return (layernorm(dim) + linear(dim, 2 * hidden, n * ld) + linear(hidden, dim, n * ld)
            + linear(dim, dim, n * length))


def cla(n: int, length: int, dim: int, kernel: int) -> Cost:
    dconv = Cost(dim * kernel + dim, n * length * dim * kernel)
    return layernorm(dim) + linear(dim, 2 * dim, n * length) + dconv + linear(dim, dim, n * length)


def gl_block(n: int, length: int, dim: int, cfg: ModelConfig) -> Cost:
    f, e = cfg.downsample, cfg.efn_expansion
    return (ega(n, length, dim, f) + efn(n, length, dim, f, e) + cla(n, length, dim, cfg.dconv_kernel)
            + efn(n, length, dim, f, e))


def conv3x3(c_in: int, c_out: int, positions: int) -> Cost:
    return Cost(c_in * c_out * 9 + c_out, positions * c_in * c_out * 9)


@dataclass
class CostReport:
    breakdown: dict[str, Cost] = field(default_factory=dict)
    n_frames: int = 0
    seconds: float = 1.0

    @property
    def params(self) -> int:
        return sum(c.params for c in self.breakdown.values())

    @property
    def network_macs(self) -> int:
        """MACs of the instrumented ops (everything except filter application)."""
        return sum(c.macs for k, c in self.breakdown.items() if k != "filter_apply")

    @property
    def macs(self) -> int:
        return sum(c.macs for c in self.breakdown.values())

    @property
    def macs_per_second(self) -> float:
        return self.macs / self.seconds

    def table(self) -> str:
        lines = [f"{'module':<24}{'params':>12}{'GMACs/s':>12}"]
        for name, c in self.breakdown.items():
            lines.append(f"{name:<24}{c.params:>12,}{c.macs / self.seconds / 1e9:>12.3f}")
        lines.append(f"{'total':<24}{self.params:>12,}{self.macs_per_second / 1e9:>12.3f}")
        return "\n".join(lines)


def count_costs(cfg: ModelConfig, n_frames: int | None = None, sample_rate: int = 16000, hop: int = 128,
                segment_seconds: float = 2.4, batch: int = 1) -> CostReport:
    """Parameters and MACs of ``cfg`` on a ``segment_seconds`` input (or ``n_frames`` frames).

    MACs are normalized per second of audio at ``sample_rate``/``hop``;
    attention is quadratic in length, so the segment length matters.
    """
    if n_frames is None:
        n_frames = math.ceil(segment_seconds * sample_rate / hop) + 1
    seconds = segment_seconds if segment_seconds else 1.0
    t, f, c, cp, fp, b = n_frames, cfg.n_bins, cfg.channels, cfg.proj_channels, cfg.proj_bins, batch
    tf = b * t * f
    rep = CostReport(n_frames=t, seconds=seconds)
    bd = rep.breakdown
    use_beta = cfg.input_mode == "correlation" and cfg.fixed_beta is None
    bd["phat_beta"] = Cost(f if use_beta else 0, 0)
    bd["encoder"] = conv3x3(feature_channels(cfg.n_mics, cfg.input_mode), c, tf) + layernorm(c)
    for r in range(cfg.stages):
        bd[f"stage{r}.temporal"] = gl_block(b * f, t, c, cfg)
        bd[f"stage{r}.frequency"] = gl_block(b * t, f, c, cfg)
        if cfg.spectral:
            branch = linear(f, fp, b * cp * t) + gl_block(b * cp, t, fp, cfg) + linear(fp, f, b * cp * t)
            bd[f"stage{r}.spectral"] = (linear(c, 2 * cp, tf) + branch + branch + linear(cp, c, tf)
                                        + linear(c, c, tf))
    per_out = cfg.n_taps if cfg.output_mode == "filtering" else 1
    bd["head"] = linear(c, cfg.n_src * c, tf) + conv3x3(c, 2 * cfg.n_out * per_out, cfg.n_src * tf)
    if cfg.output_mode == "filtering":
        bd["filter_apply"] = Cost(0, 4 * cfg.n_src * cfg.n_out * cfg.n_taps * tf)
    return rep
