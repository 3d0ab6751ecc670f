"""SDR, SI-SDR and best-permutation metric reports."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

SDR_CAP = 60.0


def _check(est: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference signal is all zeros")
    return est, ref


def _ratio_db(num: float, den: float) -> float:
    if den <= num * 10 ** (-SDR_CAP / 10):
        return SDR_CAP
    return float(min(SDR_CAP, 10 * np.log10(num / den)))


def sdr(est, ref) -> float:
    """Plain energy-ratio SDR in dB, capped at +60."""
    est, ref = _check(est, ref)
    return _ratio_db(np.sum(ref ** 2), np.sum((ref - est) ** 2))


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR: ``ref`` is first scaled to the projection of ``est``."""
    est, ref = _check(est, ref)
    target = (np.sum(est * ref) / np.sum(ref ** 2)) * ref
    return _ratio_db(np.sum(target ** 2), np.sum((est - target) ** 2))


@dataclass
class ExampleMetrics:
    id: str
    permutation: list[int]
    sdr: list[float]
    si_sdr: list[float]
    sdr_mixture: list[float]
    sdri: list[float]

    @property
    def mean_sdri(self) -> float:
        return float(np.mean(self.sdri))


def example_metrics(estimates: np.ndarray, targets: np.ndarray, mixture: np.ndarray,
                    example_id: str = "") -> ExampleMetrics:
    """Metrics for (K, N) estimates against (K, N) targets under the SDR-maximizing permutation.

    ``permutation[k]`` is the estimate index assigned to target ``k``.
    """
    k = targets.shape[0]
    if estimates.shape[0] != k:
        raise ValueError(f"{estimates.shape[0]} estimates for {k} targets")
    pair = np.array([[sdr(estimates[j], targets[i]) for j in range(k)] for i in range(k)])
    perm = max(itertools.permutations(range(k)), key=lambda p: sum(pair[i, p[i]] for i in range(k)))
    s = [float(pair[i, perm[i]]) for i in range(k)]
    s_mix = [sdr(mixture, targets[i]) for i in range(k)]
    return ExampleMetrics(
        id=example_id,
        permutation=list(perm),
        sdr=s,
        si_sdr=[si_sdr(estimates[perm[i]], targets[i]) for i in range(k)],
        sdr_mixture=s_mix,
        sdri=[a - b for a, b in zip(s, s_mix)],
    )


@dataclass
class MetricReport:
    examples: list[ExampleMetrics] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        if not self.examples:
            return {"n": 0}
        cat = lambda attr: np.concatenate([getattr(e, attr) for e in self.examples])
        return {
            "n": len(self.examples),
            "sdr": float(np.mean(cat("sdr"))),
            "si_sdr": float(np.mean(cat("si_sdr"))),
            "sdr_mixture": float(np.mean(cat("sdr_mixture"))),
            "sdri": float(np.mean(cat("sdri"))),
            "sdri_median": float(np.median(cat("sdri"))),
        }

    def to_dict(self) -> dict:
        return {"aggregate": self.aggregate(), "examples": [asdict(e) for e in self.examples]}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)
