"""Separation inference: single pass, chunk-wise continuous mode, MWF beamforming and the second stage.

Chunk windows are history + current + future blocks; each window's current
block is emitted with a hard cut and the overlap with the previous window is
used only to align source order.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .features import normalize_waveform
from .model import ModelConfig, TFCorrNet
from .stft import StftConfig
from .training import Batch, crop_bounds, prepare_example

MAX_STITCH_SOURCES = 3


def separate_spec(model: TFCorrNet, x: np.ndarray) -> np.ndarray:
    """Complex estimates (K, M_out, T, F) for one complex (M, T, F) spectrogram."""
    with T.no_grad():
        re, im = model(x[None].astype(np.complex64 if model.cfg.dtype == "float32" else np.complex128))
    return re.data[0] + 1j * im.data[0]


def separate(model: TFCorrNet, mixture: np.ndarray, stft_cfg: StftConfig) -> np.ndarray:
    """Waveform estimates (K, M_out, N) for a (M, N) mixture, in the mixture's scale."""
    mix, scale = normalize_waveform(np.asarray(mixture, dtype=np.float64))
    dtype = model.cfg.np_dtype
    y = separate_spec(model, stft_cfg.stft(mix.astype(dtype)))
    return stft_cfg.istft(y, length=mixture.shape[-1]) * scale


# ---------------------------------------------------------------------------
# chunk planning and stitching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChunkSchedule:
    history: float = 1.2
    current: float = 0.8
    future: float = 0.4
    sample_rate: int = 8000
    hop: int = 64

    def _samples(self, seconds: float) -> int:
        return int(round(seconds * self.sample_rate / self.hop)) * self.hop

    @property
    def history_samples(self) -> int:
        return self._samples(self.history)

    @property
    def current_samples(self) -> int:
        return self._samples(self.current)

    @property
    def future_samples(self) -> int:
        return self._samples(self.future)

    @property
    def window_samples(self) -> int:
        return self.history_samples + self.current_samples + self.future_samples


@dataclass(frozen=True)
class ChunkSpan:
    index: int
    start: int      # window start in signal samples; may be negative (zero padded)
    stop: int       # window stop, may exceed the signal length
    cur_start: int  # emitted block, clipped to the signal
    cur_stop: int


def plan_chunks(total_len: int, schedule: ChunkSchedule) -> list[ChunkSpan]:
    if total_len <= 0:
        raise ValueError("input must contain at least one sample")
    b, bh, win = schedule.current_samples, schedule.history_samples, schedule.window_samples
    spans = []
    for i in range(math.ceil(total_len / b)):
        start = i * b - bh
        spans.append(ChunkSpan(i, start, start + win, i * b, min((i + 1) * b, total_len)))
    return spans


def window_signal(x: np.ndarray, span: ChunkSpan) -> np.ndarray:
    """Samples [span.start, span.stop) of ``x`` (..., N) with zeros outside the signal."""
    n = x.shape[-1]
    out = np.zeros(x.shape[:-1] + (span.stop - span.start,), dtype=x.dtype)
    a, b = max(span.start, 0), min(span.stop, n)
    if b > a:
        out[..., a - span.start:b - span.start] = x[..., a:b]
    return out


def stitch(prev_mag: np.ndarray, new_mag: np.ndarray) -> tuple[int, ...]:
    """Permutation ``p`` with new source ``p[j]`` continuing previous source ``j``.

    Both inputs are (K, T_overlap, F) magnitudes over the shared frames; the
    summed L1 distance is minimized exhaustively.
    """
    k = prev_mag.shape[0]
    if new_mag.shape != prev_mag.shape:
        raise ValueError(f"overlap shapes differ: {prev_mag.shape} vs {new_mag.shape}")
    if k > MAX_STITCH_SOURCES:
        raise ValueError(f"stitching supports at most {MAX_STITCH_SOURCES} sources")
    cost = np.array([[np.abs(prev_mag[j] - new_mag[i]).sum() for i in range(k)] for j in range(k)])
    return min(itertools.permutations(range(k)), key=lambda p: sum(cost[j, p[j]] for j in range(k)))


@dataclass
class StreamState:
    """Running assignment of chunk-local sources to global streams."""
    n_src: int
    mapping: tuple[int, ...] | None = None  # mapping[local] = global stream
    prev_mag: np.ndarray | None = None      # (K, T, F) previous window, global order
    prev_span: ChunkSpan | None = None
    mappings: list[tuple[int, ...]] = field(default_factory=list)

    def update(self, span: ChunkSpan, mag: np.ndarray, hop: int) -> tuple[int, ...]:
        """Align a new window's (K, T, F) magnitudes; returns and stores the local->global mapping."""
        if self.prev_mag is None:
            mapping = tuple(range(self.n_src))
        else:
            shift = (span.start - self.prev_span.start) // hop
            n = min(self.prev_mag.shape[1] - shift, mag.shape[1])
            if n <= 0:
                raise ValueError("consecutive windows do not overlap")
            p = stitch(self.prev_mag[:, shift:shift + n], mag[:, :n])
            # global stream g continues in new local p[g]
            mapping = tuple(int(np.argsort(p)[i]) for i in range(self.n_src))
        order = np.argsort(mapping)  # global g <- local order[g]
        self.prev_mag = mag[order]
        self.prev_span = span
        self.mapping = mapping
        self.mappings.append(mapping)
        return mapping


def stitch_windows(spans: list[ChunkSpan], window_outputs: list[np.ndarray], window_mags: list[np.ndarray],
                   hop: int, total_len: int) -> tuple[np.ndarray, StreamState]:
    """Fold per-window (K, ..., N_win) outputs into (K, ..., total_len) streams.

    ``window_mags[i]`` is the (K, T, F) magnitude used for alignment.
    """
    k = window_outputs[0].shape[0]
    state = StreamState(k)
    streams = np.zeros(window_outputs[0].shape[:-1] + (total_len,))
    for span, out, mag in zip(spans, window_outputs, window_mags):
        mapping = state.update(span, mag, hop)
        a, b = span.cur_start - span.start, span.cur_stop - span.start
        for local, g in enumerate(mapping):
            streams[g, ..., span.cur_start:span.cur_stop] = out[local, ..., a:b]
    return streams, state


def separate_css(model: TFCorrNet, mixture: np.ndarray, stft_cfg: StftConfig, schedule: ChunkSchedule,
                 log_path=None) -> tuple[np.ndarray, list[dict]]:
    """Continuous separation of a long (M, N) mixture into (K, M_out, N) streams."""
    if schedule.hop != stft_cfg.hop:
        raise ValueError("chunk schedule and STFT must share a hop")
    n = mixture.shape[-1]
    spans = plan_chunks(n, schedule)
    outputs, mags, seconds = [], [], []
    for span in spans:
        t0 = time.perf_counter()
        win = window_signal(np.asarray(mixture, dtype=np.float64), span)
        mix, scale = normalize_waveform(win) if np.any(win[0]) else (win, 1.0)
        y = separate_spec(model, stft_cfg.stft(mix.astype(model.cfg.np_dtype)))
        outputs.append(stft_cfg.istft(y, length=win.shape[-1]) * scale)
        mags.append(np.abs(y[:, 0]) * scale)
        seconds.append(time.perf_counter() - t0)
    streams, state = stitch_windows(spans, outputs, mags, stft_cfg.hop, n)
    log = [{"chunk": sp.index, "start": sp.cur_start, "stop": sp.cur_stop, "mapping": list(mp), "seconds": sec}
           for sp, mp, sec in zip(spans, state.mappings, seconds)]
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
    return streams, log


# ---------------------------------------------------------------------------
# beamforming and second stage
# ---------------------------------------------------------------------------

MWF_LOADING = 1e-3


def spatial_covariance(x: np.ndarray) -> np.ndarray:
    """(M, T, F) -> (F, M, M) frame-averaged x x^H."""
    return np.einsum("mtf,ntf->fmn", x, np.conj(x)) / x.shape[1]


def mwf_weights(phi_x: np.ndarray, phi_s: np.ndarray, loading: float = MWF_LOADING, ref: int = 0) -> np.ndarray:
    """(F, M) weights (Phi_x + delta I)^-1 Phi_s e_ref with delta = loading * trace(Phi_x) / M."""
    m = phi_x.shape[-1]
    delta = loading * np.real(np.trace(phi_x, axis1=-2, axis2=-1)) / m
    a = phi_x + delta[:, None, None] * np.eye(m)
    return np.linalg.solve(a, phi_s[..., ref][..., None])[..., 0]


def mwf_beamformer(x: np.ndarray, y: np.ndarray, loading: float = MWF_LOADING, ref: int = 0) -> np.ndarray:
    """Beamform (M, T, F) ``x`` toward each of the (K, M, T, F) image estimates ``y``; returns (K, T, F)."""
    if y.ndim != 4 or y.shape[1:] != x.shape:
        raise ValueError(f"need (K, M, T, F) multi-channel estimates matching {x.shape}, got {y.shape}")
    phi_x = spatial_covariance(x)
    out = []
    for yk in y:
        w = mwf_weights(phi_x, spatial_covariance(yk), loading, ref)
        out.append(np.einsum("fm,mtf->tf", np.conj(w), x))
    return np.stack(out)


def second_stage_config(first: ModelConfig, **overrides) -> ModelConfig:
    """Same architecture with M+1 inputs (mixture plus one beamformed channel) and a single MISO output."""
    d = first.to_dict()
    d.update(n_mics=first.n_mics + 1, n_src=1, head_mode="MISO")
    d.update(overrides)
    return ModelConfig.from_dict(d)


def second_stage_input(x: np.ndarray, bf: np.ndarray) -> np.ndarray:
    """(K, M+1, T, F): the mixture with each source's beamformed channel appended."""
    return np.stack([np.concatenate([x, b[None]], axis=0) for b in bf])


def second_stage(model: TFCorrNet | None, x: np.ndarray, bf: np.ndarray) -> np.ndarray:
    """Enhanced (K, T, F) outputs from the (M, T, F) mixture and (K, T, F) beamformer outputs."""
    if model is None:
        raise ValueError("second stage requires a trained second-stage checkpoint")
    inp = second_stage_input(x, bf)
    with T.no_grad():
        re, im = model(inp.astype(np.complex64 if model.cfg.dtype == "float32" else np.complex128))
    return re.data[:, 0, 0] + 1j * im.data[:, 0, 0]


def separate_two_stage(first: TFCorrNet, second: TFCorrNet | None, mixture: np.ndarray, stft_cfg: StftConfig,
                       loading: float = MWF_LOADING) -> dict[str, np.ndarray]:
    """First stage (MIMO), MWF and optional second stage on a (M, N) mixture; all outputs (K, N)."""
    if first.cfg.head_mode != "MIMO":
        raise ValueError("beamforming needs a MIMO first stage")
    mix, scale = normalize_waveform(np.asarray(mixture, dtype=np.float64))
    x = stft_cfg.stft(mix.astype(first.cfg.np_dtype))
    y = separate_spec(first, x)
    bf = mwf_beamformer(x.astype(np.complex128), y.astype(np.complex128), loading)
    n = mixture.shape[-1]
    out = {"first": stft_cfg.istft(y[:, 0], length=n) * scale,
           "beamformed": stft_cfg.istft(bf, length=n) * scale}
    if second is not None:
        out["second"] = stft_cfg.istft(second_stage(second, x, bf.astype(x.dtype)), length=n) * scale
    return out


def second_stage_batch(first: TFCorrNet, examples, run_cfg, rng: np.random.Generator, crop: int | None = None,
                       loading: float = MWF_LOADING):
    """Training batch for the second stage with the first stage held fixed.

    Each item picks one source at random; its first-stage estimate is matched
    to a target by the smaller magnitude L1 distance.
    """
    stft_cfg = run_cfg.stft
    if crop is None:
        crop = int(round(run_cfg.crop_seconds * run_cfg.sample_rate / run_cfg.hop)) * run_cfg.hop
    xs, ss, ws = [], [], []
    for _ in range(run_cfg.batch):
        ex = examples[int(rng.integers(len(examples)))]
        a, b = crop_bounds(ex.mixture.shape[-1], crop, rng)
        x, s_spec, s_wav = prepare_example(ex.mixture[:, a:b], ex.direct[..., a:b], stft_cfg, "MISO",
                                           first.cfg.np_dtype)
        y = separate_spec(first, x)
        bf = mwf_beamformer(x.astype(np.complex128), y.astype(np.complex128), loading).astype(x.dtype)
        k = int(rng.integers(y.shape[0]))
        dist = [np.abs(np.abs(y[k, 0]) - np.abs(s_spec[j, 0])).sum() for j in range(s_spec.shape[0])]
        j = int(np.argmin(dist))
        xs.append(np.concatenate([x, bf[k][None]], axis=0))
        ss.append(s_spec[j:j + 1])
        ws.append(s_wav[j:j + 1])
    return Batch(np.stack(xs), np.stack(ss), np.stack(ws))
