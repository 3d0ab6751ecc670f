"""Losses with permutation-invariant training, AdamW, learning-rate schedule and checkpoints.

Every loss term is an L1 distance reduced by the mean over its elements and
summed over sources. The spectral term compares magnitude, real and
imaginary parts; the waveform term compares the inverse STFT of the
estimates with the time-domain targets; the mixture-constraint term compares
the sums over sources.
"""

from __future__ import annotations

import itertools
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig, format_kv, parse_kv
from .features import normalize_waveform
from .layers import Module
from .stft import StftConfig, istft_tensor, stft
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l1_mean(a: Tensor, target: np.ndarray) -> Tensor:
    if a.shape != target.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {target.shape}")
    return T.mean(T.tabs(T.sub(a, Tensor(np.asarray(target, dtype=a.dtype)))))


def loss_tf_terms(y_re: Tensor, y_im: Tensor, s: np.ndarray) -> Tensor:
    """Magnitude + real + imaginary L1 terms for one source, each mean-reduced."""
    if y_re.shape != s.shape:
        raise ValueError(f"estimate {y_re.shape} and target {s.shape} differ")
    mag = T.hypot(y_re, y_im)
    return T.add(T.add(l1_mean(mag, np.hypot(s.real, s.imag)), l1_mean(y_re, s.real)), l1_mean(y_im, s.imag))


def loss_tf(y_re: Tensor, y_im: Tensor, s: np.ndarray) -> Tensor:
    """Spectral loss summed over the leading source axis of (K, ..., T, F) inputs."""
    if y_re.shape != s.shape:
        raise ValueError(f"estimate {y_re.shape} and target {s.shape} differ")
    terms = [loss_tf_terms(T.getitem(y_re, k), T.getitem(y_im, k), s[k]) for k in range(s.shape[0])]
    return _sum(terms)


def loss_wav(y: Tensor, s: np.ndarray) -> Tensor:
    """Sum over sources of the mean absolute waveform error; inputs are (K, ..., N)."""
    if y.shape != s.shape:
        raise ValueError(f"waveform shapes differ: {y.shape} vs {s.shape}")
    return _sum([l1_mean(T.getitem(y, k), s[k]) for k in range(s.shape[0])])


def ordered_source_sum(s: np.ndarray) -> np.ndarray:
    # summing values in sorted order makes the result independent of source order
    return np.sort(s, axis=0).sum(axis=0)


def loss_mc(y: Tensor, s: np.ndarray) -> Tensor:
    """Mean absolute error between the sums over sources (axis 0)."""
    if y.shape != s.shape:
        raise ValueError(f"waveform shapes differ: {y.shape} vs {s.shape}")
    return l1_mean(T.tsum(y, axis=0), ordered_source_sum(s))


def _sum(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


@dataclass
class LossReport:
    total: float
    l_tf: float
    l_wav: float
    l_mc: float
    permutation: list[int]


def best_permutation(pairwise: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Exhaustive minimum of sum_k pairwise[k, perm[k]]; first minimizer in lexicographic order."""
    k = pairwise.shape[0]
    if pairwise.shape != (k, k):
        raise ValueError(f"pairwise loss matrix must be square, got {pairwise.shape}")
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(k)):
        cost = sum(float(pairwise[i, perm[i]]) for i in range(k))
        if cost < best_cost:
            best, best_cost = perm, cost
    return best, best_cost


MAX_PIT_SOURCES = 4


def pit_loss(y_re: Tensor, y_im: Tensor, s_spec: np.ndarray, s_wav: np.ndarray,
             stft_cfg: StftConfig) -> tuple[Tensor, LossReport]:
    """Permutation-invariant total loss for one example.

    ``y_re``/``y_im`` are (K, M_out, T, F) estimates, ``s_spec`` the complex
    targets of the same shape and ``s_wav`` the (K, M_out, N) waveforms.
    Gradients flow only through the selected permutation.
    """
    k = y_re.shape[0]
    if s_spec.shape[0] != k or s_wav.shape[0] != k:
        raise ValueError(f"{k} estimates but {s_spec.shape[0]} targets")
    if k > MAX_PIT_SOURCES:
        raise ValueError(f"exhaustive PIT supports at most {MAX_PIT_SOURCES} sources")
    length = s_wav.shape[-1]
    y_wav = istft_tensor(y_re, y_im, stft_cfg, length)

    tf_terms = [[None] * k for _ in range(k)]
    wav_terms = [[None] * k for _ in range(k)]
    pairwise = np.zeros((k, k))
    for i in range(k):
        yr, yi, yw = T.getitem(y_re, i), T.getitem(y_im, i), T.getitem(y_wav, i)
        for j in range(k):
            tf_terms[i][j] = loss_tf_terms(yr, yi, s_spec[j])
            wav_terms[i][j] = l1_mean(yw, s_wav[j])
            pairwise[i, j] = float(tf_terms[i][j].data) + float(wav_terms[i][j].data)
    perm, _ = best_permutation(pairwise)
    l_tf = _sum([tf_terms[i][perm[i]] for i in range(k)])
    l_wav = _sum([wav_terms[i][perm[i]] for i in range(k)])
    l_mc = loss_mc(y_wav, s_wav)
    total = T.add(T.add(l_tf, l_wav), l_mc)
    parts = [sum(float(tf_terms[i][perm[i]].data) for i in range(k)),
             sum(float(wav_terms[i][perm[i]].data) for i in range(k)),
             float(l_mc.data)]
    report = LossReport(total=parts[0] + parts[1] + parts[2], l_tf=parts[0], l_wav=parts[1],
                        l_mc=parts[2], permutation=list(perm))
    return total, report


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data *= p.dtype.type(1 - self.lr * self.weight_decay)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)
    norm = float(np.sqrt(sq))
    if max_norm and norm > max_norm:
        ratio = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.dtype.type(ratio)
    return norm


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` validations without improvement."""

    lr: float
    factor: float = 0.8
    patience: int = 2
    max_epochs: int = 100
    best: float = float("inf")
    bad: int = 0
    epochs: int = 0

    def step(self, val_loss: float) -> float:
        self.epochs += 1
        if val_loss < self.best:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr

    @property
    def finished(self) -> bool:
        return self.epochs >= self.max_epochs


def lr_schedule(val_losses, lr: float, factor: float = 0.8, patience: int = 2) -> float:
    """Learning rate after feeding a sequence of validation losses to :class:`PlateauSchedule`."""
    sched = PlateauSchedule(lr, factor, patience)
    for v in val_losses:
        sched.step(v)
    return sched.lr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"TFCN"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict[str, str]
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def run_config(self) -> RunConfig:
        return RunConfig.from_kv(self.config, strict=False)


def _entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = list(ckpt.params.items()) + [(f"optim.{k}", v) for k, v in ckpt.moments.items()]
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate entry names")
    return items


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    config = dict(ckpt.config)
    config["step"] = str(ckpt.step)
    blob = format_kv(config).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(blob)), blob]
    entries = _entries(ckpt)
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = r.unpack("<I")
    config = parse_kv(r.take(clen).decode("utf-8"))
    step = int(config.pop("step", "0"))
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    moments: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dt = _CODE_DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
        target = moments if name.startswith("optim.") else params
        key = name[len("optim."):] if target is moments else name
        if key in target:
            raise CheckpointError(f"duplicate entry {name!r}")
        target[key] = arr
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last entry")
    return Checkpoint(params=params, config=config, moments=moments, step=step)


def make_checkpoint(model: Module, run_cfg: RunConfig, optimizer: AdamW | None = None,
                    extra: dict[str, str] | None = None) -> Checkpoint:
    config = run_cfg.to_kv()
    config.update(extra or {})
    moments = {}
    step = 0
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        for name, m, v in zip(names, optimizer.m, optimizer.v):
            moments[f"m.{name}"] = m
            moments[f"v.{name}"] = v
        step = optimizer.step_count
        config["lr_current"] = repr(float(optimizer.lr))
    return Checkpoint(params=model.state_dict(), config=config, moments=moments, step=step)


def restore_optimizer(model: Module, optimizer: AdamW, ckpt: Checkpoint) -> None:
    names = [n for n, _ in model.named_parameters()]
    for i, name in enumerate(names):
        optimizer.m[i] = ckpt.moments[f"m.{name}"].copy()
        optimizer.v[i] = ckpt.moments[f"v.{name}"].copy()
    optimizer.step_count = ckpt.step
    if "lr_current" in ckpt.config:
        optimizer.lr = float(ckpt.config["lr_current"])


# ---------------------------------------------------------------------------
# batches and the step loop
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray       # (B, M, T, F) complex mixture
    s_spec: np.ndarray  # (B, K, M_out, T, F) complex targets
    s_wav: np.ndarray   # (B, K, M_out, N) target waveforms


def prepare_example(mixture: np.ndarray, targets: np.ndarray, stft_cfg: StftConfig, head_mode: str,
                    dtype=np.float32) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize one (M, N) mixture and its (K, M, N) direct-path targets and transform them."""
    mix, scale = normalize_waveform(np.asarray(mixture, dtype=np.float64))
    tgt = np.asarray(targets, dtype=np.float64) / scale
    if head_mode == "MISO":
        tgt = tgt[:, :1]
    x = stft_cfg.stft(mix.astype(dtype))
    s = tgt.astype(dtype)
    return x, stft_cfg.stft(s), s


def crop_bounds(n: int, crop: int, rng: np.random.Generator) -> tuple[int, int]:
    if crop <= 0 or crop >= n:
        return 0, n
    start = int(rng.integers(0, n - crop + 1))
    return start, start + crop


def sample_batch(examples, run_cfg: RunConfig, rng: np.random.Generator, crop: int | None = None) -> Batch:
    """Random crops from ``examples`` (objects with ``mixture`` (M, N) and ``direct`` (K, M, N))."""
    stft_cfg = run_cfg.stft
    if crop is None:
        crop = int(round(run_cfg.crop_seconds * run_cfg.sample_rate / run_cfg.hop)) * run_cfg.hop
    xs, ss, ws = [], [], []
    for _ in range(run_cfg.batch):
        ex = examples[int(rng.integers(len(examples)))]
        a, b = crop_bounds(ex.mixture.shape[-1], crop, rng)
        x, s_spec, s_wav = prepare_example(ex.mixture[:, a:b], ex.direct[..., a:b], stft_cfg, run_cfg.head_mode)
        xs.append(x)
        ss.append(s_spec)
        ws.append(s_wav)
    return Batch(np.stack(xs), np.stack(ss), np.stack(ws))


def batch_loss(model: Module, batch: Batch, stft_cfg: StftConfig) -> tuple[Tensor, list[LossReport]]:
    y_re, y_im = model(batch.x)
    totals, reports = [], []
    for b in range(batch.x.shape[0]):
        total, rep = pit_loss(T.getitem(y_re, b), T.getitem(y_im, b), batch.s_spec[b], batch.s_wav[b], stft_cfg)
        totals.append(total)
        reports.append(rep)
    return T.scale(_sum(totals), 1.0 / len(totals)), reports


@dataclass
class TrainState:
    optimizer: AdamW
    schedule: PlateauSchedule
    history: list[dict] = field(default_factory=list)


def train(model: Module, run_cfg: RunConfig, batch_fn: Callable[[np.random.Generator], Batch],
          steps: int | None = None, val_batches: list[Batch] | None = None,
          state: TrainState | None = None, rng: np.random.Generator | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainState:
    """Run ``steps`` optimizer steps; validation (if given) drives the plateau schedule."""
    steps = run_cfg.steps if steps is None else steps
    rng = np.random.default_rng(run_cfg.seed) if rng is None else rng
    if state is None:
        opt = AdamW(model.parameters(), lr=run_cfg.lr, weight_decay=run_cfg.weight_decay)
        state = TrainState(opt, PlateauSchedule(run_cfg.lr))
    opt = state.optimizer
    stft_cfg = run_cfg.stft
    for _ in range(steps):
        t0 = time.perf_counter()
        batch = batch_fn(rng)
        loss, reports = batch_loss(model, batch, stft_cfg)
        loss.backward()
        gnorm = clip_grad_norm(opt.params, run_cfg.clip_norm)
        opt.step()
        rec = {
            "step": opt.step_count,
            "loss": float(loss.data),
            "l_tf": float(np.mean([r.l_tf for r in reports])),
            "l_wav": float(np.mean([r.l_wav for r in reports])),
            "l_mc": float(np.mean([r.l_mc for r in reports])),
            "grad_norm": gnorm,
            "lr": opt.lr,
            "seconds": time.perf_counter() - t0,
        }
        if val_batches and run_cfg.val_every and opt.step_count % run_cfg.val_every == 0:
            rec["val_loss"] = validate(model, val_batches, stft_cfg)
            opt.lr = state.schedule.step(rec["val_loss"])
        state.history.append(rec)
        if progress is not None:
            progress(rec)
    return state


def validate(model: Module, batches: list[Batch], stft_cfg: StftConfig) -> float:
    with T.no_grad():
        return float(np.mean([float(batch_loss(model, b, stft_cfg)[0].data) for b in batches]))
