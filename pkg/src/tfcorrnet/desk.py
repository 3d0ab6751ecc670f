"""Desk-scale synthetic data and evaluation helpers shared by scripts and tests."""

from __future__ import annotations

import time

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig
from .css import separate
from .metrics import MetricReport, example_metrics
from .mixsim import MixtureExample, SimConfig, simulate_examples
from .model import TFCorrNet
from .stft import StftConfig
from .training import TrainState, sample_batch, train

DESK_SIM = SimConfig()
DESK_TRAIN = 32
DESK_HELDOUT = 16
HELDOUT_SEED_OFFSET = 10_000


def desk_datasets(sim: SimConfig = DESK_SIM, n_train: int = DESK_TRAIN, n_heldout: int = DESK_HELDOUT,
                  seed: int = 0) -> tuple[list[MixtureExample], list[MixtureExample]]:
    return (simulate_examples(sim, n_train, seed),
            simulate_examples(sim, n_heldout, seed + HELDOUT_SEED_OFFSET))


def evaluate_examples(model, examples: list[MixtureExample], stft_cfg: StftConfig) -> MetricReport:
    """Reference-mic metrics of single-pass separation against direct-path targets."""
    report = MetricReport()
    for i, ex in enumerate(examples):
        est = separate(model, ex.mixture, stft_cfg)[:, 0]
        report.examples.append(example_metrics(est, ex.reference_targets, ex.mixture[0], f"{ex.seed}"))
    return report


def train_and_evaluate(cfg: RunConfig, train_set: list[MixtureExample], heldout: list[MixtureExample],
                       progress=None) -> tuple[TFCorrNet, TrainState, dict]:
    """Train ``cfg`` single-threaded on ``train_set``; return the model, state and an SDRi summary."""
    model = TFCorrNet(cfg.model_config(), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    val = [sample_batch(heldout[:4], cfg.replace(batch=4), np.random.default_rng(1), crop=0)]
    t0 = time.perf_counter()
    with threadpool_limits(1):
        state = train(model, cfg, lambda r: sample_batch(train_set, cfg, r), val_batches=val, rng=rng,
                      progress=progress)
        train_seconds = time.perf_counter() - t0
        rep_train = evaluate_examples(model, train_set, cfg.stft)
        rep_held = evaluate_examples(model, heldout, cfg.stft)
    summary = {
        "input_mode": cfg.input_mode,
        "output_mode": cfg.output_mode,
        "head_mode": cfg.head_mode,
        "steps": cfg.steps,
        "train_seconds": train_seconds,
        "total_seconds": time.perf_counter() - t0,
        "train": rep_train.aggregate(),
        "heldout": rep_held.aggregate(),
    }
    return model, state, summary
