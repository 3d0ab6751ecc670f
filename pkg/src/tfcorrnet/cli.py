"""Command-line entry point: simulate, train, separate, evaluate, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig
from .costs import count_costs
from .css import (ChunkSchedule, second_stage_batch, second_stage_config, separate, separate_css,
                  separate_two_stage)
from .metrics import MetricReport, example_metrics
from .mixsim import SimConfig, generate_dataset, load_dry_sources, load_example, read_manifest, MANIFEST_NAME
from .model import ModelConfig, TFCorrNet
from .stft import read_wav, write_wav
from .training import (Checkpoint, load_checkpoint, make_checkpoint, restore_optimizer, sample_batch,
                       save_checkpoint, train, TrainState, AdamW, PlateauSchedule)

log = logging.getLogger("tfcorrnet")


class CliError(Exception):
    pass


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {k: getattr(args, k) for k in ("steps", "seed", "lr", "batch") if getattr(args, k, None) is not None}
    return cfg.replace(**changes)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such file or directory: {p}")
    return p


def _examples(data_dir):
    manifest = _require(Path(data_dir) / MANIFEST_NAME)
    return [load_example(Path(rec["mixture"]).parent) for rec in read_manifest(manifest)]


def load_model(path) -> tuple[TFCorrNet, Checkpoint]:
    ckpt = load_checkpoint(_require(path))
    run_cfg = ckpt.run_config()
    model_cfg = run_cfg.model_config()
    if ckpt.config.get("stage") == "second":
        model_cfg = second_stage_config(model_cfg)
    model = TFCorrNet(model_cfg, seed=run_cfg.seed)
    model.load_state_dict(ckpt.params)
    return model, ckpt


# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    sim = SimConfig.load(args.scene_config) if args.scene_config else SimConfig()
    if args.mics:
        sim.n_mics = args.mics
    if args.duration:
        sim.duration = args.duration
    dry = load_dry_sources(_require(args.dry_dir)) if args.dry_dir else None
    t0 = time.perf_counter()
    records = generate_dataset(args.out, sim, args.n, args.seed, dry, args.subtype)
    print(f"wrote {len(records)} examples to {args.out} in {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    examples = _examples(args.data)
    val = _examples(args.val)[:8] if args.val else []
    first = None
    if args.stage == "second":
        if not args.first:
            raise CliError("--stage second needs --first CHECKPOINT")
        first, _ = load_model(args.first)
        model_cfg = second_stage_config(first.cfg)
        cfg = cfg.replace(**{k: v for k, v in first_run_keys(args.first).items()})
    else:
        model_cfg = cfg.model_config()
    model = TFCorrNet(model_cfg, seed=cfg.seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    state = TrainState(opt, PlateauSchedule(cfg.lr))
    if args.resume:
        ckpt = load_checkpoint(_require(args.resume))
        model.load_state_dict(ckpt.params)
        restore_optimizer(model, opt, ckpt)
    rng = np.random.default_rng(cfg.seed)
    if first is not None:
        batch_fn = lambda r: second_stage_batch(first, examples, cfg, r)
        val_batches = [second_stage_batch(first, val, cfg.replace(batch=len(val)), np.random.default_rng(1), crop=0)] if val else None
    else:
        batch_fn = lambda r: sample_batch(examples, cfg, r)
        val_batches = [sample_batch(val, cfg.replace(batch=len(val)), np.random.default_rng(1), crop=0)] if val else None

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            print(json.dumps({k: round(v, 5) if isinstance(v, float) else v for k, v in rec.items()}), flush=True)

    with threadpool_limits(args.threads):
        state = train(model, cfg, batch_fn, cfg.steps, val_batches, state, rng, progress)
    extra = {"stage": args.stage}
    save_checkpoint(args.out, make_checkpoint(model, cfg, state.optimizer, extra))
    print(f"saved {args.out} after {state.optimizer.step_count} steps")
    return 0


def first_run_keys(path) -> dict:
    """Architecture keys of a first-stage checkpoint, reused by the second stage."""
    rc = load_checkpoint(path).run_config()
    keys = ("sample_rate", "n_fft", "hop", "mics", "sources", "C", "C_prime", "F_prime", "R", "heads",
            "dconv_kernel", "downsample", "taps_L", "input_mode", "output_mode", "efn_expansion", "spectral")
    return {k: getattr(rc, k) for k in keys} | {"head_mode": "MIMO"}


def cmd_separate(args) -> int:
    model, ckpt = load_model(args.checkpoint)
    cfg = ckpt.run_config()
    mixture, sr = read_wav(_require(args.input))
    if sr != cfg.sample_rate:
        raise CliError(f"input is {sr} Hz, model expects {cfg.sample_rate} Hz")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(args.threads):
        if args.mode == "css":
            sched = ChunkSchedule(sample_rate=sr, hop=cfg.hop)
            streams, _ = separate_css(model, mixture, cfg.stft, sched, out / "chunks.jsonl")
            streams = streams[:, 0]
        elif args.second or args.mwf:
            second = load_model(args.second)[0] if args.second else None
            res = separate_two_stage(model, second, mixture, cfg.stft)
            streams = res["second" if second is not None else "beamformed"]
        else:
            streams = separate(model, mixture, cfg.stft)[:, 0]
    for k, s in enumerate(streams):
        write_wav(out / f"stream_{k}.wav", s[None], sr, args.subtype)
    print(f"wrote {len(streams)} streams to {out}")
    return 0


def cmd_evaluate(args) -> int:
    model, ckpt = load_model(args.checkpoint)
    cfg = ckpt.run_config()
    report = MetricReport()
    with threadpool_limits(args.threads):
        for ex in _examples(args.data):
            if args.mode == "css":
                est = separate_css(model, ex.mixture, cfg.stft, ChunkSchedule(sample_rate=cfg.sample_rate, hop=cfg.hop))[0][:, 0]
            else:
                est = separate(model, ex.mixture, cfg.stft)[:, 0]
            report.examples.append(example_metrics(est, ex.reference_targets, ex.mixture[0], str(ex.seed)))
    text = report.to_json(indent=1)
    if args.report:
        Path(args.report).write_text(text)
    print(json.dumps(report.aggregate()))
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model, ckpt = load_model(args.checkpoint)
        print(f"step {ckpt.step}, {model.num_parameters():,} parameters")
        for k, v in ckpt.config.items():
            print(f"  {k}={v}")
        model_cfg = model.cfg
        cfg = ckpt.run_config()
        sr, hop = cfg.sample_rate, cfg.hop
    elif args.full_size:
        model_cfg, sr, hop = ModelConfig.full_size(), 16000, 128
    else:
        cfg = _run_config(args)
        model_cfg, sr, hop = cfg.model_config(), cfg.sample_rate, cfg.hop
    print(count_costs(model_cfg, sample_rate=sr, hop=hop, segment_seconds=args.segment).table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tfcorrnet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="build a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene-config")
    p.add_argument("--dry-dir", help="directory of mono WAV dry sources (default: synthetic)")
    p.add_argument("--mics", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--subtype", choices=("float32", "pcm16"), default="float32")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a first- or second-stage model")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--stage", choices=("first", "second"), default="first")
    p.add_argument("--first", help="first-stage checkpoint (second stage only)")
    p.add_argument("--resume")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate one multi-channel WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("single", "css"), default="single")
    p.add_argument("--mwf", action="store_true", help="beamform with the MIMO estimates")
    p.add_argument("--second", help="second-stage checkpoint")
    p.add_argument("--subtype", choices=("float32", "pcm16"), default="float32")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="SDR / SI-SDR / SDRi on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("single", "css"), default="single")
    p.add_argument("--report")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="checkpoint summary and cost report")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--full-size", action="store_true", help="cost report for the full-size configuration")
    p.add_argument("--segment", type=float, default=2.4)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (CliError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
