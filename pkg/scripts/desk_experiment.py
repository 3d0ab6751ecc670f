"""Train a tiny model on a synthetic desk set and report SDRi on train and held-out examples.

    python3 scripts/desk_experiment.py --input-mode correlation --output-mode filtering
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from tfcorrnet.config import RunConfig
from tfcorrnet.desk import DESK_SIM, desk_datasets, train_and_evaluate
from tfcorrnet.training import make_checkpoint, save_checkpoint


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--input-mode", default="correlation")
    ap.add_argument("--output-mode", default="filtering")
    ap.add_argument("--head-mode", default="MISO")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="key=value run config overriding the defaults")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--log-every", type=int, default=50)
    args = ap.parse_args(argv)

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.replace(input_mode=args.input_mode, output_mode=args.output_mode, head_mode=args.head_mode,
                      steps=args.steps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run.cfg")
    t0 = time.perf_counter()

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            msg = {k: round(v, 4) if isinstance(v, float) else v for k, v in rec.items()}
            print(json.dumps({**msg, "elapsed": round(time.perf_counter() - t0, 1)}), flush=True)

    train_set, heldout = desk_datasets(DESK_SIM)
    model, state, summary = train_and_evaluate(cfg, train_set, heldout, progress)
    summary["wall_seconds"] = time.perf_counter() - t0
    save_checkpoint(out / "model.ckpt", make_checkpoint(model, cfg, state.optimizer))
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
