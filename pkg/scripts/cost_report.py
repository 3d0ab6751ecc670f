"""Print the parameter / MAC breakdown of the full-size model.

    python3 scripts/cost_report.py [--hop 128] [--segment 2.4] [--mimo]
"""

import argparse

from tfcorrnet.costs import count_costs
from tfcorrnet.model import ModelConfig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hop", type=int, default=128)
    ap.add_argument("--segment", type=float, default=2.4)
    ap.add_argument("--mimo", action="store_true")
    args = ap.parse_args(argv)
    cfg = ModelConfig.full_size(head_mode="MIMO" if args.mimo else "MISO")
    rep = count_costs(cfg, sample_rate=16000, hop=args.hop, segment_seconds=args.segment)
    print(rep.table())
    print(f"\n{rep.params / 1e6:.3f} M parameters ({rep.params / 5.1e6 - 1:+.1%} vs 5.1 M), "
          f"{rep.macs_per_second / 1e9:.2f} GMACs/s ({rep.macs_per_second / 44.5e9 - 1:+.1%} vs 44.5)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
