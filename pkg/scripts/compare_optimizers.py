"""AdamW against Sophia on the mechanism config, shared seeds and data order.

    python3 scripts/compare_optimizers.py --out runs/compare
"""

import argparse
from pathlib import Path

from spectral_lora import experiments as E
from spectral_lora import trainer as T

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(ROOT / "configs" / "mechanism.json"))
    ap.add_argument("--threshold", type=float, help="validation loss for steps-to-threshold")
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()

    cfg = T.load_config(args.config)
    if args.threshold is not None:
        cfg = T.with_overrides(cfg, {"val_threshold": args.threshold})
    rep = E.compare_optimizers(cfg, args.out)
    print(f"threshold {rep.summary['val_threshold']:.4f}  shared data order: {rep.summary['shared_data_order']}")
    print(f"{'optimizer':10s}{'val loss':>10s}{'wall s':>9s}{'steps@thr':>11s}{'max |g|':>10s}")
    for a in rep.arms:
        f = a.final
        print(f"{a.name:10s}{f['final_val_loss']:10.4f}{f['wall_time_s']:9.1f}"
              f"{str(f['steps_to_threshold']):>11s}{max(a.series['grad_norm']):10.3f}")
    print(f"report: {Path(args.out) / 'report.txt'}")


if __name__ == "__main__":
    main()
