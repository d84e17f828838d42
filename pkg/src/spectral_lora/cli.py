"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as E
from . import tasks
from . import trainer as T


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _add_run_args(p, need_config=True):
    p.add_argument("--config", required=need_config, help="JSON run config (every key optional)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. fourier.lam=0.01")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spectral-lora", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train adapters and write metrics + checkpoint")
    _add_run_args(p)

    p = sub.add_parser("eval", help="exact-match pass@1 of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--language", help="defaults to the run's eval language")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--merged", action="store_true", help="fold adapters into base weights first")
    p.add_argument("--strategy", choices=("greedy", "sample", "beam"))
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", type=float)
    p.add_argument("--beam-size", type=int)

    p = sub.add_parser("compare-opt", help="AdamW vs Sophia on shared data order")
    _add_run_args(p)

    p = sub.add_parser("sweep", help="one run per Fourier regularization strength")
    _add_run_args(p)
    p.add_argument("--lambdas", default="0,0.001,0.02,0.05")

    p = sub.add_parser("spectrum", help="per-adapter power spectra")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference")
    p.add_argument("--out", default="runs/spectrum")

    p = sub.add_parser("gen-data", help="export the synthetic corpus")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--language", choices=tasks.LANGUAGES, default="lang_a")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--max-ops", type=int, default=4)
    p.add_argument("--out", default="data")
    return ap


def _load_run_config(args) -> T.TrainConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = T.load_config(path)
    except (ValueError, TypeError) as e:
        raise UsageError(f"bad config {path}: {e}") from None
    cfg = T.seed_from_env(cfg)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = _parse_value(v)
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return T.with_overrides(cfg, overrides) if overrides else cfg
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from None


def _run(args) -> None:
    if args.cmd == "train":
        cfg = _load_run_config(args)
        res = T.train(cfg, args.out)
        m = res.metrics
        print(f"checkpoint: {res.checkpoint}")
        print(f"task loss {m.initial_task_loss:.4f} -> {m.final_task_loss():.4f}; "
              f"val loss {m.val_series[-1][1]:.4f}; pass@1 {m.epochs[-1].pass_at_1:.3f}")
    elif args.cmd == "eval":
        cfg, model, adapters = T.load_run(args.checkpoint)
        lang = args.language or cfg.data.eval_language
        train, test = T.build_data(cfg, lang)
        dc = cfg.decode
        for attr, val in (("strategy", args.strategy), ("temperature", args.temperature),
                          ("top_p", args.top_p), ("beam_size", args.beam_size)):
            if val is not None:
                setattr(dc, attr, val)
        rep = T.evaluate_loaded(model, adapters, train if args.split == "train" else test, dc, args.merged)
        print(json.dumps({"language": lang, "merged": args.merged, "n_problems": rep.n_problems,
                          "n_correct": rep.n_correct, "pass_at_1": rep.pass_at_1}))
    elif args.cmd == "compare-opt":
        cfg = _load_run_config(args)
        rep = E.compare_optimizers(cfg, args.out)
        for a in rep.arms:
            print(f"{a.name:7s} val_loss {a.final['final_val_loss']:.4f} wall {a.final['wall_time_s']:.1f}s "
                  f"steps_to_threshold {a.final['steps_to_threshold']}")
    elif args.cmd == "sweep":
        cfg = _load_run_config(args)
        try:
            lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"--lambdas must be comma-separated numbers, got {args.lambdas!r}") from None
        if not lambdas:
            raise UsageError("--lambdas is empty")
        rep = E.sweep_lambda(cfg, lambdas, args.out)
        for a in rep.arms:
            f = a.final
            print(f"{a.name:14s} pass@1 {f['pass_at_1']:.3f} transfer {f['transfer_pass_at_1']:.3f} "
                  f"hf_frac {f['mean_high_freq_fraction']:.5f}")
    elif args.cmd == "spectrum":
        rows = E.spectrum_report(args.checkpoint, args.reference, args.out)
        for r in rows:
            tag = "untrained" if r.untrained else f"{r.high_freq_fraction:.5f}"
            print(f"{r.matrix:24s} n={r.n:5d} hf_frac {tag}")
    elif args.cmd == "gen-data":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        train, test = tasks.build_dataset(args.n, args.language, args.split_seed, args.data_seed, args.max_ops)
        tasks.export_dataset(train, out / f"{args.language}_train.tsv")
        tasks.export_dataset(test, out / f"{args.language}_test.tsv")
        print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _run(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
