"""Multi-arm experiments built on ``trainer.train`` and per-adapter spectra."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import spectral as S
from . import tasks
from . import trainer as T


@dataclass
class Arm:
    name: str
    config: dict
    final: dict
    series: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    kind: str
    arms: list[Arm]
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "summary": self.summary, "arms": [dataclasses.asdict(a) for a in self.arms]}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def matrix_fractions(adapters, T_: float) -> dict[str, float | None]:
    """High-frequency fraction per adapter matrix; ``None`` for all-zero ones."""
    out = {}
    for name, mat in adapters.params().items():
        out[name] = S.high_freq_fraction(mat.reshape(-1), T_) if np.any(mat) else None
    return out


def mean_high_freq_fraction(adapters, T_: float) -> float:
    vals = [v for v in matrix_fractions(adapters, T_).values() if v is not None]
    if not vals:
        raise ValueError("no trained adapter matrices")
    return float(np.mean(vals))


def steps_to_threshold(val_series, threshold: float) -> int | None:
    for step, loss in val_series:
        if loss <= threshold:
            return step
    return None


def _arm_dir(out_dir, name):
    return None if out_dir is None else Path(out_dir) / name


def compare_optimizers(cfg: T.TrainConfig, out_dir=None) -> ExperimentReport:
    """AdamW and Sophia arms with identical seeds and data order."""
    runs = {}
    for name in ("adamw", "sophia"):
        arm_cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim, name=name))
        runs[name] = T.train(arm_cfg, _arm_dir(out_dir, name))
    finals = {n: r.metrics.val_series[-1][1] for n, r in runs.items()}
    threshold = cfg.val_threshold if cfg.val_threshold is not None else max(finals.values())
    arms = []
    for name, r in runs.items():
        m = r.metrics
        arms.append(
            Arm(
                name,
                T.config_to_dict(r.config),
                {
                    "final_val_loss": finals[name],
                    "wall_time_s": m.wall_time_s,
                    "steps_to_threshold": steps_to_threshold(m.val_series, threshold),
                    "n_steps": len(m.steps),
                    "data_order_digest": m.data_order_digest(),
                    "clip_checks": m.clip_checks,
                },
                {"grad_norm": m.grad_norms, "val_loss": [list(v) for v in m.val_series]},
            )
        )
    digests = {a.final["data_order_digest"] for a in arms}
    report = ExperimentReport(
        "compare_optimizers",
        arms,
        {"val_threshold": threshold, "shared_data_order": len(digests) == 1, "seed": cfg.seed},
    )
    if out_dir is not None:
        report.write(Path(out_dir) / "report.txt")
    return report


def sweep_lambda(cfg: T.TrainConfig, lambdas, out_dir=None) -> ExperimentReport:
    """One arm per regularization strength; reports in-language and transfer pass@1."""
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("need at least one lambda")
    _, transfer_set = T.build_data(cfg, cfg.data.eval_language)
    arms = []
    for lam in lambdas:
        arm_cfg = dataclasses.replace(cfg, fourier=dataclasses.replace(cfg.fourier, lam=float(lam)))
        r = T.train(arm_cfg, _arm_dir(out_dir, f"lambda_{lam:g}"))
        m = r.metrics
        arms.append(
            Arm(
                f"lambda={lam:g}",
                T.config_to_dict(arm_cfg),
                {
                    "lambda": float(lam),
                    "initial_task_loss": m.initial_task_loss,
                    "final_task_loss": m.final_task_loss(),
                    "final_val_loss": m.val_series[-1][1],
                    "pass_at_1": tasks.pass_at_1(r.model, r.adapters, r.val_set, cfg.decode).pass_at_1,
                    "transfer_pass_at_1": tasks.pass_at_1(r.model, r.adapters, transfer_set, cfg.decode).pass_at_1,
                    "transfer_val_loss": T.dataset_loss(r.model, r.adapters, transfer_set, "target"),
                    "mean_high_freq_fraction": mean_high_freq_fraction(r.adapters, cfg.fourier.threshold),
                    "wall_time_s": m.wall_time_s,
                },
                {"high_freq_fraction": matrix_fractions(r.adapters, cfg.fourier.threshold)},
            )
        )
    report = ExperimentReport(
        "sweep_lambda",
        arms,
        {"lambdas": [float(x) for x in lambdas], "train_language": cfg.data.train_language,
         "transfer_language": cfg.data.eval_language, "seed": cfg.seed},
    )
    if out_dir is not None:
        report.write(Path(out_dir) / "report.txt")
    return report


@dataclass
class SpectrumRow:
    matrix: str
    n: int
    power: np.ndarray
    rho: np.ndarray
    high_freq_fraction: float | None
    untrained: bool
    delta_vs_reference: float | None = None

    @property
    def total_power(self) -> float:
        return float(self.power.sum())


def spectrum_report(ckpt, reference=None, out_dir=None, threshold: float | None = None) -> list[SpectrumRow]:
    """Per adapter matrix: power spectrum, high-frequency fraction and, with a
    reference checkpoint, the fraction difference (this minus reference)."""
    cfg, _, adapters = T.load_run(ckpt)
    fcfg = cfg.fourier
    T_ = fcfg.threshold if threshold is None else threshold
    ref = T.load_run(reference)[2].params() if reference is not None else None
    rows = []
    for name, mat in adapters.params().items():
        w = mat.reshape(-1)
        n = w.size
        untrained = not np.any(w)
        frac = None if untrained else S.high_freq_fraction(w, T_)
        delta = None
        if ref is not None and frac is not None and name in ref and np.any(ref[name]):
            delta = frac - S.high_freq_fraction(ref[name].reshape(-1), T_)
        rows.append(
            SpectrumRow(name, n, S.power_spectrum(w), S.penalty_weights(n, fcfg).rho, frac, untrained, delta)
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in rows:
            lines = ["k,power,rho"] + [f"{k},{p!r},{q!r}" for k, (p, q) in enumerate(zip(r.power, r.rho))]
            (out / f"spectrum_{r.matrix}.csv").write_text("\n".join(lines) + "\n")
        trained = [r.high_freq_fraction for r in rows if not r.untrained]
        summary = {
            "checkpoint": str(ckpt),
            "reference": None if reference is None else str(reference),
            "threshold": T_,
            "mean_high_freq_fraction": float(np.mean(trained)) if trained else None,
            "matrices": {
                r.matrix: {
                    "n": r.n,
                    "untrained": r.untrained,
                    "high_freq_fraction": r.high_freq_fraction,
                    "delta_vs_reference": r.delta_vs_reference,
                    "total_power": r.total_power,
                }
                for r in rows
            },
        }
        (out / "report.txt").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows
