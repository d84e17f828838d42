"""Adapter training loop, run configuration, persistence and evaluation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import lora as L
from . import optim as O
from . import spectral as S
from . import tasks
from .model import DecoderModel, ModelConfig, backward, forward
from .tensor_core import cross_entropy, make_rng

log = logging.getLogger(__name__)

SEED_ENV = "SPECTRAL_LORA_SEED"
METRICS_HEADER = "step,task_loss,fourier_loss,total_loss,lr,grad_norm,wall_ms"
CHECKPOINT_NAME = "adapters.slra"


@dataclass
class LoraConfig:
    preset: str = "attention_mlp"
    r: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    scaling_mode: str = "alpha_over_rank"


@dataclass
class OptimConfig:
    name: str = "adamw"  # adamw | sophia
    lr: float = 2e-4
    lr_min: float = 0.0
    warmup_frac: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    sophia_beta1: float = 0.965
    sophia_beta2: float = 0.99
    gamma: float = 0.01
    sophia_eps: float = 1e-12
    hessian_interval: int = 10


@dataclass
class DataConfig:
    n_samples: int = 2000
    max_ops: int = 4
    train_language: str = "lang_a"
    eval_language: str = "lang_b"
    test_frac: float = 0.1
    data_seed: int = 0
    split_seed: int = 0


def _default_model() -> ModelConfig:
    return ModelConfig(vocab_size=tasks.VOCAB_SIZE)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=_default_model)
    lora: LoraConfig = field(default_factory=LoraConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    fourier: S.FourierRegConfig = field(default_factory=S.FourierRegConfig)
    decode: tasks.DecodeConfig = field(default_factory=tasks.DecodeConfig)
    batch_size: int = 4
    epochs: int = 3
    seed: int = 0
    loss_on: str = "all"  # all | target
    eval_every: int = 50
    val_threshold: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.loss_on not in ("all", "target"):
            raise ValueError(f"loss_on must be 'all' or 'target', got {self.loss_on!r}")
        if self.optim.name not in ("adamw", "sophia"):
            raise ValueError(f"unknown optimizer {self.optim.name!r}")
        if self.model.vocab_size < tasks.VOCAB_SIZE:
            raise ValueError(f"vocab_size must be >= {tasks.VOCAB_SIZE}")


# ---------------------------------------------------------------- config I/O


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    return obj


def config_to_dict(cfg: TrainConfig) -> dict:
    return _to_plain(cfg)


def _from_plain(cls, data, where="config"):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected a table, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            # a partial section keeps the parent's defaults for the rest
            fac = fields[k].default_factory
            if fac is not dataclasses.MISSING and isinstance(v, dict):
                v = {**_to_plain(fac()), **v}
            kwargs[k] = _from_plain(t, v, f"{where}.{k}")
        else:
            kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    return _from_plain(TrainConfig, data)


def load_config(path) -> TrainConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def with_overrides(cfg: TrainConfig, overrides: dict[str, object]) -> TrainConfig:
    """Apply dotted-key overrides such as ``{"fourier.lam": 0.0}``."""
    data = config_to_dict(cfg)
    for key, val in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = val
    return config_from_dict(data)


def seed_from_env(cfg: TrainConfig) -> TrainConfig:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    return dataclasses.replace(cfg, seed=int(raw))


# ---------------------------------------------------------------- batches


def make_batch(samples, loss_on: str = "all"):
    """Right-padded next-token inputs/targets and the loss mask."""
    T = max(len(s.tokens) for s in samples) - 1
    x = np.full((len(samples), T), tasks.PAD, dtype=np.int64)
    y = np.full((len(samples), T), tasks.PAD, dtype=np.int64)
    mask = np.zeros((len(samples), T), dtype=bool)
    for i, s in enumerate(samples):
        toks = s.tokens
        n = len(toks) - 1
        x[i, :n] = toks[:-1]
        y[i, :n] = toks[1:]
        start = 0 if loss_on == "all" else len(s.prompt) - 1
        mask[i, start:n] = True
    return x, y, mask


def task_loss_and_grads(model, adapters, x, y, mask, training=False, rng=None):
    logits, cache = forward(model, x, adapters, training=training, rng=rng)
    loss, drows = cross_entropy(logits[mask], y[mask])
    dlogits = np.zeros_like(logits)
    dlogits[mask] = drows
    g = backward(model, cache, dlogits, adapters, need_base=False)
    return loss, {k: g[k] for k in adapters.params()}


def dataset_loss(model, adapters, dataset, loss_on="all", batch_size=64) -> float:
    """Token-weighted mean cross-entropy over a dataset, teacher forced."""
    total = 0.0
    count = 0
    for i in range(0, len(dataset), batch_size):
        x, y, mask = make_batch(dataset.samples[i : i + batch_size], loss_on)
        logits, _ = forward(model, x, adapters)
        loss, _ = cross_entropy(logits[mask], y[mask])
        n = int(mask.sum())
        total += loss * n
        count += n
    return total / count


# ---------------------------------------------------------------- metrics


@dataclass
class StepRecord:
    step: int
    task_loss: float
    fourier_loss: float
    total_loss: float
    lr: float
    grad_norm: float
    wall_ms: float

    def csv(self) -> str:
        return ",".join(
            [str(self.step)]
            + [repr(float(v)) for v in (self.task_loss, self.fourier_loss, self.total_loss, self.lr, self.grad_norm)]
            + [f"{self.wall_ms:.3f}"]
        )


@dataclass
class EpochRecord:
    epoch: int
    step: int
    val_loss: float
    pass_at_1: float


@dataclass
class RunMetrics:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    val_series: list[tuple[int, float]] = field(default_factory=list)
    batch_hashes: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0
    clip_checks: int = 0

    @property
    def initial_task_loss(self) -> float:
        return self.steps[0].task_loss

    def final_task_loss(self, window: int = 50) -> float:
        tail = self.steps[-window:]
        return float(np.mean([s.task_loss for s in tail]))

    @property
    def grad_norms(self) -> list[float]:
        return [s.grad_norm for s in self.steps]

    def data_order_digest(self) -> str:
        return hashlib.sha256("\n".join(self.batch_hashes).encode()).hexdigest()


class TrainingDivergedError(RuntimeError):
    pass


class ClipBoundViolation(AssertionError):
    pass


@dataclass
class TrainResult:
    checkpoint: Path | None
    metrics: RunMetrics
    model: DecoderModel
    adapters: L.LoraSet
    config: TrainConfig
    train_set: tasks.Dataset
    val_set: tasks.Dataset


def build_model(cfg: TrainConfig) -> DecoderModel:
    return DecoderModel.init(cfg.model, make_rng(cfg.seed, "init"))


def build_data(cfg: TrainConfig, language: str | None = None):
    d = cfg.data
    return tasks.build_dataset(
        d.n_samples, language or d.train_language, d.split_seed, d.data_seed, d.max_ops, d.test_frac
    )


def _check_finite(step, **terms):
    for name, val in terms.items():
        if isinstance(val, dict):
            bad = [k for k, g in val.items() if not np.all(np.isfinite(g))]
            if bad:
                raise TrainingDivergedError(f"non-finite {name} at step {step}: {bad[0]}")
        elif not math.isfinite(val):
            raise TrainingDivergedError(f"non-finite {name} at step {step}: {val}")


def train(cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Train adapters on the frozen base model with task + lambda * Fourier loss.

    With ``out_dir`` set, ``metrics.csv`` is streamed while training and the
    checkpoint, its config sidecar, ``epochs.csv`` and ``batches.log`` are
    written at the end.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")
    model = build_model(cfg)
    lc = cfg.lora
    adapters = L.init_adapters(
        model, lc.preset, lc.r, lc.alpha, lc.dropout, make_rng(cfg.seed, "adapters"), lc.scaling_mode
    )
    train_set, val_set = build_data(cfg)
    params = adapters.params()

    spe = math.ceil(len(train_set) / cfg.batch_size)
    total = spe * cfg.epochs
    oc = cfg.optim
    sched = O.CosineSchedule(oc.lr, oc.lr_min, int(round(oc.warmup_frac * total)), total)
    if oc.name == "adamw":
        state = O.AdamWState(oc.beta1, oc.beta2, oc.eps, oc.weight_decay)
    else:
        state = O.SophiaState(
            oc.sophia_beta1, oc.sophia_beta2, oc.gamma, oc.sophia_eps, oc.hessian_interval, oc.weight_decay
        )

    order_rng = make_rng(cfg.seed, "data_order")
    drop_rng = make_rng(cfg.seed, "dropout")
    hess_rng = make_rng(cfg.seed, "hessian")
    fcfg = cfg.fourier
    metrics = RunMetrics()
    mfile = open(out / "metrics.csv", "w") if out is not None else None
    if mfile:
        mfile.write(METRICS_HEADER + "\n")
    t0 = time.monotonic()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            perm = order_rng.permutation(len(train_set))
            for b in range(spe):
                batch = [train_set[int(i)] for i in perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                metrics.batch_hashes.append(
                    hashlib.sha1(",".join(str(s.program_id) for s in batch).encode()).hexdigest()[:16]
                )
                x, y, mask = make_batch(batch, cfg.loss_on)
                task_loss, grads = task_loss_and_grads(model, adapters, x, y, mask, True, drop_rng)
                reg, reg_grads = S.regularizer_term(adapters, fcfg)
                fourier = reg / fcfg.lam if fcfg.lam > 0 else 0.0
                total_loss = task_loss + fcfg.lam * fourier
                for k in grads:
                    grads[k] = grads[k] + reg_grads[k]
                _check_finite(step, task_loss=task_loss, fourier_loss=fourier, gradient=grads)
                gnorm = O.global_grad_norm(grads)
                lr = O.cosine_lr(sched, step + 1)
                if isinstance(state, O.SophiaState):
                    if state.hessian_due():
                        est = O.estimate_hessian_diag(model, adapters, x, hess_rng, mask)
                        O.update_hessian(state, est)
                    before = {k: p.copy() for k, p in params.items()}
                    deltas = O.sophia_step(params, grads, state, lr)
                    _assert_clip_bound(step, deltas, before, params, lr)
                    metrics.clip_checks += 1
                else:
                    O.adamw_step(params, grads, state, lr)
                rec = StepRecord(step, task_loss, fourier, total_loss, lr, gnorm, (time.monotonic() - t0) * 1e3)
                metrics.steps.append(rec)
                if mfile:
                    mfile.write(rec.csv() + "\n")
                step += 1
                if cfg.eval_every and step % cfg.eval_every == 0 and step != total:
                    metrics.val_series.append((step, dataset_loss(model, adapters, val_set, cfg.loss_on)))
            vl = dataset_loss(model, adapters, val_set, cfg.loss_on)
            metrics.val_series.append((step, vl))
            p1 = tasks.pass_at_1(model, adapters, val_set, cfg.decode).pass_at_1
            metrics.epochs.append(EpochRecord(epoch, step, vl, p1))
            log.info("epoch %d step %d val_loss %.4f pass@1 %.3f", epoch, step, vl, p1)
    finally:
        if mfile:
            mfile.close()
    metrics.wall_time_s = time.monotonic() - t0

    ckpt = None
    if out is not None:
        ckpt = out / CHECKPOINT_NAME
        L.save_checkpoint(adapters, ckpt)
        save_config(cfg, sidecar_path(ckpt))
        O.save_state(state, out / "optim_state.npz")
        (out / "epochs.csv").write_text(
            "epoch,step,val_loss,pass_at_1\n"
            + "".join(f"{e.epoch},{e.step},{e.val_loss!r},{e.pass_at_1!r}\n" for e in metrics.epochs)
        )
        (out / "batches.log").write_text("\n".join(metrics.batch_hashes) + "\n")
    return TrainResult(ckpt, metrics, model, adapters, cfg, train_set, val_set)


def _assert_clip_bound(step, deltas, before, params, lr):
    for k, d in deltas.items():
        if np.abs(d).max(initial=0.0) > lr:
            raise ClipBoundViolation(f"step {step}: update of {k} exceeds lr {lr}")
        moved = np.abs(params[k] - before[k])
        slack = 4 * np.finfo(float).eps * np.maximum(np.abs(before[k]), np.abs(params[k]))
        if np.any(moved > lr + slack):
            raise ClipBoundViolation(f"step {step}: parameter {k} moved more than lr {lr}")


# ---------------------------------------------------------------- checkpoints


def sidecar_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".json")


def load_run(ckpt) -> tuple[TrainConfig, DecoderModel, L.LoraSet]:
    """Rebuild the frozen base model from the sidecar config and load adapters."""
    cfg = load_config(sidecar_path(ckpt))
    model = build_model(cfg)
    adapters = L.load_checkpoint(ckpt)
    for a in adapters:
        try:
            w = model.weight(a.target)
        except KeyError:
            raise ValueError(f"checkpoint targets {a.target}, which the model lacks") from None
        if w.shape != (a.d_out, a.d_in):
            raise ValueError(f"{a.target}: adapter {a.d_out}x{a.d_in} vs model weight {w.shape}")
    return cfg, model, adapters


def evaluate(ckpt, dataset: tasks.Dataset, decode_cfg: tasks.DecodeConfig | None = None, merged: bool = False):
    cfg, model, adapters = load_run(ckpt)
    return evaluate_loaded(model, adapters, dataset, decode_cfg or cfg.decode, merged)


def evaluate_loaded(model, adapters, dataset, decode_cfg, merged: bool = False) -> tasks.EvalReport:
    if not merged:
        return tasks.pass_at_1(model, adapters, dataset, decode_cfg)
    m = model.copy()
    a = adapters.copy()
    L.merge(m, a)
    return tasks.pass_at_1(m, None, dataset, decode_cfg)
