"""AdamW, clipped-curvature Sophia, Gauss-Newton-Bartlett curvature estimates,
cosine schedule.

Parameters, gradients and optimizer buffers are ``dict[str, ndarray]`` keyed
by parameter name. Steps update ``params`` in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc


def _check_shapes(params, grads):
    for k, p in params.items():
        if k not in grads:
            raise ValueError(f"missing gradient for {k}")
        if grads[k].shape != p.shape:
            raise ValueError(f"gradient shape {grads[k].shape} != parameter shape {p.shape} for {k}")


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params, grads, state: AdamWState, lr: float) -> dict[str, np.ndarray]:
    """One decoupled-decay Adam step; returns the applied per-parameter deltas."""
    _check_shapes(params, grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    deltas = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = -lr * ((m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p)
        p += step
        deltas[k] = step
    return deltas


@dataclass
class SophiaState:
    beta1: float = 0.965
    beta2: float = 0.99
    gamma: float = 0.01
    eps: float = 1e-12
    hessian_interval: int = 10
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    h: dict[str, np.ndarray] = field(default_factory=dict)

    def hessian_due(self) -> bool:
        """Whether the upcoming step should refresh ``h`` first."""
        return self.t % self.hessian_interval == 0


def sophia_update(m: np.ndarray, h: np.ndarray, lr: float, gamma: float, eps: float) -> np.ndarray:
    """``-lr * clip(m / max(gamma h, eps), 1)``, elementwise."""
    ratio = m / np.maximum(gamma * h, eps)
    return -lr * np.clip(ratio, -1.0, 1.0)


def update_hessian(state: SophiaState, estimate: dict[str, np.ndarray]) -> None:
    b2 = state.beta2
    for k, e in estimate.items():
        h = state.h.setdefault(k, np.zeros_like(e))
        h *= b2
        h += (1.0 - b2) * e


def sophia_step(params, grads, state: SophiaState, lr: float) -> dict[str, np.ndarray]:
    """EMA the momentum (no bias correction) and apply the clipped update."""
    _check_shapes(params, grads)
    state.t += 1
    b1 = state.beta1
    deltas = {}
    for k, p in params.items():
        m = state.m.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * grads[k]
        h = state.h.setdefault(k, np.zeros_like(p))
        step = sophia_update(m, h, lr, state.gamma, state.eps)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p += step
        deltas[k] = step
    return deltas


# ---------------------------------------------------------------- curvature


def gnb_estimate(logits: np.ndarray, backward_fn, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Gauss-Newton-Bartlett diagonal from ``m x v`` logits.

    Labels are drawn from the model's own softmax, ``backward_fn`` maps the
    mean-loss logit gradient to parameter gradients ``g``, and the estimate
    is ``m * g * g``.
    """
    m = logits.shape[0]
    probs = tc.softmax_rows(logits)
    u = rng.random((m, 1))
    labels = (probs.cumsum(axis=1) < u).sum(axis=1)
    labels = np.minimum(labels, logits.shape[1] - 1)
    _, dlogits = tc.cross_entropy(logits, labels)
    grads = backward_fn(dlogits)
    return {k: m * g * g for k, g in grads.items()}


def estimate_hessian_diag(model, adapters, batch, rng, loss_mask=None) -> dict[str, np.ndarray]:
    """Curvature estimate for the adapter parameters on one token batch.

    ``batch`` is a ``[b, T]`` input array; ``loss_mask`` selects the
    positions that enter the loss (all by default).
    """
    from .model import backward, forward

    tokens = np.asarray(batch)
    if tokens.size == 0:
        raise ValueError("batch must be nonempty")
    logits, cache = forward(model, tokens, adapters)
    V = logits.shape[-1]
    mask = np.ones(tokens.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    rows = logits[mask]

    def back(drows):
        full = np.zeros_like(logits)
        full[mask] = drows
        g = backward(model, cache, full, adapters, need_base=False)
        names = adapters.params().keys()
        return {k: g[k] for k in names}

    return gnb_estimate(rows.reshape(-1, V), back, rng)


# ---------------------------------------------------------------- schedule


@dataclass
class CosineSchedule:
    lr_max: float = 2e-4
    lr_min: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps ({self.warmup_steps}) <= total_steps ({self.total_steps})")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.lr_max * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    progress = 1.0 if span == 0 else (step - s.warmup_steps) / span
    return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads) -> float:
    if not grads:
        raise ValueError("empty gradient set")
    # fixed order: sorted names, so the result is independent of dict order
    total = 0.0
    for k in sorted(grads):
        g = grads[k]
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


# ---------------------------------------------------------------- persistence


def save_state(state, path) -> None:
    arrays = {}
    for kind in ("m", "v", "h"):
        for k, a in getattr(state, kind, {}).items():
            arrays[f"{kind}/{k}"] = a
    scalars = {k: v for k, v in vars(state).items() if k not in ("m", "v", "h")}
    arrays["__scalars__"] = np.array(repr(sorted(scalars.items())))
    arrays["__kind__"] = np.array(type(state).__name__)
    np.savez(path, **arrays)


def load_state(path):
    import ast

    with np.load(path, allow_pickle=False) as z:
        kind = str(z["__kind__"])
        cls = {"AdamWState": AdamWState, "SophiaState": SophiaState}[kind]
        state = cls(**dict(ast.literal_eval(str(z["__scalars__"]))))
        for name in z.files:
            if "/" in name:
                buf, key = name.split("/", 1)
                getattr(state, buf)[key] = z[name].copy()
    return state
