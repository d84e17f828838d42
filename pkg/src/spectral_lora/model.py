"""Tiny Llama-style decoder with explicit backward and decoding strategies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor_core as tc
from .lora import LoraSet, _delta_bwd, _delta_fwd

PROJ_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")


@dataclass
class ModelConfig:
    vocab_size: int = 40
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 1
    d_ff: int = 64
    max_seq: int = 48

    def __post_init__(self):
        for name, val in asdict(self).items():
            if int(val) < 1:
                raise ValueError(f"{name} must be >= 1, got {val}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


def _proj_shape(cfg: ModelConfig, name: str) -> tuple[int, int]:
    d, f = cfg.d_model, cfg.d_ff
    return {"gate_proj": (f, d), "up_proj": (f, d), "down_proj": (d, f)}.get(name, (d, d))


@dataclass
class DecoderModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "DecoderModel":
        # Base weights are frozen during adapter training, so they are scaled
        # to give O(1) activations and logits rather than the usual small init.
        d = config.d_model
        p = {
            "tok_emb": rng.normal(0.0, 1.0, (config.vocab_size, d)),
            "pos_emb": rng.normal(0.0, 1.0, (config.max_seq, d)),
        }
        for i in range(config.n_layers):
            p[f"layer.{i}.attn_norm"] = np.ones(d)
            p[f"layer.{i}.mlp_norm"] = np.ones(d)
            for name in PROJ_NAMES:
                d_out, d_in = _proj_shape(config, name)
                p[f"layer.{i}.{name}"] = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_out, d_in))
        p["final_norm"] = np.ones(d)
        p["head"] = rng.normal(0.0, 1.0 / math.sqrt(d), (config.vocab_size, d))
        return cls(config, p)

    def weight(self, path: str) -> np.ndarray:
        try:
            return self.params[path]
        except KeyError:
            raise KeyError(f"model has no parameter {path!r}") from None

    def copy(self) -> "DecoderModel":
        return DecoderModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def next_token_logits(self, tokens, adapters: LoraSet | None = None) -> np.ndarray:
        logits, _ = forward(self, np.asarray(tokens)[None, :], adapters)
        return logits[0, -1]


@dataclass
class ForwardCache:
    tokens: np.ndarray
    layers: list
    final: tuple
    h_final: np.ndarray


def _proj(model, adapters, path, x, training, rng):
    y = tc.linear_fwd(x, model.params[path])
    saved = None
    if adapters is not None and not adapters.merged:
        a = adapters.get(path)
        if a is not None:
            dy, saved = _delta_fwd(a, x, training, rng)
            y = y + dy
    return y, (x, saved)


def _proj_bwd(model, adapters, path, dy, saved, grads, need_base):
    x, asaved = saved
    dx, dw = tc.linear_bwd(dy, x, model.params[path], need_dw=need_base)
    if need_base:
        grads[path] = dw
    if asaved is not None:
        dxa, dA, dB = _delta_bwd(adapters.get(path), dy, asaved)
        dx = dx + dxa
        grads[f"{path}.A"] = dA
        grads[f"{path}.B"] = dB
    return dx


def forward(model: DecoderModel, tokens, adapters: LoraSet | None = None, training: bool = False, rng=None):
    """Logits ``[batch, seq, vocab]`` for a batch of equal-length index sequences."""
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be batch x seq, got shape {tokens.shape}")
    bsz, T = tokens.shape
    if T > cfg.max_seq:
        raise ValueError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    p = model.params
    x = tc.embedding_fwd(p["tok_emb"], tokens) + p["pos_emb"][:T]
    H = cfg.n_heads
    dh = cfg.d_model // H
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    layers = []
    for i in range(cfg.n_layers):
        pre = f"layer.{i}."
        c = {}
        a_in, c["n1"] = tc.rmsnorm_fwd(x, p[pre + "attn_norm"])
        q, c["q"] = _proj(model, adapters, pre + "q_proj", a_in, training, rng)
        k, c["k"] = _proj(model, adapters, pre + "k_proj", a_in, training, rng)
        v, c["v"] = _proj(model, adapters, pre + "v_proj", a_in, training, rng)
        qh = q.reshape(bsz, T, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(bsz, T, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(bsz, T, H, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh)
        scores = np.where(causal, -np.inf, scores)
        P = tc.softmax_rows(scores)
        ctx = (P @ vh).transpose(0, 2, 1, 3).reshape(bsz, T, cfg.d_model)
        c["attn"] = (qh, kh, vh, P)
        o, c["o"] = _proj(model, adapters, pre + "o_proj", ctx, training, rng)
        x = x + o
        m_in, c["n2"] = tc.rmsnorm_fwd(x, p[pre + "mlp_norm"])
        gt, c["gate"] = _proj(model, adapters, pre + "gate_proj", m_in, training, rng)
        up, c["up"] = _proj(model, adapters, pre + "up_proj", m_in, training, rng)
        sg, sig = tc.silu_fwd(gt)
        c["silu"] = (gt, sig, sg, up)
        dn, c["down"] = _proj(model, adapters, pre + "down_proj", sg * up, training, rng)
        x = x + dn
        layers.append(c)
    hf, nf = tc.rmsnorm_fwd(x, p["final_norm"])
    logits = tc.linear_fwd(hf, p["head"])
    return logits, ForwardCache(tokens, layers, nf, hf)


def backward(model: DecoderModel, cache: ForwardCache, dlogits, adapters: LoraSet | None = None, need_base: bool = True):
    """Gradients keyed like ``model.params`` (base) and ``LoraSet.params()`` (adapters)."""
    cfg = model.config
    p = model.params
    tokens = cache.tokens
    bsz, T = tokens.shape
    if dlogits.shape != (bsz, T, cfg.vocab_size):
        raise ValueError(f"dlogits shape {dlogits.shape} does not match cached batch {(bsz, T, cfg.vocab_size)}")
    H = cfg.n_heads
    dh = cfg.d_model // H
    g: dict[str, np.ndarray] = {}
    dh_f, dw = tc.linear_bwd(dlogits, cache.h_final, p["head"], need_dw=need_base)
    dx, dgf = tc.rmsnorm_bwd(dh_f, p["final_norm"], cache.final)
    if need_base:
        g["head"] = dw
        g["final_norm"] = dgf
    for i in reversed(range(cfg.n_layers)):
        pre = f"layer.{i}."
        c = cache.layers[i]
        d_mid = _proj_bwd(model, adapters, pre + "down_proj", dx, c["down"], g, need_base)
        gt, sig, sg, up = c["silu"]
        d_up = d_mid * sg
        d_gt = tc.silu_bwd(d_mid * up, gt, sig)
        dm = _proj_bwd(model, adapters, pre + "gate_proj", d_gt, c["gate"], g, need_base)
        dm = dm + _proj_bwd(model, adapters, pre + "up_proj", d_up, c["up"], g, need_base)
        dxn, dg2 = tc.rmsnorm_bwd(dm, p[pre + "mlp_norm"], c["n2"])
        dx = dx + dxn
        dctx = _proj_bwd(model, adapters, pre + "o_proj", dx, c["o"], g, need_base)
        qh, kh, vh, P = c["attn"]
        dctx = dctx.reshape(bsz, T, H, dh).transpose(0, 2, 1, 3)
        dP = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = P.transpose(0, 1, 3, 2) @ dctx
        ds = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
        dqh = ds @ kh
        dkh = ds.transpose(0, 1, 3, 2) @ qh

        def merge_heads(t):
            return t.transpose(0, 2, 1, 3).reshape(bsz, T, cfg.d_model)

        da = _proj_bwd(model, adapters, pre + "q_proj", merge_heads(dqh), c["q"], g, need_base)
        da = da + _proj_bwd(model, adapters, pre + "k_proj", merge_heads(dkh), c["k"], g, need_base)
        da = da + _proj_bwd(model, adapters, pre + "v_proj", merge_heads(dvh), c["v"], g, need_base)
        dxn, dg1 = tc.rmsnorm_bwd(da, p[pre + "attn_norm"], c["n1"])
        dx = dx + dxn
        if need_base:
            g[pre + "mlp_norm"] = dg2
            g[pre + "attn_norm"] = dg1
    if need_base:
        g["tok_emb"] = tc.embedding_bwd(dx, tokens, cfg.vocab_size)
        dpos = np.zeros_like(p["pos_emb"])
        dpos[:T] = dx.sum(axis=0)
        g["pos_emb"] = dpos
    return g


# ---------------------------------------------------------------- decoding


def _argmax(logits: np.ndarray) -> int:
    return int(np.argmax(logits))  # first occurrence: ties go to the lowest index


def _room(model, seq) -> bool:
    cfg = getattr(model, "config", None)
    return cfg is None or len(seq) < cfg.max_seq


def greedy_decode(model, adapters, prompt, max_new: int, eos: int | None = None) -> list[int]:
    """Generated tokens only (prompt excluded); includes ``eos`` if emitted."""
    seq = list(prompt)
    if not seq:
        raise ValueError("prompt must be nonempty")
    out = []
    for _ in range(max_new):
        if not _room(model, seq):
            break
        tok = _argmax(model.next_token_logits(seq, adapters))
        seq.append(tok)
        out.append(tok)
        if tok == eos:
            break
    return out


def greedy_decode_batch(model: DecoderModel, adapters, prompts, max_new: int, eos: int | None = None, pad: int = 0):
    """``greedy_decode`` for many prompts at once via right padding.

    Causal masking makes each row's last real position blind to the padding.
    """
    seqs = [list(p) for p in prompts]
    if any(not s for s in seqs):
        raise ValueError("prompts must be nonempty")
    outs: list[list[int]] = [[] for _ in seqs]
    active = list(range(len(seqs)))
    for _ in range(max_new):
        active = [i for i in active if len(seqs[i]) < model.config.max_seq]
        if not active:
            break
        T = max(len(seqs[i]) for i in active)
        batch = np.full((len(active), T), pad, dtype=np.int64)
        for r, i in enumerate(active):
            batch[r, : len(seqs[i])] = seqs[i]
        logits, _ = forward(model, batch, adapters)
        still = []
        for r, i in enumerate(active):
            tok = _argmax(logits[r, len(seqs[i]) - 1])
            seqs[i].append(tok)
            outs[i].append(tok)
            if tok != eos:
                still.append(i)
        active = still
    return outs


def nucleus_probs(logits: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    """Renormalized sampling distribution after temperature and top-p truncation."""
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    if temperature <= 0:
        raise ValueError("temperature must be positive here; 0 means greedy")
    probs = tc.softmax_rows(np.asarray(logits, dtype=float) / temperature)
    order = np.lexsort((np.arange(len(probs)), -probs))  # descending prob, ties by index
    csum = np.cumsum(probs[order])
    keep = int(np.searchsorted(csum, top_p - 1e-15)) + 1
    out = np.zeros_like(probs)
    kept = order[: min(keep, len(order))]
    out[kept] = probs[kept]
    return out / out.sum()


def sample_token(logits, temperature: float, top_p: float, rng: np.random.Generator) -> int:
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    if temperature == 0:
        return _argmax(np.asarray(logits))
    probs = nucleus_probs(logits, temperature, top_p)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    nz = np.flatnonzero(probs)
    return int(min(max(idx, nz[0]), nz[-1]))


def sample_decode(model, adapters, prompt, temperature: float, top_p: float, rng, max_new: int, eos: int | None = None):
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    if temperature == 0:
        return greedy_decode(model, adapters, prompt, max_new, eos)
    seq = list(prompt)
    out = []
    for _ in range(max_new):
        if not _room(model, seq):
            break
        tok = sample_token(model.next_token_logits(seq, adapters), temperature, top_p, rng)
        seq.append(tok)
        out.append(tok)
        if tok == eos:
            break
    return out


def sequence_score(model, adapters, prompt, generated) -> float:
    """Length-normalized log-probability of ``generated`` given ``prompt``."""
    if not generated:
        return 0.0
    seq = list(prompt)
    total = 0.0
    for tok in generated:
        total += float(tc.log_softmax_rows(model.next_token_logits(seq, adapters))[tok])
        seq.append(tok)
    return total / len(generated)


def beam_decode(model, adapters, prompt, beam_size: int, max_new: int, eos: int | None = None) -> list[int]:
    """Beam search ranked by cumulative log-prob; final pick by length-normalized score.

    Hypotheses that emit ``eos`` leave the beam and are kept as finished.
    The best finished one wins; if none finished, the best survivor does.
    The greedy hypothesis is always a candidate, so the result never ranks
    below greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be nonempty")
    alive: list[tuple[float, list[int]]] = [(0.0, [])]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_new):
        cands = []
        for score, gen in alive:
            if not _room(model, prompt + gen):
                continue
            logp = tc.log_softmax_rows(model.next_token_logits(prompt + gen, adapters))
            for tok in range(len(logp)):
                cands.append((score + float(logp[tok]), gen + [tok]))
        if not cands:
            break
        # stable sort keeps parent order then token index on ties
        cands.sort(key=lambda c: -c[0])
        alive = []
        for score, gen in cands[:beam_size]:
            if gen[-1] == eos:
                finished.append((score, gen))
            else:
                alive.append((score, gen))
        if not alive:
            break
    if beam_size > 1:
        greedy = greedy_decode(model, adapters, prompt, max_new, eos)
        if greedy:
            entry = (sequence_score(model, adapters, prompt, greedy) * len(greedy), greedy)
            (finished if greedy[-1] == eos else alive).append(entry)
    pool = finished or alive
    if not pool:
        return []
    return max(pool, key=lambda c: c[0] / len(c[1]))[1]
