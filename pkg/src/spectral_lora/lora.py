"""Low-rank adapters: creation, delta path, merge/unmerge and checkpoint I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .tensor_core import DTYPE, DimensionError

if TYPE_CHECKING:
    from .model import DecoderModel

PRESETS: dict[str, tuple[str, ...]] = {
    "attention_mlp": ("q_proj", "v_proj", "down_proj", "up_proj"),
    "mlp_only": ("gate_proj", "up_proj", "down_proj"),
    "attention_only": ("q_proj", "v_proj"),
}

MAGIC = b"SLRA"
VERSION = 1
INIT_STD = 0.02


class ScalingMode(IntEnum):
    RAW_ALPHA = 0
    ALPHA_OVER_RANK = 1

    @classmethod
    def parse(cls, value) -> "ScalingMode":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(value)


class AdapterStateError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


@dataclass
class LoraAdapter:
    target: str
    B: np.ndarray  # d_out x r
    A: np.ndarray  # r x d_in
    alpha: float
    dropout_p: float = 0.0
    scaling_mode: ScalingMode = ScalingMode.ALPHA_OVER_RANK

    def __post_init__(self):
        self.scaling_mode = ScalingMode.parse(self.scaling_mode)
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise DimensionError(f"{self.target}: B {self.B.shape} and A {self.A.shape} do not chain")
        r = self.rank
        if r < 1 or r > min(self.d_out, self.d_in):
            raise ValueError(f"{self.target}: rank {r} outside [1, {min(self.d_out, self.d_in)}]")
        s = self.scale
        if not (np.isfinite(s) and s > 0):
            raise ValueError(f"{self.target}: effective scale must be finite and positive, got {s}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        if self.scaling_mode is ScalingMode.RAW_ALPHA:
            return float(self.alpha)
        return float(self.alpha) / self.rank

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    def n_params(self) -> int:
        return self.rank * (self.d_in + self.d_out)


@dataclass
class LoraSet:
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    merged: bool = False

    def __len__(self):
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters.values())

    def __contains__(self, target):
        return target in self.adapters

    def get(self, target):
        return self.adapters.get(target)

    def add(self, adapter: LoraAdapter) -> None:
        if adapter.target in self.adapters:
            raise ValueError(f"duplicate adapter for {adapter.target}")
        self.adapters[adapter.target] = adapter

    def n_params(self) -> int:
        return sum(a.n_params() for a in self)

    def params(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable matrix (shared memory)."""
        out = {}
        for a in self:
            out[f"{a.target}.A"] = a.A
            out[f"{a.target}.B"] = a.B
        return out

    def copy(self) -> "LoraSet":
        return LoraSet(
            {
                k: LoraAdapter(a.target, a.B.copy(), a.A.copy(), a.alpha, a.dropout_p, a.scaling_mode)
                for k, a in self.adapters.items()
            },
            self.merged,
        )


def init_adapters(
    model: "DecoderModel",
    preset: str,
    r: int,
    alpha: float,
    dropout_p: float,
    rng: np.random.Generator,
    scaling_mode: ScalingMode | str = ScalingMode.ALPHA_OVER_RANK,
) -> LoraSet:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    out = LoraSet()
    for i in range(model.config.n_layers):
        for name in PRESETS[preset]:
            path = f"layer.{i}.{name}"
            w = model.weight(path)
            d_out, d_in = w.shape
            if r > min(d_out, d_in):
                raise ValueError(f"rank {r} exceeds min dimension of {path} {w.shape}")
            A = rng.normal(0.0, INIT_STD, size=(r, d_in))
            B = np.zeros((d_out, r), dtype=DTYPE)
            out.add(LoraAdapter(path, B, A, alpha, dropout_p, scaling_mode))
    return out


# ---------------------------------------------------------------- delta path


def _delta_fwd(adapter: LoraAdapter, x: np.ndarray, training: bool, rng):
    if x.shape[-1] != adapter.d_in:
        raise DimensionError(f"{adapter.target}: input width {x.shape[-1]} != d_in {adapter.d_in}")
    mask = None
    xd = x
    if training and adapter.dropout_p > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = 1.0 - adapter.dropout_p
        mask = (rng.random(x.shape) < keep) / keep
        xd = x * mask
    u = xd @ adapter.A.T
    y = adapter.scale * (u @ adapter.B.T)
    return y, (xd, u, mask)


def _delta_bwd(adapter: LoraAdapter, dy: np.ndarray, saved):
    xd, u, mask = saved
    s = adapter.scale
    du = s * (dy @ adapter.B)
    dB = s * (dy.reshape(-1, dy.shape[-1]).T @ u.reshape(-1, u.shape[-1]))
    dA = du.reshape(-1, du.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
    dx = du @ adapter.A
    if mask is not None:
        dx = dx * mask
    return dx, dA, dB


def delta_forward(adapter: LoraAdapter, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
    """Adapter contribution ``s * B (A dropout(x))`` on activations ``x[..., d_in]``."""
    return _delta_fwd(adapter, x, training, rng)[0]


# ---------------------------------------------------------------- merge


def merge(model: "DecoderModel", lora_set: LoraSet) -> "DecoderModel":
    if lora_set.merged:
        raise AdapterStateError("adapters are already merged")
    for a in lora_set:
        model.weight(a.target)[...] += a.delta_weight()
    lora_set.merged = True
    return model


def unmerge(model: "DecoderModel", lora_set: LoraSet) -> "DecoderModel":
    if not lora_set.merged:
        raise AdapterStateError("adapters are not merged")
    for a in lora_set:
        model.weight(a.target)[...] -= a.delta_weight()
    lora_set.merged = False
    return model


# ---------------------------------------------------------------- checkpoint


def to_bytes(lora_set: LoraSet) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(lora_set))]
    for a in lora_set:
        name = a.target.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(
            struct.pack("<IddBII", a.rank, a.alpha, a.dropout_p, int(a.scaling_mode), a.d_out, a.d_in)
        )
        parts.append(np.ascontiguousarray(a.B, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(a.A, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> LoraSet:
    rd = _Reader(buf)
    if rd.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic bytes; not an adapter checkpoint")
    version, count = rd.unpack("<II")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out = LoraSet()
    for _ in range(count):
        (n,) = rd.unpack("<I")
        try:
            target = rd.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"target path is not UTF-8: {e}") from None
        r, alpha, p, mode, d_out, d_in = rd.unpack("<IddBII")
        if mode not in (0, 1):
            raise CheckpointFormatError(f"{target}: unknown scaling mode {mode}")
        if r < 1 or r > min(d_out, d_in):
            raise CheckpointFormatError(f"{target}: rank {r} inconsistent with shape {d_out}x{d_in}")
        B = np.frombuffer(rd.take(8 * d_out * r), dtype="<f8").astype(DTYPE).reshape(d_out, r)
        A = np.frombuffer(rd.take(8 * r * d_in), dtype="<f8").astype(DTYPE).reshape(r, d_in)
        try:
            out.add(LoraAdapter(target, B, A, alpha, p, ScalingMode(mode)))
        except ValueError as e:
            raise CheckpointFormatError(str(e)) from None
    if rd.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - rd.pos} trailing bytes after last adapter")
    return out


def save_checkpoint(lora_set: LoraSet, path) -> None:
    Path(path).write_bytes(to_bytes(lora_set))


def load_checkpoint(path) -> LoraSet:
    return from_bytes(Path(path).read_bytes())
