"""Real-signal Fourier transforms and the frequency-weighted adapter penalty.

Conventions
-----------
* Forward transform is unnormalized: ``X_k = sum_j x_j exp(-2 pi i j k / n)``;
  the inverse carries the ``1/n``.
* A real signal of length ``n`` is represented by its half spectrum,
  bins ``k = 0 .. n // 2``. Interior bins stand in for themselves and their
  conjugate mirror, so they carry multiplicity 2; DC and (for even ``n``)
  Nyquist carry multiplicity 1.
* Matrices are flattened row-major before transforming.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

# ---------------------------------------------------------------- complex FFT


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@lru_cache(maxsize=64)
def _bit_reverse_perm(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(m: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(m // 2) / m)


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    n = x.shape[-1]
    lead = x.shape[:-1]
    a = x[..., _bit_reverse_perm(n)].astype(np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        tw = _twiddles(m)
        blocks = a.reshape(*lead, n // m, m)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        a = np.concatenate((even + odd, even - odd), axis=-1).reshape(*lead, n)
        m *= 2
    return a


def _bluestein(x: np.ndarray) -> np.ndarray:
    """Arbitrary-length DFT as a chirp-z convolution of power-of-two length."""
    n = x.shape[-1]
    j = np.arange(n)
    # j^2 mod 2n keeps the chirp phase exact for large n
    chirp = np.exp(-1j * np.pi * ((j * j) % (2 * n)) / n)
    m = 1 << (2 * n - 2).bit_length()
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1 :] = np.conj(chirp[1:])[::-1]
    conv = _ifft_pow2(_fft_pow2(a) * _fft_pow2(b))
    return conv[..., :n] * chirp


def _ifft_pow2(X: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(X))) / X.shape[-1]


def fft(x) -> np.ndarray:
    """Complex DFT along the last axis, any length >= 1."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n < 1:
        raise ValueError("cannot transform an empty signal")
    if _is_pow2(n):
        return _fft_pow2(x)
    return _bluestein(x)


def ifft(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    return np.conj(fft(np.conj(X))) / X.shape[-1]


# ---------------------------------------------------------------- real transforms


@dataclass
class Spectrum:
    n: int
    bins: np.ndarray  # complex, length n // 2 + 1 (last axis)

    def check(self, atol: float = 1e-9) -> None:
        if self.bins.shape[-1] != self.n // 2 + 1:
            raise ValueError(f"spectrum of n={self.n} needs {self.n // 2 + 1} bins, got {self.bins.shape[-1]}")
        scale = max(1.0, float(np.abs(self.bins).max(initial=0.0)))
        ends = [0] + ([self.n // 2] if self.n % 2 == 0 else [])
        for k in ends:
            if np.abs(self.bins[..., k].imag).max() > atol * scale:
                raise ValueError(f"bin {k} of a real signal must have zero imaginary part")


def _check_signal(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 0 or w.shape[-1] < 1:
        raise ValueError("signal must have length >= 1")
    return w


def dft_naive(w) -> Spectrum:
    """Half spectrum straight from the O(n^2) definition."""
    w = _check_signal(w)
    n = w.shape[-1]
    k = np.arange(n // 2 + 1)[:, None]
    j = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * ((j * k) % n) / n)
    return Spectrum(n, w @ basis.T)


def rfft(w) -> Spectrum:
    w = _check_signal(w)
    n = w.shape[-1]
    return Spectrum(n, fft(w)[..., : n // 2 + 1])


def hermitian_extend(spec: Spectrum) -> np.ndarray:
    n = spec.n
    tail = np.conj(spec.bins[..., 1 : (n + 1) // 2][..., ::-1])
    return np.concatenate((spec.bins, tail), axis=-1)


def irfft(spec: Spectrum) -> np.ndarray:
    spec.check()
    full = hermitian_extend(spec)
    return ifft(full).real


def multiplicity(n: int) -> np.ndarray:
    mult = np.full(n // 2 + 1, 2.0)
    mult[0] = 1.0
    if n % 2 == 0:
        mult[-1] = 1.0
    return mult


def power_spectrum(w) -> np.ndarray:
    spec = rfft(w)
    return multiplicity(spec.n) * np.abs(spec.bins) ** 2


def _cut_index(n: int, T: float) -> int:
    # round first so e.g. 10 * 0.3 does not ceil to 4
    return math.ceil(round(n * T, 9))


def high_freq_fraction(w, T: float) -> float:
    """Share of spectral power at bins ``k >= ceil(n T)``."""
    ps = power_spectrum(w)
    total = ps.sum()
    if total == 0.0:
        raise ValueError("high-frequency fraction is undefined for an all-zero signal")
    n = np.asarray(w).shape[-1]
    return float(ps[_cut_index(n, T) :].sum() / total)


# ---------------------------------------------------------------- penalty


class ApplyTo(str, Enum):
    FACTORS_SEPARATELY = "factors_separately"
    DELTA_PRODUCT = "delta_product"


class Reduction(str, Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass
class FourierRegConfig:
    lam: float = 0.02
    threshold: float = 0.5
    phi_low: float = 1.0
    phi_high: float = 0.1
    apply_to: ApplyTo = ApplyTo.FACTORS_SEPARATELY
    reduction: Reduction = Reduction.SUM

    def __post_init__(self):
        self.apply_to = ApplyTo(self.apply_to)
        self.reduction = Reduction(self.reduction)
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.threshold <= 1:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if not (math.isfinite(self.phi_low) and math.isfinite(self.phi_high)):
            raise ValueError("phi values must be finite")


def phi(k, n: int, T: float, phi_low: float, phi_high: float):
    if T <= 0:
        raise ValueError(f"threshold T must be positive, got {T}")
    ramp = np.minimum(1.0, np.asarray(k, dtype=float) / (n * T))
    out = phi_low + (phi_high - phi_low) * ramp
    return float(out) if np.ndim(out) == 0 else out


def rho(k, n: int, T: float, phi_low: float, phi_high: float):
    return 1.0 - phi(k, n, T, phi_low, phi_high)


@dataclass
class PenaltyWeights:
    n: int
    rho: np.ndarray
    mult: np.ndarray


def penalty_weights(n: int, cfg: FourierRegConfig) -> PenaltyWeights:
    k = np.arange(n // 2 + 1)
    return PenaltyWeights(n, rho(k, n, cfg.threshold, cfg.phi_low, cfg.phi_high), multiplicity(n))


def fourier_loss(w, cfg: FourierRegConfig) -> float:
    spec = rfft(w)
    pw = penalty_weights(spec.n, cfg)
    loss = float((pw.mult * pw.rho * np.abs(spec.bins) ** 2).sum(axis=-1).sum())
    if cfg.reduction is Reduction.MEAN:
        loss /= spec.n
    return loss


def fourier_loss_and_grad(w, cfg: FourierRegConfig) -> tuple[float, np.ndarray]:
    """Loss and its closed-form gradient from one transform.

    The loss is the real quadratic form ``w^T F^H diag(rho) F w``, so the
    gradient is ``2 n * irfft(rho * rfft(w))``.
    """
    spec = rfft(w)
    n = spec.n
    pw = penalty_weights(n, cfg)
    loss = float((pw.mult * pw.rho * np.abs(spec.bins) ** 2).sum())
    g = 2.0 * n * ifft(hermitian_extend(Spectrum(n, pw.rho * spec.bins))).real
    if cfg.reduction is Reduction.MEAN:
        loss /= n
        g /= n
    return loss, g


def fourier_loss_grad(w, cfg: FourierRegConfig) -> np.ndarray:
    return fourier_loss_and_grad(w, cfg)[1]


def regularizer_term(lora_set, cfg: FourierRegConfig) -> tuple[float, dict[str, np.ndarray]]:
    """``lambda * L_fourier`` summed over adapters, with gradients keyed like
    ``LoraSet.params()``."""
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for a in lora_set:
        if cfg.apply_to is ApplyTo.FACTORS_SEPARATELY:
            for tag, mat in (("A", a.A), ("B", a.B)):
                flat = mat.reshape(-1)
                if cfg.lam == 0.0:
                    grads[f"{a.target}.{tag}"] = np.zeros_like(mat)
                    continue
                loss, g = fourier_loss_and_grad(flat, cfg)
                total += loss
                grads[f"{a.target}.{tag}"] = cfg.lam * g.reshape(mat.shape)
        else:
            if cfg.lam == 0.0:
                grads[f"{a.target}.A"] = np.zeros_like(a.A)
                grads[f"{a.target}.B"] = np.zeros_like(a.B)
                continue
            s = a.scale
            delta = s * (a.B @ a.A)
            loss, gW = fourier_loss_and_grad(delta.reshape(-1), cfg)
            total += loss
            gW = gW.reshape(delta.shape)
            grads[f"{a.target}.B"] = cfg.lam * s * (gW @ a.A.T)
            grads[f"{a.target}.A"] = cfg.lam * s * (a.B.T @ gW)
    return cfg.lam * total, grads
