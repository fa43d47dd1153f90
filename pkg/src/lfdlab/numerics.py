"""Numeric kernels used by the analysis and decoding code.

Everything here reduces in float64 and works along the last axis, so a
batch of vectors can be passed as a 2-D array. Logarithms are natural, which
bounds the Jensen-Shannon divergence by ln 2.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (
    AllNegInfError,
    InvalidDistributionError,
    LengthMismatchError,
    RankOutOfRangeError,
    ZeroVectorError,
)

LN2 = math.log(2.0)


def _as_logits(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise AllNegInfError("empty logit vector")
    if np.isnan(x).any() or np.isposinf(x).any():
        raise ValueError("logits must be finite or -inf")
    if (~np.isfinite(x)).all(axis=-1).any():
        raise AllNegInfError("every entry is -inf")
    return x


def softmax(x) -> np.ndarray:
    """Max-subtracted softmax. ``-inf`` entries map to exactly 0."""
    x = _as_logits(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x) -> np.ndarray:
    x = _as_logits(x)
    mx = x.max(axis=-1, keepdims=True)
    z = x - mx
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def check_distribution(p, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise InvalidDistributionError("empty distribution")
    if not np.isfinite(p).all() or (p < 0).any():
        raise InvalidDistributionError("entries must be finite and non-negative")
    if (np.abs(p.sum(axis=-1) - 1.0) > atol).any():
        raise InvalidDistributionError("entries must sum to 1")
    return p


def _kl_to_mixture(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    # 0 * log 0 := 0; m > 0 wherever p > 0
    live = p > 0
    safe_m = np.where(live, m, 1.0)
    safe_p = np.where(live, p, 1.0)
    return np.where(live, p * np.log(safe_p / safe_m), 0.0).sum(axis=-1)


def jsd(p, q):
    """Jensen-Shannon divergence in nats, in ``[0, ln 2]``.

    Symmetric bit-for-bit: swapping the arguments only swaps the operands of
    commutative float additions.
    """
    p = check_distribution(p)
    q = check_distribution(q)
    if p.shape != q.shape:
        raise LengthMismatchError(f"shapes differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    out = 0.5 * (_kl_to_mixture(p, m) + _kl_to_mixture(q, m))
    out = np.clip(out, 0.0, LN2)
    return float(out) if out.ndim == 0 else out


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatchError(f"lengths differ: {a.size} vs {b.size}")
    aa = float(a @ a)
    bb = float(b @ b)
    if aa == 0.0 or bb == 0.0:
        raise ZeroVectorError("cosine of a zero vector is undefined")
    # sqrt(aa * bb) rather than norm(a) * norm(b): exact 1.0 when a is b
    val = float(a @ b) / math.sqrt(aa * bb)
    return min(1.0, max(-1.0, val))


def kth_max(x, s: int) -> float:
    """The ``s``-th largest finite entry (``s=1`` is the maximum)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    finite = x[np.isfinite(x)]
    n = finite.size
    if s < 1 or s > n:
        raise RankOutOfRangeError(f"rank {s} outside 1..{n}")
    return float(np.partition(finite, n - s)[n - s])


def mask_positions(x, positions) -> np.ndarray:
    """Copy of ``x`` with ``positions`` set to ``-inf``."""
    out = np.array(x, dtype=np.float64, copy=True)
    idx = np.asarray(list(positions), dtype=np.int64)
    if idx.size:
        out[..., idx] = -np.inf
    return out


def restrict(p, keep) -> np.ndarray:
    """Restrict a distribution to the ``keep`` mask and renormalize."""
    p = np.asarray(p, dtype=np.float64)
    keep = np.asarray(keep, dtype=bool)
    sub = p[..., keep]
    total = sub.sum(axis=-1, keepdims=True)
    if (total <= 0).any():
        raise InvalidDistributionError("restriction carries zero mass")
    return sub / total
