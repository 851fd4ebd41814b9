"""Bucketed scalar quantisers, mid-point decoding and the QSGD comparator.

A :class:`Codebook` is the ordered boundary list ``b_0 < ... < b_L``. Bucket
``j`` is the half-open interval ``(b_j, b_{j+1}]``; bucket 0 is also closed at
``b_0`` and values outside ``[b_0, b_L]`` clamp to the end buckets, so
:func:`encode` is total over finite inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import CorruptPayloadError, DegenerateRangeError, InputError


@dataclass(frozen=True, eq=False)
class Codebook:
    boundaries: np.ndarray

    def __post_init__(self):
        b = np.array(self.boundaries, dtype=np.float64).reshape(-1)
        if b.size < 2:
            raise InputError("a codebook needs at least two boundaries")
        if not np.isfinite(b).all():
            raise InputError("codebook boundaries must be finite")
        if not (np.diff(b) > 0).all():
            raise InputError("codebook boundaries must be strictly increasing")
        b.setflags(write=False)
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def merged(cls, values) -> "Codebook":
        """Build from possibly repeated boundaries, dropping duplicates."""
        b = np.unique(np.asarray(values, dtype=np.float64))
        if b.size < 2:
            raise DegenerateRangeError("all boundaries coincide")
        return cls(b)

    @property
    def levels(self) -> int:
        return self.boundaries.size - 1

    @property
    def lo(self) -> float:
        return float(self.boundaries[0])

    @property
    def hi(self) -> float:
        return float(self.boundaries[-1])

    @cached_property
    def midpoints(self) -> np.ndarray:
        b = self.boundaries
        mid = 0.5 * (b[:-1] + b[1:])
        mid.setflags(write=False)
        return mid

    def digest(self) -> str:
        return hashlib.sha256(self.boundaries.tobytes()).hexdigest()[:16]

    def __eq__(self, other) -> bool:
        return isinstance(other, Codebook) and np.array_equal(self.boundaries, other.boundaries)

    def __repr__(self) -> str:
        return f"Codebook(levels={self.levels}, lo={self.lo:.6g}, hi={self.hi:.6g})"


@dataclass(frozen=True, eq=False)
class QuantisedLayerUpdate:
    indices: np.ndarray
    levels: int

    @property
    def width(self) -> int:
        """Bits per serialised index."""
        return index_width(self.levels)


@dataclass(frozen=True, eq=False)
class QsgdLayerUpdate:
    norm: np.float32
    negative: np.ndarray  # one sign bit per coordinate
    magnitudes: np.ndarray  # integer level in [0, s]
    levels: int


@dataclass(frozen=True)
class UpdateStats:
    range: float
    variance: float
    excess_kurtosis: float


def index_width(levels: int) -> int:
    """``ceil(log2 L)``, computed exactly on integers."""
    if levels < 1:
        raise InputError("levels must be >= 1")
    return (levels - 1).bit_length()


def bu_codebook(lo: float, hi: float, levels: int) -> Codebook:
    """Equal-width buckets over ``[lo, hi]``."""
    if levels < 1:
        raise InputError("levels must be >= 1")
    lo, hi = float(lo), float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise InputError("range must be finite")
    if not lo < hi:
        raise DegenerateRangeError(f"empty range [{lo}, {hi}]")
    b = lo + np.arange(levels + 1, dtype=np.float64) * ((hi - lo) / levels)
    b[0], b[-1] = lo, hi
    return Codebook.merged(b)


def bq_codebook(samples, levels: int) -> Codebook:
    """Equal-mass buckets from linear-interpolation empirical quantiles.

    Boundary ``j`` is the ``j/L`` quantile with ``h = (n-1) p``. Coincident
    quantiles (mass piled on one value) are merged, so the returned codebook can
    have fewer than ``levels`` buckets.
    """
    if levels < 1:
        raise InputError("levels must be >= 1")
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise InputError("no samples")
    if not np.isfinite(x).all():
        raise InputError("samples must be finite")
    lo, hi = x.min(), x.max()
    if lo == hi:
        raise DegenerateRangeError("all samples are equal")
    q = np.quantile(x, np.arange(levels + 1) / levels, method="linear")
    q[0], q[-1] = lo, hi
    # interpolation can leave tiny non-monotone wiggles between equal samples
    q = np.maximum.accumulate(q)
    return Codebook.merged(q)


def encode(values, cb: Codebook) -> QuantisedLayerUpdate:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if np.isnan(v).any():
        raise InputError("cannot encode NaN")
    idx = np.searchsorted(cb.boundaries, v, side="left") - 1
    np.clip(idx, 0, cb.levels - 1, out=idx)
    return QuantisedLayerUpdate(idx.astype(np.uint32), cb.levels)


def decode(q: QuantisedLayerUpdate, cb: Codebook) -> np.ndarray:
    """Mid-point reconstruction, returned in float64."""
    return decode_with_table(q, cb.midpoints)


def decode_with_table(q: QuantisedLayerUpdate, table: np.ndarray) -> np.ndarray:
    """Look up reconstruction values; ``table[j]`` is the value for index ``j``."""
    if q.levels != len(table):
        raise CorruptPayloadError(f"payload has {q.levels} levels, codebook has {len(table)}")
    idx = np.asarray(q.indices)
    if idx.size and int(idx.max()) >= q.levels:
        raise CorruptPayloadError(f"index {int(idx.max())} out of range for {q.levels} levels")
    return np.asarray(table, dtype=np.float64)[idx]


def qsgd_encode(values, levels: int, rng) -> QsgdLayerUpdate:
    """Stochastic rounding of ``s |u_i| / ||u||`` to the integer grid ``0..s``.

    ``rng`` is a seed or a numpy Generator. The norm is rounded to float32 first
    and that same value scales both encoding and decoding, which keeps the
    decoded vector unbiased with respect to what is actually transmitted.
    """
    if levels < 1:
        raise InputError("levels must be >= 1")
    rng = np.random.default_rng(rng)
    u = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.isfinite(u).all():
        raise InputError("cannot encode non-finite values")
    norm = np.float32(np.linalg.norm(u))
    negative = u < 0
    if norm == 0:
        return QsgdLayerUpdate(np.float32(0.0), negative, np.zeros(u.size, np.uint32), levels)
    scaled = np.minimum(levels * np.abs(u) / np.float64(norm), levels)
    low = np.floor(scaled)
    up = rng.random(u.size) < (scaled - low)
    mags = (low + up).astype(np.uint32)
    return QsgdLayerUpdate(norm, negative, mags, levels)


def qsgd_decode(q: QsgdLayerUpdate, levels: int) -> np.ndarray:
    if q.levels != levels:
        raise CorruptPayloadError(f"payload levels {q.levels} != {levels}")
    mags = np.asarray(q.magnitudes)
    if mags.size and int(mags.max()) > levels:
        raise CorruptPayloadError(f"magnitude {int(mags.max())} exceeds {levels}")
    sign = np.where(q.negative, -1.0, 1.0)
    return sign * np.float64(q.norm) * mags / levels


def update_stats(values) -> UpdateStats:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise InputError("empty vector")
    centred = v - v.mean()
    m2 = float(np.mean(centred ** 2))
    m4 = float(np.mean(centred ** 4))
    kurt = m4 / (m2 * m2) - 3.0 if m2 > 0 else 0.0
    return UpdateStats(range=float(v.max() - v.min()), variance=m2, excess_kurtosis=kurt)
