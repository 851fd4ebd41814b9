"""Bit packing, payload wire format and the communication cost model.

Cost figures are per client per round. Amortised codebook terms are kept as
exact :class:`fractions.Fraction` values; integer reports take the ceiling.

Wire format of one layer payload (all multi-byte fields little-endian)::

    u32 levels | u32 count | u8 width | u8 flags(bit0 = codebook attached)
    [levels reconstruction values, boundary_bits each]   only if flags & 1
    packed indices, LSB-first, count * width bits, zero padded to a byte

QSGD payloads reuse the header (``levels`` = s, ``width`` = magnitude bits)
followed by a float32 norm, a packed sign bitmap and the packed magnitudes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from .errors import CorruptPayloadError, InputError
from .model import ModelSpec
from .quant import QsgdLayerUpdate, QuantisedLayerUpdate, index_width

FLOAT_BITS = 32
HEADER = struct.Struct("<IIBB")
HEADER_BITS = HEADER.size * 8
FLAG_CODEBOOK = 0x01

Dims = Union[ModelSpec, Sequence[int]]


# --------------------------------------------------------------------------- packing

@dataclass(frozen=True)
class PackedPayload:
    data: bytes
    bit_length: int
    width: int


def pack_indices(indices, width: int) -> PackedPayload:
    """LSB-first packing: index ``i`` occupies bits ``i*width .. i*width+width-1``."""
    if width < 0 or width > 32:
        raise InputError(f"width must be in 0..32, got {width}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << width)):
        raise InputError(f"index does not fit in {width} bits")
    nbits = idx.size * width
    if nbits == 0:
        return PackedPayload(b"", 0, width)
    bits = (idx[:, None] >> np.arange(width, dtype=np.int64)) & 1
    data = np.packbits(bits.astype(np.uint8).reshape(-1), bitorder="little").tobytes()
    return PackedPayload(data, nbits, width)


def unpack_indices(p: PackedPayload, count: int, width: int) -> np.ndarray:
    nbits = count * width
    if count < 0 or width < 0:
        raise InputError("count and width must be non-negative")
    if p.bit_length < nbits or len(p.data) * 8 < nbits:
        raise CorruptPayloadError(f"payload holds {p.bit_length} bits, need {nbits}")
    if nbits == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(p.data, dtype=np.uint8), count=nbits, bitorder="little")
    bits = bits.reshape(count, width).astype(np.int64)
    return (bits << np.arange(width, dtype=np.int64)).sum(axis=1)


# --------------------------------------------------------------------------- wire format

_FLOAT_DTYPES = {16: "<f2", 32: "<f4", 64: "<f8"}


def wire_round(values, boundary_bits: int) -> np.ndarray:
    """Round reconstruction values to the precision they travel at."""
    dt = _FLOAT_DTYPES.get(boundary_bits)
    if dt is None:
        raise InputError(f"boundary precision must be one of {sorted(_FLOAT_DTYPES)}, got {boundary_bits}")
    with np.errstate(over="ignore"):
        out = np.asarray(values, dtype=np.float64).astype(dt).astype(np.float64)
    if not np.isfinite(out).all():
        raise InputError(f"codebook value overflows {boundary_bits}-bit float")
    return out


@dataclass(frozen=True)
class LayerPayload:
    data: bytes
    codebook_bits: int
    index_bits: int

    @property
    def wire_bits(self) -> int:
        """Bits counted by the cost model (header framing excluded)."""
        return self.codebook_bits + self.index_bits


def encode_layer_payload(q: QuantisedLayerUpdate, table=None, boundary_bits: int = 16) -> LayerPayload:
    """Serialise a bucket-quantised layer; ``table`` attaches the codebook."""
    n = int(np.asarray(q.indices).size)
    width = q.width
    flags = 0
    cb = b""
    if table is not None:
        table = np.asarray(table)
        if table.size != q.levels:
            raise InputError(f"codebook has {table.size} values, payload {q.levels} levels")
        flags |= FLAG_CODEBOOK
        cb = wire_round(table, boundary_bits).astype(_FLOAT_DTYPES[boundary_bits]).tobytes()
    packed = pack_indices(q.indices, width)
    data = HEADER.pack(q.levels, n, width, flags) + cb + packed.data
    return LayerPayload(data, len(cb) * 8, packed.bit_length)


def decode_layer_payload(data: bytes, boundary_bits: int = 16):
    """Inverse of :func:`encode_layer_payload`; returns ``(update, table or None)``."""
    if len(data) < HEADER.size:
        raise CorruptPayloadError("payload shorter than header")
    levels, count, width, flags = HEADER.unpack_from(data)
    if levels < 1 or width != index_width(levels):
        raise CorruptPayloadError(f"header width {width} inconsistent with {levels} levels")
    pos = HEADER.size
    table = None
    if flags & FLAG_CODEBOOK:
        nbytes = levels * boundary_bits // 8
        if len(data) < pos + nbytes:
            raise CorruptPayloadError("truncated codebook section")
        table = np.frombuffer(data[pos:pos + nbytes], dtype=_FLOAT_DTYPES[boundary_bits]).astype(np.float64)
        pos += nbytes
    body = data[pos:]
    nbits = count * width
    if len(body) != (nbits + 7) // 8:
        raise CorruptPayloadError(f"index section is {len(body)} bytes, expected {(nbits + 7) // 8}")
    idx = unpack_indices(PackedPayload(body, nbits, width), count, width)
    if count and int(idx.max()) >= levels:
        raise CorruptPayloadError("index exceeds level count")
    return QuantisedLayerUpdate(idx.astype(np.uint32), levels), table


def qsgd_magnitude_width(levels: int) -> int:
    """Bits for a magnitude in ``0..s`` (s+1 symbols)."""
    return index_width(levels + 1)


def encode_qsgd_payload(q: QsgdLayerUpdate) -> LayerPayload:
    n = int(np.asarray(q.magnitudes).size)
    mw = qsgd_magnitude_width(q.levels)
    signs = pack_indices(np.asarray(q.negative, dtype=np.int64), 1)
    mags = pack_indices(q.magnitudes, mw)
    data = (HEADER.pack(q.levels, n, mw, 0) + struct.pack("<f", q.norm)
            + signs.data + mags.data)
    return LayerPayload(data, 0, FLOAT_BITS + signs.bit_length + mags.bit_length)


def decode_qsgd_payload(data: bytes) -> QsgdLayerUpdate:
    if len(data) < HEADER.size + 4:
        raise CorruptPayloadError("payload shorter than header")
    levels, count, mw, _ = HEADER.unpack_from(data)
    if levels < 1 or mw != qsgd_magnitude_width(levels):
        raise CorruptPayloadError("header inconsistent")
    pos = HEADER.size
    (norm,) = struct.unpack_from("<f", data, pos)
    pos += 4
    sbytes = (count + 7) // 8
    mbytes = (count * mw + 7) // 8
    if len(data) != pos + sbytes + mbytes:
        raise CorruptPayloadError("payload length inconsistent with header")
    neg = unpack_indices(PackedPayload(data[pos:pos + sbytes], count, 1), count, 1).astype(bool)
    pos += sbytes
    mags = unpack_indices(PackedPayload(data[pos:], count * mw, mw), count, mw)
    return QsgdLayerUpdate(np.float32(norm), neg, mags.astype(np.uint32), levels)


# --------------------------------------------------------------------------- cost model

def layer_dims(spec: Dims) -> tuple[int, ...]:
    dims = spec.layer_dims if isinstance(spec, ModelSpec) else tuple(int(d) for d in spec)
    if any(d < 0 for d in dims):
        raise InputError("layer dimensions must be non-negative")
    return dims


def _per_layer(value, n: int, name: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n
    vals = tuple(int(v) for v in value)
    if len(vals) == 1:
        return vals * n
    if len(vals) != n:
        raise InputError(f"{name} has {len(vals)} entries for {n} layers")
    return vals


@dataclass(frozen=True)
class CostConfig:
    """Parameters of the per-client, per-round cost model.

    ``levels`` / ``refresh_period`` are a single value broadcast to every layer
    or one value per layer. ``downlink_levels=None`` means a full-precision
    downlink. With ``codebook_scope="model"`` one codebook covers every layer
    and its boundary bits are charged once rather than per layer.
    """

    levels: int | tuple[int, ...] = 64
    refresh_period: int | tuple[int, ...] = 10
    boundary_bits: int = 16
    downlink_levels: int | tuple[int, ...] | None = None
    downlink_refresh_period: int | tuple[int, ...] = 10
    float_bits: int = FLOAT_BITS
    codebook_scope: str = "layer"

    def __post_init__(self):
        if self.boundary_bits <= 0:
            raise InputError("boundary_bits must be > 0")
        if self.codebook_scope not in ("layer", "model"):
            raise InputError(f"codebook_scope must be 'layer' or 'model', got {self.codebook_scope!r}")
        for name in ("levels", "downlink_levels", "refresh_period", "downlink_refresh_period"):
            v = getattr(self, name)
            if v is None:
                continue
            vals = (v,) if isinstance(v, (int, np.integer)) else tuple(v)
            if not vals or min(vals) < 1:
                raise InputError(f"{name} must be >= 1")


@dataclass(frozen=True)
class LinkCost:
    index_bits: int
    codebook_bits: Fraction

    @property
    def total(self) -> Fraction:
        return self.index_bits + self.codebook_bits


@dataclass(frozen=True)
class BaselineCost:
    uplink: int
    downlink: int

    @property
    def total(self) -> int:
        return self.uplink + self.downlink


@dataclass(frozen=True)
class RoundTotal:
    uplink: Fraction
    downlink: Fraction
    baseline_total: int

    @property
    def total(self) -> Fraction:
        return self.uplink + self.downlink

    @property
    def total_bits(self) -> int:
        return math.ceil(self.total)

    @property
    def reduction(self) -> Fraction:
        if self.baseline_total == 0:
            return Fraction(0)
        return 1 - self.total / self.baseline_total

    @property
    def reduction_percent(self) -> str:
        return format_percent(self.reduction)


def format_percent(frac: Fraction, places: int = 2) -> str:
    """Exact half-up rounding of a fraction to a percentage string."""
    scaled = Fraction(frac) * 100 * 10 ** places
    sign = "-" if scaled < 0 else ""
    q = math.floor(abs(scaled) + Fraction(1, 2))
    whole, rem = divmod(q, 10 ** places)
    return f"{sign}{whole}.{rem:0{places}d}" if places else f"{sign}{whole}"


def baseline_cost(spec: Dims, float_bits: int = FLOAT_BITS) -> BaselineCost:
    d = sum(layer_dims(spec))
    return BaselineCost(float_bits * d, float_bits * d)


def _quantised_link(dims, levels, refresh, b, scope) -> LinkCost:
    n = len(dims)
    Ls = _per_layer(levels, n, "levels")
    Ts = _per_layer(refresh, n, "refresh_period")
    index_bits = sum(d * index_width(L) for d, L in zip(dims, Ls))
    if n == 0:
        return LinkCost(0, Fraction(0))
    if scope == "model":
        if len(set(Ls)) != 1 or len(set(Ts)) != 1:
            raise InputError("a model-wide codebook needs uniform levels and refresh period")
        codebook = Fraction(b * Ls[0], Ts[0])
    else:
        codebook = sum((Fraction(b * L, T) for L, T in zip(Ls, Ts)), Fraction(0))
    return LinkCost(index_bits, codebook)


def uplink_cost(spec: Dims, cfg: CostConfig) -> LinkCost:
    """``sum_l d_l ceil(log2 L_l) + b L_l / T_l``."""
    return _quantised_link(layer_dims(spec), cfg.levels, cfg.refresh_period,
                           cfg.boundary_bits, cfg.codebook_scope)


def downlink_cost(spec: Dims, cfg: CostConfig) -> LinkCost:
    dims = layer_dims(spec)
    if cfg.downlink_levels is None:
        return LinkCost(cfg.float_bits * sum(dims), Fraction(0))
    return _quantised_link(dims, cfg.downlink_levels, cfg.downlink_refresh_period,
                           cfg.boundary_bits, cfg.codebook_scope)


def round_total(spec: Dims, cfg: CostConfig | None) -> RoundTotal:
    """Uplink + downlink per client per round; ``cfg=None`` is the uncompressed baseline."""
    base = baseline_cost(spec, cfg.float_bits if cfg else FLOAT_BITS)
    if cfg is None:
        return RoundTotal(Fraction(base.uplink), Fraction(base.downlink), base.total)
    return RoundTotal(uplink_cost(spec, cfg).total, downlink_cost(spec, cfg).total, base.total)


def qsgd_uplink_bits(spec: Dims, levels: int, float_bits: int = FLOAT_BITS) -> int:
    """Nominal QSGD uplink: sign + ceil(log2 s) magnitude bits per coordinate, one norm per layer."""
    dims = layer_dims(spec)
    return sum(dims) * (index_width(levels) + 1) + float_bits * len(dims)


def qsgd_cost(spec: Dims, levels: int, float_bits: int = FLOAT_BITS) -> RoundTotal:
    """QSGD uplink with a full-precision downlink."""
    base = baseline_cost(spec, float_bits)
    return RoundTotal(Fraction(qsgd_uplink_bits(spec, levels, float_bits)),
                      Fraction(base.downlink), base.total)


# --------------------------------------------------------------------------- ledger

@dataclass(frozen=True)
class RoundCost:
    """Bits of one round. ``*_bits`` fields are per client; ``wire_*`` are
    totals measured from the serialised payloads of all participants."""

    round: int
    clients: int
    uplink_index_bits: int
    uplink_codebook_bits: Fraction
    uplink_codebook_bits_actual: int
    downlink_bits: int
    downlink_bits_amortised: Fraction
    baseline_bits: int
    wire_uplink_bits: int
    wire_downlink_bits: int
    refresh: bool = False

    @property
    def per_client_actual(self) -> int:
        return self.uplink_index_bits + self.uplink_codebook_bits_actual + self.downlink_bits

    @property
    def per_client_amortised(self) -> Fraction:
        return self.uplink_index_bits + self.uplink_codebook_bits + self.downlink_bits_amortised

    @property
    def ledger_uplink_bits(self) -> int:
        return self.clients * (self.uplink_index_bits + self.uplink_codebook_bits_actual)

    @property
    def ledger_downlink_bits(self) -> int:
        return self.clients * self.downlink_bits

    @property
    def wire_consistent(self) -> bool:
        return (self.wire_uplink_bits == self.ledger_uplink_bits
                and self.wire_downlink_bits == self.ledger_downlink_bits)


@dataclass
class CostLedger:
    """Append-only per-round cost records."""

    records: list[RoundCost] = field(default_factory=list)

    def append(self, rec: RoundCost) -> None:
        if self.records and rec.round <= self.records[-1].round:
            raise InputError("ledger rounds must be increasing")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def total_actual(self) -> int:
        """Every bit put on the wire by every participant."""
        return sum(r.ledger_uplink_bits + r.ledger_downlink_bits for r in self.records)

    def total_amortised(self) -> Fraction:
        return sum((r.clients * r.per_client_amortised for r in self.records), Fraction(0))

    def total_baseline(self) -> int:
        return sum(r.clients * r.baseline_bits for r in self.records)

    def reduction_vs_baseline(self) -> Fraction:
        base = self.total_baseline()
        if base == 0:
            return Fraction(0)
        return 1 - self.total_amortised() / base

    def window_consistent(self, start: int, length: int) -> bool:
        """Actual codebook charges over ``length`` rounds from ``start`` equal the
        amortised charges over the same rounds, exactly."""
        window = [r for r in self.records if start <= r.round < start + length]
        if len(window) != length:
            return False
        actual = sum(r.uplink_codebook_bits_actual for r in window)
        amortised = sum((r.uplink_codebook_bits for r in window), Fraction(0))
        d_actual = sum(r.downlink_bits for r in window)
        d_amortised = sum((r.downlink_bits_amortised for r in window), Fraction(0))
        return actual == amortised and d_actual == d_amortised
