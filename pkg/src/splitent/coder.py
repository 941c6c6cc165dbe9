"""Range coding of quantized latents under integer CDF tables.

The coder is a carry-less (Subbotin-style) range coder with a 48-bit window
held in 64-bit integers and byte-wise renormalisation. All state arithmetic
is integer-only, so streams are byte-identical across platforms. Streams end
with a 2-byte flush; the decoder reads zeros past the end of a payload.

Wire format of one :class:`Bitstream` (little-endian)::

    b"ENTS" | version u8 | prior_kind u8 | shape 4*u16 | hyper shape 4*u16
    | payload lengths u32 (1 for FP, 2 for MSHP: hyper then residual) | payloads
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import special

from .autodiff import Tensor
from .model import SUPPORT, QuantizedLatent, SplitModel, quantize

PRECISION = 16
MAGIC = b"ENTS"
VERSION = 1
PRIOR_CODES = {"FP": 0, "MSHP": 1}
SCALE_BINS = 64
SCALE_MIN = 1e-3
SCALE_MAX = 64.0

_HEADER = struct.Struct("<4sBB4H4H")


class FormatError(ValueError):
    """Malformed bitstream header or container."""


class DecodeError(ValueError):
    """Payload inconsistent with the tables it is decoded against."""


class SymbolError(ValueError):
    """Symbol outside the table support."""


# --------------------------------------------------------------------------- tables


def pmf_to_frequencies(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Integer frequencies summing to ``2**precision``, each at least 1.

    One count is reserved per symbol; the remaining mass is split in
    proportion to ``pmf`` and the leftover handed out by largest remainder
    (ties broken by lower symbol index).
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.shape[-1]
    total = 1 << precision
    if n > total:
        raise ValueError(f"{n} symbols do not fit in {precision}-bit precision")
    flat = pmf.reshape(-1, n)
    flat = np.clip(flat, 0.0, None)
    flat = flat / flat.sum(axis=1, keepdims=True)
    spare = total - n
    scaled = flat * spare
    base = np.floor(scaled)
    freqs = base.astype(np.int64) + 1
    leftover = spare - (freqs - 1).sum(axis=1)
    frac = scaled - base
    for row in range(flat.shape[0]):
        k = int(leftover[row])
        if k > 0:
            order = np.lexsort((np.arange(n), -frac[row]))
            freqs[row, order[:k]] += 1
    return freqs.reshape(pmf.shape)


def frequencies_to_cdf(freqs: np.ndarray) -> np.ndarray:
    freqs = np.atleast_2d(freqs)
    cdf = np.zeros((freqs.shape[0], freqs.shape[1] + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cdf[:, 1:])
    return cdf


@dataclass
class CdfTable:
    """One integer CDF row per coding context over symbols ``offset .. offset+n-1``."""

    cdf: np.ndarray
    offset: int = -SUPPORT
    precision: int = PRECISION

    def __post_init__(self):
        self.cdf = np.ascontiguousarray(self.cdf, dtype=np.int64)
        if np.any(np.diff(self.cdf, axis=1) < 1):
            raise ValueError("CDF must be strictly increasing")
        if np.any(self.cdf[:, -1] != 1 << self.precision) or np.any(self.cdf[:, 0] != 0):
            raise ValueError("CDF rows must span [0, 2**precision]")

    @classmethod
    def from_pmf(cls, pmf: np.ndarray, offset: int = -SUPPORT, precision: int = PRECISION) -> "CdfTable":
        return cls(frequencies_to_cdf(pmf_to_frequencies(np.atleast_2d(pmf), precision)), offset, precision)

    @property
    def num_contexts(self) -> int:
        return self.cdf.shape[0]

    @property
    def num_symbols(self) -> int:
        return self.cdf.shape[1] - 1

    @property
    def frequencies(self) -> np.ndarray:
        return np.diff(self.cdf, axis=1)

    def table_bits(self, symbols: np.ndarray, contexts: np.ndarray) -> float:
        """Cross-entropy of ``symbols`` w.r.t. the quantized table pmf, in bits."""
        idx = np.asarray(symbols, np.int64).reshape(-1) - self.offset
        ctx = np.asarray(contexts, np.int64).reshape(-1)
        f = self.frequencies[ctx, idx]
        return float(np.sum(self.precision - np.log2(f)))

    def equals(self, other: "CdfTable") -> bool:
        return self.offset == other.offset and self.precision == other.precision and np.array_equal(self.cdf, other.cdf)


def _support_edges() -> np.ndarray:
    return np.arange(-SUPPORT, SUPPORT + 2, dtype=np.float64) - 0.5


def discretized_pmf(loc: np.ndarray, scale: np.ndarray, family: str) -> np.ndarray:
    """Per-row pmf over ``[-SUPPORT, SUPPORT]`` with out-of-range mass folded into the edges."""
    loc = np.asarray(loc, np.float64).reshape(-1, 1)
    scale = np.asarray(scale, np.float64).reshape(-1, 1)
    u = (_support_edges()[None, :] - loc) / scale
    cdf = special.expit(u) if family == "logistic" else special.ndtr(u)
    sf = special.expit(-u) if family == "logistic" else special.ndtr(-u)
    # difference of whichever tail is smaller keeps precision far from the mode
    lower = np.diff(cdf, axis=1)
    upper = -np.diff(sf, axis=1)
    centre = 0.5 * (_support_edges()[:-1] + _support_edges()[1:])
    pmf = np.where(centre[None, :] > loc, upper, lower)
    pmf[:, 0] = cdf[:, 1]
    pmf[:, -1] = sf[:, -2]
    return pmf


def scale_bin_centres() -> np.ndarray:
    return np.exp(np.linspace(math.log(SCALE_MIN), math.log(SCALE_MAX), SCALE_BINS))


def scale_bin_index(sigma: np.ndarray) -> np.ndarray:
    """Nearest log-spaced bin for each scale."""
    step = (math.log(SCALE_MAX) - math.log(SCALE_MIN)) / (SCALE_BINS - 1)
    pos = (np.log(np.clip(np.asarray(sigma, np.float64), SCALE_MIN, SCALE_MAX)) - math.log(SCALE_MIN)) / step
    return np.clip(np.floor(pos + 0.5), 0, SCALE_BINS - 1).astype(np.int64)


@dataclass
class CodingTables:
    """Tables for one model: FP uses ``latent`` (one row per channel);
    MSHP uses ``hyper`` (per hyper channel) and ``latent`` (per scale bin)."""

    prior_kind: str
    latent: CdfTable
    hyper: CdfTable | None = None

    def equals(self, other: "CodingTables") -> bool:
        same_hyper = (self.hyper is None and other.hyper is None) or (
            self.hyper is not None and other.hyper is not None and self.hyper.equals(other.hyper)
        )
        return self.prior_kind == other.prior_kind and self.latent.equals(other.latent) and same_hyper


def build_cdf_tables(model: SplitModel, precision: int = PRECISION) -> CodingTables:
    kind = model.config.prior_kind
    if kind == "FP":
        loc, scale = model.factorized_numpy("prior")
        return CodingTables(kind, CdfTable.from_pmf(discretized_pmf(loc, scale, "logistic"), precision=precision))
    hloc, hscale = model.factorized_numpy("hyper_prior")
    hyper = CdfTable.from_pmf(discretized_pmf(hloc, hscale, "logistic"), precision=precision)
    centres = scale_bin_centres()
    residual = CdfTable.from_pmf(discretized_pmf(np.zeros_like(centres), centres, "gaussian"), precision=precision)
    return CodingTables(kind, residual, hyper)


# --------------------------------------------------------------------------- range coder core


@numba.njit(cache=True)
def _encode_core(idx, ctx, cdf, precision, out):
    mask = (np.int64(1) << 48) - 1
    top = np.int64(1) << 40
    bot = np.int64(1) << 32
    low = np.int64(0)
    rng = mask
    n = 0
    for k in range(idx.shape[0]):
        c = cdf[ctx[k], idx[k]]
        f = cdf[ctx[k], idx[k] + 1] - c
        r = rng >> precision
        low += r * c
        rng = r * f
        while True:
            if (low ^ (low + rng)) < top:
                pass
            elif rng < bot:
                rng = (-low) & (bot - 1)
            else:
                break
            out[n] = (low >> 40) & 0xFF
            n += 1
            low = (low << 8) & mask
            rng = rng << 8
    if idx.shape[0] > 0:
        v = (low + bot - 1) & ~(bot - 1)
        out[n] = (v >> 40) & 0xFF
        out[n + 1] = (v >> 32) & 0xFF
        n += 2
    return n


@numba.njit(cache=True)
def _decode_core(payload, ctx, cdf, precision, out):
    """Returns 0 on success, 1 if the payload is inconsistent with the tables."""
    mask = (np.int64(1) << 48) - 1
    top = np.int64(1) << 40
    bot = np.int64(1) << 32
    total = np.int64(1) << precision
    nbytes = payload.shape[0]
    nsym = cdf.shape[1] - 1
    pos = 0
    code = np.int64(0)
    for _ in range(6):
        b = np.int64(0)
        if pos < nbytes:
            b = np.int64(payload[pos])
        pos += 1
        code = (code << 8) | b
    low = np.int64(0)
    rng = mask
    for k in range(out.shape[0]):
        r = rng >> precision
        if code < low:
            return 1
        value = (code - low) // r
        if value >= total:
            return 1
        row = ctx[k]
        lo = 0
        hi = nsym
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cdf[row, mid] <= value:
                lo = mid
            else:
                hi = mid
        out[k] = lo
        c = cdf[row, lo]
        low += r * c
        rng = r * (cdf[row, lo + 1] - c)
        while True:
            if (low ^ (low + rng)) < top:
                pass
            elif rng < bot:
                rng = (-low) & (bot - 1)
            else:
                break
            b = np.int64(0)
            if pos < nbytes:
                b = np.int64(payload[pos])
            pos += 1
            code = ((code << 8) & mask) | b
            low = (low << 8) & mask
            rng = rng << 8
    # 6 preloaded bytes + one per shift == payload length + (6 - flush bytes)
    if out.shape[0] > 0 and pos != nbytes + 4:
        return 1
    return 0


def encode_symbols(symbols: np.ndarray, contexts: np.ndarray, table: CdfTable) -> bytes:
    """Range-encode integer ``symbols`` (table coordinates) with per-symbol context rows."""
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    ctx = np.ascontiguousarray(np.asarray(contexts, dtype=np.int64).reshape(-1))
    if sym.shape != ctx.shape:
        raise ValueError(f"{sym.size} symbols but {ctx.size} contexts")
    idx = np.ascontiguousarray(sym - table.offset)
    if idx.size and (idx.min() < 0 or idx.max() >= table.num_symbols):
        bad = sym[(idx < 0) | (idx >= table.num_symbols)][0]
        raise SymbolError(f"symbol {bad} outside support [{table.offset}, {table.offset + table.num_symbols - 1}]")
    if ctx.size and (ctx.min() < 0 or ctx.max() >= table.num_contexts):
        raise ValueError("context index out of range")
    out = np.empty(3 * idx.size + 16, dtype=np.uint8)
    n = _encode_core(idx, ctx, table.cdf, table.precision, out)
    return out[:n].tobytes()


def decode_symbols(payload: bytes, contexts: np.ndarray, table: CdfTable) -> np.ndarray:
    ctx = np.ascontiguousarray(np.asarray(contexts, dtype=np.int64).reshape(-1))
    if ctx.size == 0:
        if payload:
            raise DecodeError("payload present for an empty latent")
        return np.zeros(0, dtype=np.int64)
    buf = np.frombuffer(payload, dtype=np.uint8)
    out = np.empty(ctx.size, dtype=np.int64)
    if _decode_core(buf, ctx, table.cdf, table.precision, out):
        raise DecodeError("payload does not decode consistently under the given tables")
    # the encoder is deterministic, so a valid payload is the canonical encoding
    # of what it decodes to; this rejects damage confined to the flush slack
    check = np.empty(3 * out.size + 16, dtype=np.uint8)
    n = _encode_core(out, ctx, table.cdf, table.precision, check)
    if n != buf.size or not np.array_equal(check[:n], buf):
        raise DecodeError("payload is not the canonical encoding of its decoded symbols")
    return out + table.offset


# --------------------------------------------------------------------------- bitstream container


@dataclass
class Bitstream:
    prior_kind: str
    shape: tuple[int, int, int, int]
    hyper_shape: tuple[int, int, int, int] = (0, 0, 0, 0)
    payloads: list[bytes] = field(default_factory=list)

    @property
    def header_size(self) -> int:
        return _HEADER.size + 4 * len(self.payloads)

    @property
    def payload_size(self) -> int:
        return sum(len(p) for p in self.payloads)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, PRIOR_CODES[self.prior_kind], *self.shape, *self.hyper_shape)
        lens = struct.pack(f"<{len(self.payloads)}I", *(len(p) for p in self.payloads))
        return head + lens + b"".join(self.payloads)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise FormatError(f"stream of {len(data)} bytes is shorter than the header")
        magic, version, kind, *dims = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        names = {v: k for k, v in PRIOR_CODES.items()}
        if kind not in names:
            raise FormatError(f"unknown prior code {kind}")
        prior_kind = names[kind]
        shape, hyper_shape = tuple(dims[:4]), tuple(dims[4:])
        if shape[0] != 1:
            raise FormatError(f"one sample per stream, header says N={shape[0]}")
        count = 1 if prior_kind == "FP" else 2
        pos = _HEADER.size
        if len(data) < pos + 4 * count:
            raise FormatError("truncated payload length table")
        lens = struct.unpack_from(f"<{count}I", data, pos)
        pos += 4 * count
        if len(data) != pos + sum(lens):
            raise DecodeError(f"payload is {len(data) - pos} bytes, header declares {sum(lens)}")
        payloads = []
        for n in lens:
            payloads.append(bytes(data[pos : pos + n]))
            pos += n
        return cls(prior_kind, shape, hyper_shape, payloads)


def coded_size_bytes(bs: Bitstream) -> int:
    return bs.header_size + bs.payload_size


def _channel_contexts(shape: tuple[int, ...]) -> np.ndarray:
    c = shape[1]
    return np.broadcast_to(np.arange(c, dtype=np.int64)[None, :, None, None], shape).reshape(-1)


def encode(z_hat: QuantizedLatent, tables: CodingTables) -> Bitstream:
    """Encode one FP-quantized latent ``(1, C, H, W)``."""
    if tables.prior_kind != "FP":
        raise ValueError("use mshp_encode for hyperprior models")
    shape = tuple(int(d) for d in z_hat.shape)
    if len(shape) != 4 or shape[0] != 1:
        raise ValueError(f"one sample per stream, got shape {shape}")
    payload = encode_symbols(z_hat.values, _channel_contexts(shape), tables.latent)
    return Bitstream("FP", shape, payloads=[payload])


def decode(bs: Bitstream, tables: CodingTables) -> QuantizedLatent:
    if bs.prior_kind != "FP" or tables.prior_kind != "FP":
        raise FormatError("decode handles factorized-prior streams only")
    values = decode_symbols(bs.payloads[0], _channel_contexts(bs.shape), tables.latent)
    return QuantizedLatent(values.reshape(bs.shape))


def mshp_encode(h_hat: QuantizedLatent, residual: QuantizedLatent, sigma: np.ndarray, tables: CodingTables) -> Bitstream:
    """Two streams: ``h_hat`` under the hyper tables, residuals under the scale-bin tables."""
    hshape = tuple(int(d) for d in h_hat.shape)
    shape = tuple(int(d) for d in residual.shape)
    if shape[0] != 1 or hshape[0] != 1:
        raise ValueError("one sample per stream")
    hp = encode_symbols(h_hat.values, _channel_contexts(hshape), tables.hyper)
    rp = encode_symbols(residual.values, scale_bin_index(sigma).reshape(-1), tables.latent)
    return Bitstream("MSHP", shape, hshape, [hp, rp])


def mshp_decode_hyper(bs: Bitstream, tables: CodingTables) -> QuantizedLatent:
    if bs.prior_kind != "MSHP":
        raise FormatError("not a hyperprior stream")
    return QuantizedLatent(decode_symbols(bs.payloads[0], _channel_contexts(bs.hyper_shape), tables.hyper).reshape(bs.hyper_shape))


def mshp_decode_residual(bs: Bitstream, sigma: np.ndarray, tables: CodingTables) -> QuantizedLatent:
    values = decode_symbols(bs.payloads[1], scale_bin_index(sigma).reshape(-1), tables.latent)
    return QuantizedLatent(values.reshape(bs.shape))


# --------------------------------------------------------------------------- model-level codec


@dataclass
class Coded:
    """Per-sample bitstreams and the latent the tail consumes after decoding."""

    streams: list[Bitstream]
    z_hat: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        return np.array([coded_size_bytes(b) for b in self.streams], dtype=np.int64)

    @property
    def payload_sizes(self) -> np.ndarray:
        return np.array([b.payload_size for b in self.streams], dtype=np.int64)


class LatentCodec:
    """Quantize, encode and decode latents of one model."""

    def __init__(self, model: SplitModel, precision: int = PRECISION):
        self.model = model
        self.tables = build_cdf_tables(model, precision)

    def _scales(self, h_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # one sample at a time, so sender and receiver get bit-identical floats
        # whatever batch size either side happens to use
        parts = [self.model.decode_scales(h_q[i : i + 1]) for i in range(len(h_q))]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def quantize(self, z: np.ndarray) -> dict:
        """Symbols to be coded for a batch of continuous latents."""
        if self.model.config.prior_kind == "FP":
            q = quantize(z)
            return {"latent": q, "z_hat": q.values.astype(np.float32)}
        h = self.model.hyper_encode(Tensor(z)).data
        hq = quantize(h)
        mu, sigma = self._scales(hq.values)
        rq = quantize(z - mu)
        return {"hyper": hq, "latent": rq, "mu": mu, "sigma": sigma, "z_hat": (rq.values + mu).astype(np.float32)}

    def encode_batch(self, z: np.ndarray) -> tuple[list[Bitstream], dict]:
        q = self.quantize(z)
        streams = []
        for i in range(z.shape[0]):
            if self.model.config.prior_kind == "FP":
                streams.append(encode(QuantizedLatent(q["latent"].values[i : i + 1]), self.tables))
            else:
                streams.append(
                    mshp_encode(
                        QuantizedLatent(q["hyper"].values[i : i + 1]),
                        QuantizedLatent(q["latent"].values[i : i + 1]),
                        q["sigma"][i : i + 1],
                        self.tables,
                    )
                )
        return streams, q

    def decode_batch(self, streams: list[Bitstream]) -> np.ndarray:
        """Latents exactly as the receiving side reconstructs them."""
        if not streams:
            return np.zeros((0,) + tuple(self.model.config.latent_shape), dtype=np.float32)
        if self.model.config.prior_kind == "FP":
            return np.concatenate([decode(b, self.tables).values for b in streams]).astype(np.float32)
        hq = np.concatenate([mshp_decode_hyper(b, self.tables).values for b in streams])
        mu, sigma = self._scales(hq)
        r = np.concatenate([mshp_decode_residual(b, sigma[i : i + 1], self.tables).values for i, b in enumerate(streams)])
        return (r + mu).astype(np.float32)

    def roundtrip(self, z: np.ndarray) -> Coded:
        streams, _ = self.encode_batch(z)
        wire = [Bitstream.from_bytes(b.to_bytes()) for b in streams]
        return Coded(wire, self.decode_batch(wire))
