"""GEOA expert-output dumps and GEOP toy-layer parameter files.

GEOA layout (little-endian, no padding)::

    offset  size  field
    0       4     magic b"GEOA"
    4       4     version u32 (= 1)
    8       4     dim u32
    12      4     experts_per_sample u32 (K)
    16      8     sample_count u64
    24      1     dtype u8 (0 = binary32)
    25      7     reserved, zero
    32      ...   records: K*dim binary32 expert vectors (expert-major),
                  then K binary32 gate weights

GEOP layout: magic b"GEOP", version u32, then a 24-byte sub-header
(num_experts, D, H, K as u32, aggregator tag u8, 7 zero bytes), then
binary32 arrays in declaration order: gate matrix (E x D), and per expert
w_in (H x D), b_in (H), w_out (D x H), b_out (D).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, NamedTuple

import numpy as np

from .aggregation import ExpertBundle

MAGIC = b"GEOA"
PARAMS_MAGIC = b"GEOP"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sIIIQB7s")
PARAMS_HEADER = struct.Struct("<4sIIIIIB7s")
_F32 = np.dtype("<f4")
# records per read; keeps reader memory bounded independent of file size
_CHUNK_BYTES = 1 << 20

assert HEADER.size == 32 and PARAMS_HEADER.size == 32


class FormatError(Exception):
    """Base for GEOA/GEOP errors; the class name is the error code."""


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class InvalidHeader(FormatError):
    pass


class TruncatedFile(FormatError):
    def __init__(self, msg, record_index=None):
        super().__init__(msg)
        self.record_index = record_index


class TrailingBytes(FormatError):
    pass


class NonFiniteValue(FormatError):
    def __init__(self, msg, record_index=None):
        super().__init__(msg)
        self.record_index = record_index


class ShapeMismatch(FormatError):
    pass


class SinkFailure(FormatError):
    pass


class ZeroWeightSum(FormatError):
    pass


class WeightSumMismatch(FormatError):
    pass


@dataclass(frozen=True)
class DumpHeader:
    dim: int
    experts_per_sample: int
    sample_count: int
    version: int = VERSION
    dtype: int = DTYPE_F32

    @property
    def record_floats(self) -> int:
        return self.experts_per_sample * (self.dim + 1)

    @property
    def record_bytes(self) -> int:
        return 4 * self.record_floats

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.dim, self.experts_per_sample,
                           self.sample_count, self.dtype, bytes(7))

    @classmethod
    def unpack(cls, raw: bytes) -> "DumpHeader":
        if len(raw) < 4 or raw[:4] != MAGIC:
            raise BadMagic(f"expected magic {MAGIC!r}, got {bytes(raw[:4])!r}")
        if len(raw) < HEADER.size:
            raise TruncatedFile(f"header is {len(raw)} bytes, expected {HEADER.size}")
        _, version, dim, k, n, dtype, reserved = HEADER.unpack(raw)
        if version != VERSION:
            raise UnsupportedVersion(f"version {version}")
        if dtype != DTYPE_F32:
            raise UnsupportedDtype(f"dtype {dtype}")
        if dim < 1 or k < 1:
            raise InvalidHeader(f"dim={dim}, K={k}; both must be >= 1")
        if reserved != bytes(7):
            raise InvalidHeader("reserved header bytes are not zero")
        return cls(dim, k, n, version, dtype)


class DumpRecord(NamedTuple):
    expert_vectors: np.ndarray  # (K, dim) float32
    weights: np.ndarray  # (K,) float32

    @classmethod
    def from_bundle(cls, bundle: ExpertBundle) -> "DumpRecord":
        return cls(bundle.outputs.astype(np.float32), bundle.weights.astype(np.float32))


def _check_record(header: DumpHeader, rec: DumpRecord, i: int):
    vec = np.asarray(rec.expert_vectors)
    w = np.asarray(rec.weights)
    k, d = header.experts_per_sample, header.dim
    if vec.shape != (k, d) or w.shape != (k,):
        raise ShapeMismatch(f"record {i}: shapes {vec.shape}/{w.shape}, header wants ({k}, {d})/({k},)")
    vec = vec.astype(_F32, copy=False)
    w = w.astype(_F32, copy=False)
    if not (np.all(np.isfinite(vec)) and np.all(np.isfinite(w))):
        raise NonFiniteValue(f"record {i} has non-finite values", i)
    if np.any(w < 0):
        raise ShapeMismatch(f"record {i} has negative weights")
    return vec, w


def write_dump(header: DumpHeader, records: Iterable[DumpRecord], sink: BinaryIO) -> int:
    """Write ``header`` and exactly ``header.sample_count`` records; returns bytes written."""
    written = 0
    try:
        sink.write(header.pack())
        written += HEADER.size
        n = 0
        for rec in records:
            if n >= header.sample_count:
                raise ShapeMismatch(f"more records than sample_count={header.sample_count}")
            vec, w = _check_record(header, rec, n)
            sink.write(vec.tobytes())
            sink.write(w.tobytes())
            written += header.record_bytes
            n += 1
    except OSError as exc:
        raise SinkFailure(str(exc)) from exc
    if n != header.sample_count:
        raise ShapeMismatch(f"wrote {n} records, header declares {header.sample_count}")
    return written


def _read_exact(source: BinaryIO, n: int) -> bytes:
    parts = []
    while n > 0:
        chunk = source.read(n)
        if not chunk:
            break
        parts.append(chunk)
        n -= len(chunk)
    return b"".join(parts)


def _records(source: BinaryIO, header: DumpHeader) -> Iterator[DumpRecord]:
    k, d = header.experts_per_sample, header.dim
    size = header.record_bytes
    per_chunk = max(1, _CHUNK_BYTES // size)
    index = 0
    while index < header.sample_count:
        want = min(per_chunk, header.sample_count - index)
        raw = _read_exact(source, want * size)
        got = len(raw) // size
        block = np.frombuffer(raw, dtype=_F32, count=got * header.record_floats).reshape(got, header.record_floats)
        bad = ~np.all(np.isfinite(block), axis=1)
        for j in range(got):
            if bad[j]:
                raise NonFiniteValue(f"record {index} has non-finite values", index)
            row = block[j]
            yield DumpRecord(row[: k * d].reshape(k, d), row[k * d:])
            index += 1
        if got < want:
            raise TruncatedFile(f"file ends inside record {index}", index)
    if source.read(1):
        raise TrailingBytes(f"data after the last of {header.sample_count} records")


def read_dump(source: BinaryIO) -> tuple[DumpHeader, Iterator[DumpRecord]]:
    """Validate the header and return a lazy record iterator.

    Records are read in bounded chunks; the file must stay open while the
    iterator is consumed. Truncation, non-finite values and trailing bytes
    surface as exceptions during iteration.
    """
    header = DumpHeader.unpack(_read_exact(source, HEADER.size))
    return header, _records(source, header)


def record_to_bundle(rec: DumpRecord, renormalize: bool = True) -> ExpertBundle:
    w = np.asarray(rec.weights, dtype=np.float64)
    total = float(w.sum())
    if not total > 0:
        raise ZeroWeightSum("gate weights sum to zero")
    if renormalize:
        w = w / total
    elif abs(total - 1.0) > 1e-6:
        raise WeightSumMismatch(f"gate weights sum to {total!r}")
    else:
        # within the on-disk tolerance; absorb the binary32 rounding
        w = w / total
    return ExpertBundle(np.asarray(rec.expert_vectors, dtype=np.float64), w)


# GEOP -----------------------------------------------------------------------

def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype=_F32).tobytes()


def write_params(layer, sink: BinaryIO) -> int:
    from .moe import MoELayer

    assert isinstance(layer, MoELayer)
    e, d, h = layer.num_experts, layer.dim, layer.hidden
    head = PARAMS_HEADER.pack(PARAMS_MAGIC, VERSION, e, d, h, layer.router.top_k,
                              layer.aggregator.tag, bytes(7))
    blobs = [head, _f32(layer.router.gate_matrix)]
    for p in layer.experts:
        blobs += [_f32(p.w_in), _f32(p.b_in), _f32(p.w_out), _f32(p.b_out)]
    try:
        for b in blobs:
            sink.write(b)
    except OSError as exc:
        raise SinkFailure(str(exc)) from exc
    return sum(len(b) for b in blobs)


def read_params(source: BinaryIO):
    from .aggregation import AggregatorKind
    from .moe import ExpertParams, MoELayer, RouterParams

    raw = _read_exact(source, PARAMS_HEADER.size)
    if raw[:4] != PARAMS_MAGIC:
        raise BadMagic(f"expected magic {PARAMS_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < PARAMS_HEADER.size:
        raise TruncatedFile("parameter header is truncated")
    _, version, e, d, h, k, tag, reserved = PARAMS_HEADER.unpack(raw)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if reserved != bytes(7) or min(e, d, h, k) < 1 or k > e:
        raise InvalidHeader(f"bad parameter header E={e} D={d} H={h} K={k}")
    try:
        kind = AggregatorKind.from_tag(tag)
    except ValueError as exc:
        raise InvalidHeader(str(exc)) from None

    def take(*shape):
        n = int(np.prod(shape))
        buf = _read_exact(source, 4 * n)
        if len(buf) != 4 * n:
            raise TruncatedFile("parameter file ends early")
        a = np.frombuffer(buf, dtype=_F32).astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(a)):
            raise NonFiniteValue("non-finite parameter")
        return a

    gate = take(e, d)
    experts = [ExpertParams(take(h, d), take(h), take(d, h), take(d)) for _ in range(e)]
    if source.read(1):
        raise TrailingBytes("data after the last parameter block")
    return MoELayer(RouterParams(gate, k), experts, kind)
