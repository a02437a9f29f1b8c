"""Binary codec for model-update records (FAUF v1).

Record layout, all integers little-endian:

    magic "FAUP" | version u16 = 1 | flags u16 = 0
    client_id_len u16 | client_id utf-8
    round u64 | sample_count u64 | layer_count u32
    per layer: name_len u16 | name utf-8 | dtype u8 (0=F32, 1=F64)
               | rank u8 | dims u64 x rank | payload row-major
    crc32c u32 over all preceding bytes

Encoding is deterministic: equal updates produce identical bytes. The
trailing CRC32C (Castagnoli) detects any single-bit corruption of the
record; the hot loop is numba-compiled so checksumming runs at memory
speed rather than interpreter speed.
"""

from __future__ import annotations

import struct

import numba
import numpy as np
from numba import types as _nbt

from .errors import BadMagic, ChecksumMismatch, CodecError, Truncated, UnsupportedVersion
from .model import Dtype, GlobalModel, LayerTensor, ModelSchema, ModelUpdate

MAGIC_UPDATE = b"FAUP"
VERSION = 1
FILE_EXTENSION = ".fau"

# Reserved client id used when a fused GlobalModel travels as a FAUF record.
GLOBAL_CLIENT_ID = "global"

_CRC_POLY = 0x82F63B78  # CRC-32C, reflected


def _crc_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint32)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ (_CRC_POLY if crc & 1 else 0)
        table[i] = crc
    return table


_CRC_TABLE = _crc_table()

_crc_sig = _nbt.uint32(_nbt.Array(_nbt.uint8, 1, "C", readonly=True), _nbt.uint32)


@numba.njit(_crc_sig, cache=True, nogil=True)
def _crc32c_kernel(data, crc):  # pragma: no cover - exercised via crc32c()
    table = _CRC_TABLE
    for i in range(data.shape[0]):
        crc = table[(crc ^ data[i]) & numba.uint32(0xFF)] ^ (crc >> numba.uint32(8))
    return crc


def crc32c(data: bytes | bytearray | memoryview) -> int:
    """CRC-32C (Castagnoli) of `data`, matching the common iSCSI check value."""
    buf = np.frombuffer(data, dtype=np.uint8)
    return int(_crc32c_kernel(buf, np.uint32(0xFFFFFFFF)) ^ np.uint32(0xFFFFFFFF))


class RecordWriter:
    """Accumulates little-endian fields and appends the CRC32C trailer."""

    def __init__(self, magic: bytes):
        self.parts: list[bytes] = [magic]

    def u8(self, v: int) -> None:
        self.parts.append(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self.parts.append(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.parts.append(struct.pack("<Q", v))

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", crc32c(body))


class RecordReader:
    """Cursor over a checked record body; raises Truncated with field offsets."""

    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.end = end  # exclusive; trailer lives beyond
        self.pos = 0

    def _need(self, n: int, field: str) -> int:
        if self.pos + n > self.end:
            raise Truncated(f"need {n} bytes for {field} at offset {self.pos}")
        p = self.pos
        self.pos += n
        return p

    def u8(self, field: str) -> int:
        return struct.unpack_from("<B", self.buf, self._need(1, field))[0]

    def u16(self, field: str) -> int:
        return struct.unpack_from("<H", self.buf, self._need(2, field))[0]

    def u32(self, field: str) -> int:
        return struct.unpack_from("<I", self.buf, self._need(4, field))[0]

    def u64(self, field: str) -> int:
        return struct.unpack_from("<Q", self.buf, self._need(8, field))[0]

    def take(self, n: int, field: str) -> bytes:
        p = self._need(n, field)
        return self.buf[p : p + n]

    def array(self, dtype: np.dtype, count: int, field: str) -> np.ndarray:
        p = self._need(count * dtype.itemsize, field)
        return np.frombuffer(self.buf, dtype=dtype, count=count, offset=p)

    def done(self) -> None:
        if self.pos != self.end:
            raise Truncated(
                f"record body ends at offset {self.pos} but trailer starts at {self.end}"
            )


def check_frame(buf: bytes, magic: bytes) -> RecordReader:
    """Validate magic, version, flags and CRC; return a reader past the header."""
    if len(buf) < 4:
        raise Truncated(f"need 4 bytes for magic at offset 0, got {len(buf)}")
    if buf[:4] != magic:
        raise BadMagic(f"bad magic {buf[:4]!r} at offset 0 (want {magic!r})")
    if len(buf) < 8:
        raise Truncated("need 4 bytes for version/flags at offset 4")
    version, flags = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} at offset 4 (supported: {VERSION})")
    if flags != 0:
        raise UnsupportedVersion(f"unknown flags 0x{flags:04x} at offset 6")
    if len(buf) < 12:
        raise Truncated(f"need 4 bytes for crc32c trailer at offset {len(buf)}")
    stored = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    actual = crc32c(memoryview(buf)[:-4])
    if stored != actual:
        raise ChecksumMismatch(
            f"crc32c 0x{actual:08x} != stored 0x{stored:08x} at offset {len(buf) - 4}"
        )
    reader = RecordReader(buf, len(buf) - 4)
    reader.pos = 8  # past magic/version/flags
    return reader


def _encode_record(client_id: str, round_no: int, sample_count: int,
                   layers: tuple[LayerTensor, ...]) -> bytes:
    w = RecordWriter(MAGIC_UPDATE)
    w.u16(VERSION)
    w.u16(0)
    cid = client_id.encode("utf-8")
    w.u16(len(cid))
    w.raw(cid)
    w.u64(round_no)
    w.u64(sample_count)
    w.u32(len(layers))
    for layer in layers:
        name = layer.name.encode("utf-8")
        w.u16(len(name))
        w.raw(name)
        w.u8(layer.dtype.wire_code)
        w.u8(len(layer.shape))
        for d in layer.shape:
            w.u64(d)
        w.raw(layer.data.tobytes())
    return w.finish()


def _decode_record(buf: bytes) -> tuple[str, int, int, tuple[LayerTensor, ...]]:
    r = check_frame(buf, MAGIC_UPDATE)
    cid_len = r.u16("client_id_len")
    client_id = r.take(cid_len, "client_id").decode("utf-8")
    round_no = r.u64("round")
    sample_count = r.u64("sample_count")
    layer_count = r.u32("layer_count")
    layers = []
    for i in range(layer_count):
        name_len = r.u16(f"layer[{i}].name_len")
        name = r.take(name_len, f"layer[{i}].name").decode("utf-8")
        try:
            dtype = Dtype.from_wire(r.u8(f"layer[{i}].dtype"))
        except ValueError as e:
            raise CodecError(f"layer[{i}]: {e}") from None
        rank = r.u8(f"layer[{i}].rank")
        dims = tuple(int(d) for d in r.array(np.dtype("<u8"), rank, f"layer[{i}].dims"))
        count = 1
        for d in dims:
            count *= d
        data = r.array(dtype.numpy_dtype, count, f"layer[{i}].payload")
        try:
            layers.append(LayerTensor(name, dtype, dims, data))
        except ValueError as e:
            raise CodecError(f"layer[{i}]: {e}") from None
    r.done()
    return client_id, round_no, sample_count, tuple(layers)


def encode_update(u: ModelUpdate) -> bytes:
    return _encode_record(u.client_id, u.round, u.sample_count, u.layers)


def decode_update(buf: bytes) -> ModelUpdate:
    client_id, round_no, sample_count, layers = _decode_record(buf)
    try:
        return ModelUpdate(client_id, round_no, sample_count, layers)
    except ValueError as e:
        raise CodecError(str(e)) from None


def encode_global(m: GlobalModel) -> bytes:
    """A fused model travels as a FAUF record under the reserved client id."""
    return _encode_record(GLOBAL_CLIENT_ID, m.round, 1, m.layers)


def decode_global(buf: bytes) -> GlobalModel:
    _, round_no, _, layers = _decode_record(buf)
    return GlobalModel(round=round_no, layers=layers)


def encoded_update_size(schema: ModelSchema, client_id: str) -> int:
    """Exact byte length of encode_update for any update with this schema/id.

    Computed arithmetically, without building a record.
    """
    size = 4 + 2 + 2  # magic, version, flags
    size += 2 + len(client_id.encode("utf-8"))
    size += 8 + 8 + 4  # round, sample_count, layer_count
    for layer in schema.layers:
        size += 2 + len(layer.name.encode("utf-8"))
        size += 1 + 1 + 8 * len(layer.shape)
        n = 1
        for d in layer.shape:
            n *= d
        size += n * layer.dtype.width
    return size + 4  # crc32c trailer
