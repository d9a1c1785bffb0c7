"""Binary message format for :class:`CompressedUpdate`.

Layout (little-endian)::

    b"PRFL" | u16 version | u32 client_id | u64 sample_count | u32 matrix_count
    per matrix:
        u16 name_len | name (utf-8) | u8 kind | u8 ndim | u32 dims[ndim]
        u32 P | u32 Q | u32 r | u32 K_p | u32 K_n
        f32 payload (raw: the tensor; lowrank: U_p S_p V_p U_n S_n V_n)
    u32 CRC-32 of everything before it

Raw matrices carry r = K_p = K_n = 0.
"""
from __future__ import annotations

import math
import struct
import zlib

import numpy as np

from ..errors import BadMagicError, BadVersionError, ChecksumError, MalformedError, TruncatedError
from .compress import CompressedMatrix, CompressedUpdate

MAGIC = b"PRFL"
VERSION = 1
KIND_CODES = {"raw": 0, "lowrank": 1}
_HEADER = struct.Struct("<4sHIQI")
_MAT = struct.Struct("<IIIII")


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode(c: CompressedUpdate) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, c.client_id, c.sample_count, len(c.matrices))]
    for m in c.matrices:
        name = m.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BB", KIND_CODES[m.kind], len(m.orig_dims)))
        parts.append(struct.pack(f"<{len(m.orig_dims)}I", *m.orig_dims))
        if m.kind == "raw":
            parts.append(_MAT.pack(m.P, m.Q, 0, 0, 0))
        else:
            parts.append(_MAT.pack(m.P, m.Q, m.r, m.k_p, m.k_n))
        parts.extend(_f32(a) for a in m.arrays())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, message body has {self.end}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s))

    def floats(self, shape) -> np.ndarray:
        n = math.prod(shape)
        raw = self.take(4 * n)
        with np.errstate(invalid="ignore"):
            return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def _descending_nonneg(s: np.ndarray) -> bool:
    return bool(np.all(s >= 0) and np.all(np.diff(s) <= 0))


def decode(data: bytes) -> CompressedUpdate:
    """Parse a message. Raises a :class:`DecodeError` subclass on any defect."""
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedError("message shorter than its magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < _HEADER.size + 4:
        raise TruncatedError("message shorter than its header")
    rd = _Reader(data, len(data) - 4)
    _, version, client_id, sample_count, count = rd.unpack(_HEADER.format)
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    mats = []
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        try:
            name = rd.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedError("matrix name is not utf-8") from exc
        kind_code, ndim = rd.unpack("<BB")
        if kind_code not in (0, 1):
            raise MalformedError(f"unknown matrix kind {kind_code}")
        if ndim < 1:
            raise MalformedError("tensor must have at least one dimension")
        dims = rd.unpack(f"<{ndim}I")
        P, Q, r, k_p, k_n = rd.unpack(_MAT.format)
        size = math.prod(dims)
        if P * Q != size:
            raise MalformedError(f"{name}: P*Q={P * Q} does not match dims {dims}")
        if kind_code == 0:
            if r or k_p or k_n:
                raise MalformedError(f"{name}: raw matrix with nonzero ranks")
            if 4 * size > rd.end - rd.pos:
                raise TruncatedError(f"{name}: payload runs past end of message")
            mats.append(CompressedMatrix(name, tuple(dims), P, Q, raw=rd.floats(dims)))
            continue
        if not (1 <= r <= min(P, Q) and 1 <= k_p <= min(P, r) and 1 <= k_n <= min(r, Q)):
            raise MalformedError(f"{name}: invalid ranks r={r} K_p={k_p} K_n={k_n}")
        u_p = rd.floats((P, k_p))
        s_p = rd.floats((k_p,))
        v_p = rd.floats((k_p, r))
        u_n = rd.floats((r, k_n))
        s_n = rd.floats((k_n,))
        v_n = rd.floats((k_n, Q))
        mats.append(CompressedMatrix(name, tuple(dims), P, Q, r, "lowrank", None,
                                     u_p, s_p, v_p, u_n, s_n, v_n))
    if rd.pos != rd.end:
        raise MalformedError(f"{rd.end - rd.pos} unexpected bytes before checksum")
    (crc,) = struct.unpack("<I", data[-4:])
    if crc != zlib.crc32(data[:-4]):
        raise ChecksumError("CRC-32 mismatch")
    for m in mats:
        if m.kind == "lowrank" and not (_descending_nonneg(m.s_p) and _descending_nonneg(m.s_n)):
            raise MalformedError(f"{m.name}: singular values must be nonnegative and descending")
    return CompressedUpdate(client_id, sample_count, mats)
