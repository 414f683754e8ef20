"""Length-prefixed binary frames for the multi-process broker.

Frame layout (big-endian)::

    u32 length | u8 opcode | u16 name_len | name (utf-8) | payload

``length`` counts every byte after the length field itself. Requests carry
one of the opcodes below; responses reuse the layout with a status code in
the opcode byte and an empty name. Per-opcode payloads:

    ENQ  request: uuid(16) | data                 response: OK
    DEQ  request: u32 wait_ms                     response: OK envelope | EMPTY
    LEN  request: -                               response: OK u64 count
    PUB  request: uuid(16) | data                 response: OK
    SUB  request: -                               response: OK, then a stream of
                                                  PUB frames (name = topic, envelope)
    SET  request: u32 ttl_ms | value (name = key) response: OK
    GET  request: - (name = key)                  response: OK value | EMPTY
    DEL  request: - (name = key)                  response: OK

An envelope on the wire is ``uuid(16) | f64 enqueued_at | data``. ERROR
responses carry ``kind:message`` in utf-8.
"""

from __future__ import annotations

import asyncio
import struct
import uuid
from dataclasses import dataclass

from .base import Envelope

ENQ, DEQ, LEN, PUB, SUB, SET, GET, DEL = 1, 2, 3, 4, 5, 6, 7, 8
OK, EMPTY, ERROR = 0, 1, 2

MAX_FRAME = 1 << 24

_HEAD = struct.Struct(">IBH")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_F64 = struct.Struct(">d")


class FrameError(Exception):
    pass


@dataclass(frozen=True)
class Frame:
    opcode: int
    name: str = ""
    payload: bytes = b""

    def encode(self) -> bytes:
        name = self.name.encode()
        if len(name) > 0xFFFF:
            raise FrameError("name too long")
        length = 1 + 2 + len(name) + len(self.payload)
        return _HEAD.pack(length, self.opcode, len(name)) + name + self.payload


def decode(body: bytes) -> Frame:
    """Decode a frame whose 4-byte length prefix was already stripped."""
    if len(body) < 3:
        raise FrameError("frame too short")
    opcode = body[0]
    (name_len,) = struct.unpack_from(">H", body, 1)
    if 3 + name_len > len(body):
        raise FrameError("name overruns frame")
    name = body[3 : 3 + name_len].decode()
    return Frame(opcode, name, bytes(body[3 + name_len :]))


async def read_frame(reader: asyncio.StreamReader) -> Frame:
    (length,) = _U32.unpack(await reader.readexactly(4))
    if length < 3 or length > MAX_FRAME:
        raise FrameError(f"bad frame length {length}")
    return decode(await reader.readexactly(length))


def encode_envelope(env: Envelope) -> bytes:
    return env.uuid.bytes + _F64.pack(env.enqueued_at) + env.payload


def decode_envelope(data: bytes) -> Envelope:
    if len(data) < 24:
        raise FrameError("envelope too short")
    (at,) = _F64.unpack_from(data, 16)
    return Envelope(uuid.UUID(bytes=bytes(data[:16])), bytes(data[24:]), at)


def pack_u32(value: int) -> bytes:
    return _U32.pack(value)


def unpack_u32(data: bytes) -> int:
    return _U32.unpack_from(data)[0]


def pack_u64(value: int) -> bytes:
    return _U64.pack(value)


def unpack_u64(data: bytes) -> int:
    return _U64.unpack_from(data)[0]
