"""Framed wire protocol for worker<->server traffic.

Every frame starts with a fixed 39-byte little-endian header carrying the
message type, slice priority, iteration, sender rank, slice key, element
offset, and payload length; PUSH and BCAST frames append a packed float32
payload (gradients and updated parameters respectively). The priority field
travels in every header so receivers can reorder without parsing payloads.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"P3W1"

_HEADER = struct.Struct("<4sBIQHIIQI")
HEADER_LEN = _HEADER.size  # 39

DEFAULT_MAX_PAYLOAD = 16 * 1024 * 1024


class MsgType(enum.IntEnum):
    PUSH = 0
    BCAST = 1
    PULL = 2
    NOTIFY = 3
    HELLO = 4
    FIN = 5


_PAYLOAD_TYPES = (MsgType.PUSH, MsgType.BCAST)


class ProtocolError(Exception):
    """Corrupt or rule-violating traffic; fatal for the connection."""


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    priority: int = 0
    iteration: int = 0
    worker_rank: int = 0
    layer_index: int = 0
    slice_index: int = 0
    offset: int = 0
    payload: bytes = b""

    def payload_f32(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype="<f4")


def pack_f32(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def encode_frame(frame: Frame) -> bytes:
    if frame.msg_type in _PAYLOAD_TYPES:
        if len(frame.payload) % 4 != 0:
            raise ProtocolError(f"{frame.msg_type.name} payload not a float32 array")
    elif frame.payload:
        raise ProtocolError(f"{frame.msg_type.name} frames carry no payload")
    header = _HEADER.pack(
        MAGIC,
        int(frame.msg_type),
        frame.priority,
        frame.iteration,
        frame.worker_rank,
        frame.layer_index,
        frame.slice_index,
        frame.offset,
        len(frame.payload),
    )
    return header + frame.payload


def try_decode(
    buf: bytes | bytearray | memoryview, max_payload: int = DEFAULT_MAX_PAYLOAD
) -> tuple[Frame | None, int]:
    """Decode one frame from the head of ``buf``.

    Returns (frame, bytes_consumed) on success, or (None, bytes_still_needed)
    when the buffer holds only part of a frame. Raises ProtocolError on bad
    magic, unknown message type, or an oversized payload length.
    """
    view = memoryview(buf)
    if len(view) < HEADER_LEN:
        return None, HEADER_LEN - len(view)
    magic, raw_type, priority, iteration, rank, layer, sl, offset, payload_len = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {bytes(magic)!r}")
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {raw_type}") from None
    if payload_len > max_payload:
        raise ProtocolError(f"payload_len {payload_len} exceeds max {max_payload}")
    if msg_type not in _PAYLOAD_TYPES and payload_len != 0:
        raise ProtocolError(f"{msg_type.name} frame with nonzero payload_len {payload_len}")
    total = HEADER_LEN + payload_len
    if len(view) < total:
        return None, total - len(view)
    payload = bytes(view[HEADER_LEN:total])
    frame = Frame(
        msg_type=msg_type,
        priority=priority,
        iteration=iteration,
        worker_rank=rank,
        layer_index=layer,
        slice_index=sl,
        offset=offset,
        payload=payload,
    )
    return frame, total


@dataclass
class FrameDecoder:
    """Incremental decoder: feed arbitrary byte chunks, get whole frames out."""

    max_payload: int = DEFAULT_MAX_PAYLOAD
    _buf: bytearray = field(default_factory=bytearray)

    def feed(self, data: bytes) -> list[Frame]:
        self._buf.extend(data)
        frames = []
        while True:
            frame, n = try_decode(self._buf, self.max_payload)
            if frame is None:
                break
            del self._buf[:n]
            frames.append(frame)
        return frames

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
