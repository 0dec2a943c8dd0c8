"""Binary wire protocol for the federation transport.

Frame layout (all integers little-endian):

    magic   4 bytes, ASCII "DPFL"
    version 1 byte, 0x01
    type    1 byte (see MessageType)
    length  4 bytes, unsigned payload byte count
    payload `length` bytes

Payload building blocks:

    string   u16 length + UTF-8 bytes
    tensors  u32 tensor count, then per tensor: u8 rank, u32 per dim,
             float64 values row-major
    metrics  u32 entry count, then per entry: string key + float64 value
             (keys emitted in sorted order, so encoding is deterministic)

Weights always travel as float64, so an encode/decode round trip is
bit-exact. Decoding consumes the entire buffer; trailing bytes are an error.
No message variant can carry dataset rows: the only bulk payload type is a
tensor block of model weights.
"""

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ProtocolError

MAGIC = b"DPFL"
VERSION = 1
HEADER_LEN = 10  # 4 magic + 1 version + 1 type + 4 length

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")


class MessageType(IntEnum):
    HELLO = 0x01
    ROUND_CONFIG = 0x02
    FIT_RESULT = 0x03
    EVAL_REQUEST = 0x04
    EVAL_RESULT = 0x05
    SHUTDOWN = 0x06


@dataclass
class Hello:
    """Client registration; the server answers with its own Hello as the ack."""

    client_id: str


@dataclass
class RoundConfig:
    """Server -> client: global weights plus hyperparameters for one round.

    dp_mode is one of "off", "target" (calibrate noise for target_epsilon
    over the whole session) or "sigma" (use noise_multiplier as given).
    """

    round_number: int
    total_rounds: int
    local_epochs: int
    batch_size: int
    optimizer: str  # "sgd" | "adam"
    sampling: str  # "poisson" | "fixed"
    dp_mode: str  # "off" | "target" | "sigma"
    lr: float
    dropout: float
    target_epsilon: float
    delta: float
    clip_norm: float
    noise_multiplier: float
    weights: list[np.ndarray] = field(default_factory=list)


@dataclass
class FitResult:
    """Client -> server: locally trained weights and training metrics."""

    client_id: str
    round_number: int
    num_examples: int
    weights: list[np.ndarray] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class EvalRequest:
    round_number: int
    weights: list[np.ndarray] = field(default_factory=list)


@dataclass
class EvalResult:
    client_id: str
    round_number: int
    num_examples: int
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class Shutdown:
    pass


Message = Hello | RoundConfig | FitResult | EvalRequest | EvalResult | Shutdown

_OPTIMIZERS = ("sgd", "adam")
_SAMPLING = ("poisson", "fixed")
_DP_MODES = ("off", "target", "sigma")


class _Reader:
    """Cursor over a payload buffer; every read checks remaining length."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def f64(self) -> float:
        return _F64.unpack(self.take(8))[0]

    def string(self) -> str:
        n = self.u16()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("invalid UTF-8 in string field") from exc

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ProtocolError(
                f"{len(self.data) - self.pos} trailing bytes after payload"
            )


def _put_string(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string field too long")
    out += _U16.pack(len(raw))
    out += raw


def encode_tensors(tensors: list[np.ndarray]) -> bytes:
    """Encodes arrays as the wire tensor block (float64, row-major)."""
    out = bytearray(_U32.pack(len(tensors)))
    for t in tensors:
        arr = np.ascontiguousarray(t, dtype=np.float64)
        if arr.ndim > 255:
            raise ProtocolError("tensor rank exceeds wire format limit")
        out.append(arr.ndim)
        for dim in arr.shape:
            out += _U32.pack(dim)
        out += arr.tobytes()
    return bytes(out)


def _read_tensors(r: _Reader) -> list[np.ndarray]:
    count = r.u32()
    tensors = []
    for _ in range(count):
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        n = 1
        for dim in shape:
            n *= dim
        raw = r.take(8 * n)
        tensors.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    return tensors


def encode_metrics(metrics: dict[str, float]) -> bytes:
    out = bytearray(_U32.pack(len(metrics)))
    for key in sorted(metrics):
        _put_string(out, key)
        out += _F64.pack(float(metrics[key]))
    return bytes(out)


def _read_metrics(r: _Reader) -> dict[str, float]:
    count = r.u32()
    return {r.string(): r.f64() for _ in range(count)}


def _enum_byte(value: str, allowed: tuple[str, ...], label: str) -> int:
    try:
        return allowed.index(value)
    except ValueError:
        raise ProtocolError(f"unknown {label} {value!r}") from None


def _enum_value(code: int, allowed: tuple[str, ...], label: str) -> str:
    if code >= len(allowed):
        raise ProtocolError(f"unknown {label} code {code}")
    return allowed[code]


def _encode_payload(msg: Message) -> tuple[MessageType, bytes]:
    out = bytearray()
    if isinstance(msg, Hello):
        _put_string(out, msg.client_id)
        return MessageType.HELLO, bytes(out)
    if isinstance(msg, RoundConfig):
        out += _U32.pack(msg.round_number)
        out += _U32.pack(msg.total_rounds)
        out += _U32.pack(msg.local_epochs)
        out += _U32.pack(msg.batch_size)
        out.append(_enum_byte(msg.optimizer, _OPTIMIZERS, "optimizer"))
        out.append(_enum_byte(msg.sampling, _SAMPLING, "sampling mode"))
        out.append(_enum_byte(msg.dp_mode, _DP_MODES, "dp mode"))
        for v in (msg.lr, msg.dropout, msg.target_epsilon, msg.delta,
                  msg.clip_norm, msg.noise_multiplier):
            out += _F64.pack(float(v))
        out += encode_tensors(msg.weights)
        return MessageType.ROUND_CONFIG, bytes(out)
    if isinstance(msg, FitResult):
        _put_string(out, msg.client_id)
        out += _U32.pack(msg.round_number)
        out += _U32.pack(msg.num_examples)
        out += encode_tensors(msg.weights)
        out += encode_metrics(msg.metrics)
        return MessageType.FIT_RESULT, bytes(out)
    if isinstance(msg, EvalRequest):
        out += _U32.pack(msg.round_number)
        out += encode_tensors(msg.weights)
        return MessageType.EVAL_REQUEST, bytes(out)
    if isinstance(msg, EvalResult):
        _put_string(out, msg.client_id)
        out += _U32.pack(msg.round_number)
        out += _U32.pack(msg.num_examples)
        out += encode_metrics(msg.metrics)
        return MessageType.EVAL_RESULT, bytes(out)
    if isinstance(msg, Shutdown):
        return MessageType.SHUTDOWN, b""
    raise ProtocolError(f"cannot encode object of type {type(msg).__name__}")


def encode_message(msg: Message) -> bytes:
    mtype, payload = _encode_payload(msg)
    return MAGIC + bytes([VERSION, mtype]) + _U32.pack(len(payload)) + payload


def _decode_payload(mtype: int, payload: bytes) -> Message:
    r = _Reader(payload)
    if mtype == MessageType.HELLO:
        msg: Message = Hello(client_id=r.string())
    elif mtype == MessageType.ROUND_CONFIG:
        round_number = r.u32()
        total_rounds = r.u32()
        local_epochs = r.u32()
        batch_size = r.u32()
        optimizer = _enum_value(r.u8(), _OPTIMIZERS, "optimizer")
        sampling = _enum_value(r.u8(), _SAMPLING, "sampling mode")
        dp_mode = _enum_value(r.u8(), _DP_MODES, "dp mode")
        lr, dropout, target_epsilon, delta, clip_norm, noise_multiplier = (
            r.f64() for _ in range(6)
        )
        msg = RoundConfig(
            round_number=round_number,
            total_rounds=total_rounds,
            local_epochs=local_epochs,
            batch_size=batch_size,
            optimizer=optimizer,
            sampling=sampling,
            dp_mode=dp_mode,
            lr=lr,
            dropout=dropout,
            target_epsilon=target_epsilon,
            delta=delta,
            clip_norm=clip_norm,
            noise_multiplier=noise_multiplier,
            weights=_read_tensors(r),
        )
    elif mtype == MessageType.FIT_RESULT:
        msg = FitResult(
            client_id=r.string(),
            round_number=r.u32(),
            num_examples=r.u32(),
            weights=_read_tensors(r),
            metrics=_read_metrics(r),
        )
    elif mtype == MessageType.EVAL_REQUEST:
        msg = EvalRequest(round_number=r.u32(), weights=_read_tensors(r))
    elif mtype == MessageType.EVAL_RESULT:
        msg = EvalResult(
            client_id=r.string(),
            round_number=r.u32(),
            num_examples=r.u32(),
            metrics=_read_metrics(r),
        )
    elif mtype == MessageType.SHUTDOWN:
        msg = Shutdown()
    else:
        raise ProtocolError(f"unknown message type 0x{mtype:02x}")
    r.done()
    return msg


def decode_message(data: bytes) -> Message:
    """Decodes one complete frame; the buffer must contain exactly one frame."""
    if len(data) < HEADER_LEN:
        raise ProtocolError("frame shorter than header")
    if data[:4] != MAGIC:
        raise ProtocolError(f"bad magic {data[:4]!r}")
    if data[4] != VERSION:
        raise ProtocolError(f"unsupported protocol version {data[4]}")
    mtype = data[5]
    (length,) = _U32.unpack(data[6:10])
    if len(data) - HEADER_LEN != length:
        raise ProtocolError(
            f"frame length mismatch: header says {length}, "
            f"got {len(data) - HEADER_LEN} payload bytes"
        )
    return _decode_payload(mtype, data[HEADER_LEN:])


def read_message(sock) -> Message:
    """Reads one frame from a socket-like object with recv()."""
    header = _recv_exact(sock, HEADER_LEN)
    if header[:4] != MAGIC:
        raise ProtocolError(f"bad magic {header[:4]!r}")
    if header[4] != VERSION:
        raise ProtocolError(f"unsupported protocol version {header[4]}")
    (length,) = _U32.unpack(header[6:10])
    payload = _recv_exact(sock, length) if length else b""
    return _decode_payload(header[5], payload)


def write_message(sock, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)
