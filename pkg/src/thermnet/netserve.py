"""Framed TCP protocol: clients quantize frames locally, the server classifies.

Every message is ``b"DTI1" | type:u8 | length:u32 | payload`` (little-endian).

=========== ==== ==========================================================
type        code payload
=========== ==== ==========================================================
HELLO       1    version:u16, side:u16
HELLO_ACK   2    version:u16, side:u16 (the model's input side)
FRAME       3    seq:u64, side:u16, lo:u8, hi:u8, dynamics:f32, side*side u8
PREDICTION  4    seq:u64, score:f32, threshold:f32, flag:u8 [, name:str16]
ERROR       5    message:str16
BYE         6    (empty)
=========== ==== ==========================================================

``str16`` is a u16 byte count followed by UTF-8. A session is HELLO /
HELLO_ACK, then one PREDICTION per FRAME in order, then BYE.
"""

from __future__ import annotations

import itertools
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import list_corpus, resize_bilinear
from .errors import (
    BadMagic,
    ConnectionLost,
    LengthMismatch,
    ProtocolError,
    TruncatedPayload,
    UnknownType,
)
from .model import Model, load_model
from .thermal import QuantizationRange, QuantizedImage, ThermalFrame, crop_and_quantize, read_dtif
from .training import predict_gated

log = logging.getLogger(__name__)

MAGIC = b"DTI1"
PROTOCOL_VERSION = 1
_HEADER = struct.Struct("<4sBI")
HEADER_SIZE = _HEADER.size
MAX_PAYLOAD = 1 << 24

HELLO, HELLO_ACK, FRAME, PREDICTION, ERROR, BYE = range(1, 7)


@dataclass(frozen=True)
class Hello:
    version: int
    side: int


@dataclass(frozen=True)
class HelloAck:
    version: int
    side: int


@dataclass(frozen=True)
class Frame:
    seq: int
    side: int
    lo: int
    hi: int
    dynamics: float
    pixels: bytes

    @classmethod
    def from_image(cls, seq: int, image: QuantizedImage) -> "Frame":
        if image.lo < 0 or image.hi > 255:
            raise ValueError("wire frames carry 8-bit pixels; range must lie in [0, 255]")
        dyn = float(np.float32(image.dynamics))
        return cls(seq, image.n, image.lo, image.hi, dyn, image.pixels.astype(np.uint8).tobytes())

    def to_image(self) -> QuantizedImage:
        pixels = np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.side, self.side)
        return QuantizedImage(pixels.astype(np.int64), self.dynamics, self.lo, self.hi)


@dataclass(frozen=True)
class Prediction:
    seq: int
    label: str | None
    score: float
    threshold: float


@dataclass(frozen=True)
class Error:
    message: str


@dataclass(frozen=True)
class Bye:
    pass


def _str16(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValueError("string too long for the wire")
    return struct.pack("<H", len(b)) + b


def _read_str16(payload: bytes, offset: int) -> tuple:
    if offset + 2 > len(payload):
        raise LengthMismatch("missing string length")
    (n,) = struct.unpack_from("<H", payload, offset)
    end = offset + 2 + n
    if end > len(payload):
        raise LengthMismatch("string runs past the payload")
    try:
        return payload[offset + 2 : end].decode("utf-8"), end
    except UnicodeDecodeError:
        raise ProtocolError("invalid UTF-8 string") from None


def encode_payload(msg) -> tuple:
    if isinstance(msg, Hello):
        return HELLO, struct.pack("<HH", msg.version, msg.side)
    if isinstance(msg, HelloAck):
        return HELLO_ACK, struct.pack("<HH", msg.version, msg.side)
    if isinstance(msg, Frame):
        if len(msg.pixels) != msg.side * msg.side:
            raise ValueError("frame pixel count does not match its side")
        head = struct.pack("<QHBBf", msg.seq, msg.side, msg.lo, msg.hi, msg.dynamics)
        return FRAME, head + bytes(msg.pixels)
    if isinstance(msg, Prediction):
        flag = msg.label is not None
        body = struct.pack("<QffB", msg.seq, msg.score, msg.threshold, int(flag))
        if flag:
            body += _str16(msg.label)
        return PREDICTION, body
    if isinstance(msg, Error):
        return ERROR, _str16(msg.message)
    if isinstance(msg, Bye):
        return BYE, b""
    raise TypeError(f"not a protocol message: {msg!r}")


def encode_message(msg) -> bytes:
    code, payload = encode_payload(msg)
    return _HEADER.pack(MAGIC, code, len(payload)) + payload


def parse_header(header: bytes) -> tuple:
    if len(header) >= 4 and header[:4] != MAGIC:
        raise BadMagic("bad magic")
    if len(header) < HEADER_SIZE:
        raise TruncatedPayload("incomplete message header")
    _, code, length = _HEADER.unpack_from(header)
    if not HELLO <= code <= BYE:
        raise UnknownType(f"unknown message type {code}")
    if length > MAX_PAYLOAD:
        raise LengthMismatch(f"declared payload of {length} bytes exceeds the {MAX_PAYLOAD} limit")
    return code, length


def decode_payload(code: int, payload: bytes):
    n = len(payload)
    if code in (HELLO, HELLO_ACK):
        if n != 4:
            raise LengthMismatch(f"expected 4-byte payload, got {n}")
        version, side = struct.unpack("<HH", payload)
        return (Hello if code == HELLO else HelloAck)(version, side)
    if code == FRAME:
        if n < 16:
            raise LengthMismatch("frame header too short")
        seq, side, lo, hi, dyn = struct.unpack_from("<QHBBf", payload)
        if n != 16 + side * side:
            raise LengthMismatch(f"frame of side {side} needs {16 + side * side} bytes, got {n}")
        return Frame(seq, side, lo, hi, dyn, bytes(payload[16:]))
    if code == PREDICTION:
        if n < 17:
            raise LengthMismatch("prediction payload too short")
        seq, score, threshold, flag = struct.unpack_from("<QffB", payload)
        label, end = None, 17
        if flag == 1:
            label, end = _read_str16(payload, 17)
        elif flag != 0:
            raise ProtocolError(f"invalid prediction flag {flag}")
        if end != n:
            raise LengthMismatch("trailing bytes in prediction payload")
        return Prediction(seq, label, score, threshold)
    if code == ERROR:
        message, end = _read_str16(payload, 0)
        if end != n:
            raise LengthMismatch("trailing bytes in error payload")
        return Error(message)
    if code == BYE:
        if n:
            raise LengthMismatch("BYE carries no payload")
        return Bye()
    raise UnknownType(f"unknown message type {code}")


def decode_message(buf: bytes):
    """Decode exactly one message occupying the whole of ``buf``."""
    code, length = parse_header(buf)
    available = len(buf) - HEADER_SIZE
    if available < length:
        raise TruncatedPayload(f"payload declares {length} bytes, only {available} present")
    if available > length:
        raise LengthMismatch(f"{available - length} bytes beyond the declared payload")
    return decode_payload(code, bytes(buf[HEADER_SIZE:]))


def _recv_exact(sock_file, n: int) -> bytes:
    data = sock_file.read(n)
    return data if data is not None else b""


def read_message(sock_file):
    """Read one message from a binary file object; ``None`` on clean EOF."""
    header = _recv_exact(sock_file, HEADER_SIZE)
    if not header:
        return None
    code, length = parse_header(header)
    payload = _recv_exact(sock_file, length)
    if len(payload) < length:
        raise TruncatedPayload(f"connection closed after {len(payload)} of {length} payload bytes")
    return decode_payload(code, payload)


# --- server -----------------------------------------------------------------


def parse_address(addr: str) -> tuple:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv: ClassificationServer = self.server
        try:
            self._session(srv)
        except ProtocolError as exc:
            self._send(Error(str(exc)))
        except (ConnectionError, OSError):
            log.debug("client %s dropped", self.client_address)

    def _send(self, msg):
        try:
            self.wfile.write(encode_message(msg))
            self.wfile.flush()
        except OSError:
            pass

    def _session(self, srv):
        first = read_message(self.rfile)
        if first is None:
            return
        if not isinstance(first, Hello):
            raise ProtocolError("expected HELLO")
        if first.version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {first.version}")
        side = first.side
        self._send(HelloAck(PROTOCOL_VERSION, srv.model.input_side))
        last_seq = -1
        while True:
            msg = read_message(self.rfile)
            if msg is None or isinstance(msg, Bye):
                return
            if not isinstance(msg, Frame):
                raise ProtocolError(f"unexpected {type(msg).__name__} message")
            if msg.side != side:
                raise ProtocolError(f"frame side {msg.side} differs from HELLO side {side}")
            if msg.seq <= last_seq:
                raise ProtocolError("sequence numbers must increase")
            last_seq = msg.seq
            self._send(srv.classify(msg))


class ClassificationServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model: Model, address: tuple, threshold: float = 0.5):
        self.model = model
        self.threshold = threshold
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def classify(self, frame: Frame) -> Prediction:
        image = frame.to_image()
        if image.n != self.model.input_side:
            image = resize_bilinear(image, self.model.input_side)
        gated = predict_gated(self.model, image, self.threshold)
        label = None if gated.class_index is None else self.model.class_labels[gated.class_index]
        return Prediction(frame.seq, label, gated.score, float(np.float32(self.threshold)))


def start_server(model, bind_addr: str = "127.0.0.1:0", threshold: float = 0.5) -> ClassificationServer:
    """Start serving in a background thread; call ``shutdown()`` to stop."""
    if not isinstance(model, Model):
        model = load_model(model)
    server = ClassificationServer(model, parse_address(bind_addr), threshold)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


def serve(model_path, bind_addr: str, threshold: float = 0.5) -> None:
    """Blocking server entry point."""
    model = load_model(model_path)
    with ClassificationServer(model, parse_address(bind_addr), threshold) as server:
        log.info("serving %s on %s", model_path, server.address)
        server.serve_forever()


# --- client -----------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRecord:
    seq: int
    label: str | None
    score: float
    source: str = ""

    def log_line(self) -> str:
        return f"{self.seq}\t{self.label if self.label is not None else '-'}\t{self.score:.9g}\n"


def _iter_source(source, crop_n, qrange):
    """Yield (source_name, QuantizedImage) pairs from a corpus dir or an iterable."""
    if isinstance(source, (str, Path)):
        root = Path(source)
        for entry in list_corpus(root):
            frame = read_dtif(entry.path)
            yield entry.path.relative_to(root).as_posix(), crop_and_quantize(frame, crop_n, qrange)
        return
    for k, item in enumerate(source):
        if isinstance(item, ThermalFrame):
            yield str(k), crop_and_quantize(item, crop_n, qrange)
        elif isinstance(item, QuantizedImage):
            yield str(k), item
        else:
            raise TypeError(f"cannot stream {type(item).__name__}")


def client_stream(
    source,
    server_addr: str,
    crop_n: int = 75,
    qrange: QuantizationRange = QuantizationRange(),
    log_path=None,
    timeout: float = 30.0,
) -> list:
    """Quantize frames locally, stream them, and collect gated predictions."""
    try:
        sock = socket.create_connection(parse_address(server_addr), timeout=timeout)
    except OSError as exc:
        raise ConnectionLost(f"cannot reach server {server_addr}: {exc}") from None
    records = []
    with sock, sock.makefile("rb") as rfile, sock.makefile("wb") as wfile:

        def send(msg):
            try:
                wfile.write(encode_message(msg))
                wfile.flush()
            except OSError as exc:
                raise ConnectionLost(str(exc)) from None

        def receive():
            try:
                msg = read_message(rfile)
            except OSError as exc:
                raise ConnectionLost(str(exc)) from None
            if msg is None:
                raise ConnectionLost("server closed the connection")
            if isinstance(msg, Error):
                raise ProtocolError(f"server error: {msg.message}")
            return msg

        items = iter(_iter_source(source, crop_n, qrange))
        first = next(items, None)
        side = first[1].n if first is not None else crop_n
        send(Hello(PROTOCOL_VERSION, side))
        ack = receive()
        if not isinstance(ack, HelloAck):
            raise ProtocolError(f"expected HELLO_ACK, got {type(ack).__name__}")
        seq = 0
        stream = itertools.chain([first], items) if first is not None else ()
        for name, image in stream:
            send(Frame.from_image(seq, image))
            reply = receive()
            if not isinstance(reply, Prediction) or reply.seq != seq:
                raise ProtocolError(f"expected PREDICTION for seq {seq}, got {reply!r}")
            records.append(PredictionRecord(seq, reply.label, reply.score, name))
            seq += 1
        send(Bye())
    if log_path is not None:
        Path(log_path).write_text("".join(r.log_line() for r in records), encoding="utf-8")
    return records


def read_prediction_log(path) -> list:
    """Parse a prediction log; scores come back as the exact wire float32 values."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        seq, label, score = line.split("\t")
        out.append(PredictionRecord(int(seq), None if label == "-" else label, float(np.float32(score))))
    return out
