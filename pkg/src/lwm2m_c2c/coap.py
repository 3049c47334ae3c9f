"""CoAP message model and its RFC 7252 wire framing.

Options are emitted sorted by number with delta encoding; repeated options
keep their relative order. Decoding returns them in the same sorted order, so
``decode(encode(m)) == m`` whenever ``m.options`` is already sorted.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .errors import Malformed
from .model import Path

PAYLOAD_MARKER = 0xFF
MAX_TOKEN = 8
MAX_OPTION_NUMBER = 0xFFFF
MAX_OPTION_LENGTH = 0xFFFF + 269
VERSION = 1


class Kind(enum.IntEnum):
    CON = 0
    NON = 1
    ACK = 2
    RST = 3


class Code(enum.IntEnum):
    EMPTY = 0x00
    GET = 0x01
    POST = 0x02
    PUT = 0x03
    DELETE = 0x04
    CREATED = 0x41
    DELETED = 0x42
    CHANGED = 0x44
    CONTENT = 0x45
    BAD_REQUEST = 0x80
    UNAUTHORIZED = 0x81
    FORBIDDEN = 0x83
    NOT_FOUND = 0x84
    METHOD_NOT_ALLOWED = 0x85
    INTERNAL_ERROR = 0xA0

    @property
    def dotted(self) -> str:
        return f"{self >> 5}.{self & 0x1F:02d}"

    @property
    def is_request(self) -> bool:
        return 1 <= self <= 4

    @property
    def is_success(self) -> bool:
        return self >> 5 == 2


class Option(enum.IntEnum):
    OBSERVE = 6
    LOCATION_PATH = 8
    URI_PATH = 11
    CONTENT_FORMAT = 12
    URI_QUERY = 15
    ACCEPT = 17


LINK_FORMAT = 40
TLV_FORMAT = 11542


def uint_bytes(value: int) -> bytes:
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


@dataclass
class Message:
    kind: Kind
    code: Code
    message_id: int
    token: bytes = b""
    options: list = field(default_factory=list)
    payload: bytes = b""

    def option_values(self, number: int) -> list[bytes]:
        return [v for n, v in self.options if n == number]

    def option(self, number: int) -> Optional[bytes]:
        values = self.option_values(number)
        return values[0] if values else None

    @property
    def uri_path(self) -> list[str]:
        return [v.decode("utf-8", "replace") for v in self.option_values(Option.URI_PATH)]

    @property
    def uri_query(self) -> list[str]:
        return [v.decode("utf-8", "replace") for v in self.option_values(Option.URI_QUERY)]

    @property
    def location_path(self) -> list[str]:
        return [v.decode("utf-8", "replace") for v in self.option_values(Option.LOCATION_PATH)]

    @property
    def path(self) -> Optional[Path]:
        try:
            return Path.from_segments(self.uri_path)
        except ValueError:
            return None

    @property
    def observe(self) -> Optional[int]:
        raw = self.option(Option.OBSERVE)
        return None if raw is None else int.from_bytes(raw, "big")

    @property
    def accept(self) -> Optional[int]:
        raw = self.option(Option.ACCEPT)
        return None if raw is None else int.from_bytes(raw, "big")

    def with_(self, **changes) -> "Message":
        return replace(self, **changes)


def _option_nibble(value: int) -> tuple[int, bytes]:
    if value < 13:
        return value, b""
    if value < 269:
        return 13, bytes([value - 13])
    return 14, (value - 269).to_bytes(2, "big")


def encode(msg: Message) -> bytes:
    if len(msg.token) > MAX_TOKEN:
        raise ValueError("token longer than 8 bytes")
    out = bytearray(struct.pack(">BBH", VERSION << 6 | msg.kind << 4 | len(msg.token), msg.code, msg.message_id))
    out += msg.token
    previous = 0
    # stable sort keeps repeated options (path segments, queries) in order
    for number, value in sorted(msg.options, key=lambda o: o[0]):
        if not 0 <= number <= MAX_OPTION_NUMBER:
            raise ValueError(f"option number {number} out of range")
        if len(value) > MAX_OPTION_LENGTH:
            raise ValueError("option value too long")
        delta, delta_ext = _option_nibble(number - previous)
        length, length_ext = _option_nibble(len(value))
        out.append(delta << 4 | length)
        out += delta_ext + length_ext + value
        previous = number
    if msg.payload:
        out.append(PAYLOAD_MARKER)
        out += msg.payload
    return bytes(out)


def _read_nibble(nibble: int, data: bytes, pos: int) -> tuple[int, int]:
    if nibble < 13:
        return nibble, pos
    if nibble == 13:
        if pos + 1 > len(data):
            raise Malformed("truncated option extension")
        return data[pos] + 13, pos + 1
    if nibble == 14:
        if pos + 2 > len(data):
            raise Malformed("truncated option extension")
        return int.from_bytes(data[pos:pos + 2], "big") + 269, pos + 2
    raise Malformed("reserved option nibble 15")


def decode(data: bytes) -> Message:
    data = bytes(data)
    if len(data) < 4:
        raise Malformed("message shorter than the fixed header")
    first, code, mid = struct.unpack(">BBH", data[:4])
    version, kind, tkl = first >> 6, (first >> 4) & 0x3, first & 0xF
    if version != VERSION:
        raise Malformed(f"unsupported version {version}")
    try:
        kind, code = Kind(kind), Code(code)
    except ValueError:
        raise Malformed("unknown message kind or code") from None
    if tkl > MAX_TOKEN or 4 + tkl > len(data):
        raise Malformed("bad token length")
    token = data[4:4 + tkl]
    pos = 4 + tkl
    options = []
    payload = b""
    number = 0
    while pos < len(data):
        if data[pos] == PAYLOAD_MARKER:
            payload = data[pos + 1:]
            if not payload:
                raise Malformed("payload marker without payload")
            break
        head = data[pos]
        delta, pos = _read_nibble(head >> 4, data, pos + 1)
        length, pos = _read_nibble(head & 0xF, data, pos)
        number += delta
        if number > MAX_OPTION_NUMBER:
            raise Malformed("option number out of range")
        if pos + length > len(data):
            raise Malformed("truncated option value")
        options.append((number, data[pos:pos + length]))
        pos += length
    if code is Code.EMPTY and (tkl or options or payload):
        raise Malformed("empty message with content")
    return Message(kind, code, mid, token, options, payload)


def path_options(path: Path | Iterable[str]) -> list:
    segments = path.segments if isinstance(path, Path) else list(path)
    return [(Option.URI_PATH, s.encode()) for s in segments]


def request(code: Code, path, *, kind: Kind = Kind.CON, payload: bytes = b"",
            query: Iterable[str] = (), observe: Optional[int] = None,
            accept: Optional[int] = None) -> Message:
    """Build a request; message id and token are filled in by the sender."""
    options = []
    if observe is not None:
        options.append((Option.OBSERVE, uint_bytes(observe)))
    options += path_options(path)
    options += [(Option.URI_QUERY, q.encode()) for q in query]
    if accept is not None:
        options.append((Option.ACCEPT, uint_bytes(accept)))
    return Message(kind, code, 0, b"", options, payload)


def response_to(req: Message, code: Code, payload: bytes = b"", options=None) -> Message:
    """Piggybacked ACK for a confirmable request, NON otherwise."""
    kind = Kind.ACK if req.kind is Kind.CON else Kind.NON
    return Message(kind, code, req.message_id, req.token, list(options or []), payload)
