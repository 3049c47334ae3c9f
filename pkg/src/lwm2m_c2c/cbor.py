"""Deterministic CBOR subset.

Supports unsigned/negative integers, byte and text strings, arrays, maps,
booleans and null, all with definite lengths. Encoding follows the canonical
rules (shortest argument, map keys ordered by their encoded bytes, shorter
first). Decoding is strict and rejects anything the encoder would not have
produced, raising :class:`~lwm2m_c2c.errors.Malformed`.
"""

from __future__ import annotations

from .errors import Malformed

MAX_NESTING = 16


def _head(major: int, arg: int) -> bytes:
    if arg < 24:
        return bytes([major << 5 | arg])
    for ai, width in ((24, 1), (25, 2), (26, 4), (27, 8)):
        if arg < 1 << (8 * width):
            return bytes([major << 5 | ai]) + arg.to_bytes(width, "big")
    raise ValueError("CBOR argument exceeds 64 bits")


def dumps(obj) -> bytes:
    if obj is False:
        return b"\xf4"
    if obj is True:
        return b"\xf5"
    if obj is None:
        return b"\xf6"
    if isinstance(obj, int):
        return _head(0, obj) if obj >= 0 else _head(1, -1 - obj)
    if isinstance(obj, (bytes, bytearray)):
        return _head(2, len(obj)) + bytes(obj)
    if isinstance(obj, str):
        raw = obj.encode("utf-8")
        return _head(3, len(raw)) + raw
    if isinstance(obj, (list, tuple)):
        return _head(4, len(obj)) + b"".join(dumps(x) for x in obj)
    if isinstance(obj, dict):
        items = sorted(((dumps(k), dumps(v)) for k, v in obj.items()), key=lambda kv: (len(kv[0]), kv[0]))
        return _head(5, len(items)) + b"".join(k + v for k, v in items)
    raise TypeError(f"cannot CBOR-encode {type(obj).__name__}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Malformed("truncated CBOR item")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def item(self, depth: int = 0):
        if depth > MAX_NESTING:
            raise Malformed("CBOR nesting too deep")
        initial = self.take(1)[0]
        major, ai = initial >> 5, initial & 0x1F
        if major == 7:
            simple = {20: False, 21: True, 22: None}
            if ai not in simple:
                raise Malformed(f"unsupported simple/float value {ai}")
            return simple[ai]
        if major == 6:
            raise Malformed("CBOR tags are not supported")
        if ai < 24:
            arg = ai
        elif ai <= 27:
            width = 1 << (ai - 24)
            arg = int.from_bytes(self.take(width), "big")
            if arg < (24 if width == 1 else 1 << (4 * width)):
                raise Malformed("non-minimal CBOR argument")
        else:
            raise Malformed("indefinite or reserved CBOR length")
        if major == 0:
            return arg
        if major == 1:
            return -1 - arg
        if major == 2:
            return self.take(arg)
        if major == 3:
            try:
                return self.take(arg).decode("utf-8")
            except UnicodeDecodeError:
                raise Malformed("invalid UTF-8 in CBOR text") from None
        if major == 4:
            if arg > len(self.data):
                raise Malformed("array length exceeds payload")
            return [self.item(depth + 1) for _ in range(arg)]
        # major 5: map
        if arg > len(self.data):
            raise Malformed("map length exceeds payload")
        out = {}
        last_key = None
        for _ in range(arg):
            start = self.pos
            key = self.item(depth + 1)
            raw_key = self.data[start:self.pos]
            if isinstance(key, (list, dict)):
                raise Malformed("unhashable CBOR map key")
            if last_key is not None and (len(raw_key), raw_key) <= (len(last_key), last_key):
                raise Malformed("CBOR map keys not in canonical order")
            last_key = raw_key
            out[key] = self.item(depth + 1)
        return out


def loads(data: bytes):
    reader = _Reader(bytes(data))
    obj = reader.item()
    if reader.pos != len(reader.data):
        raise Malformed("trailing bytes after CBOR item")
    return obj
