"""OMA-TLV codec.

Type byte layout::

    bits 7-6  record kind (00 object instance, 01 resource instance,
              10 multiple resource, 11 resource with value)
    bit  5    id width (0: 8-bit, 1: 16-bit)
    bits 4-3  length width (00: length in bits 2-0, 01/10/11: 8/16/24-bit field)
    bits 2-0  length when the length width is 00

Ids and lengths are big-endian. The encoder always picks the narrowest id and
length fields and emits resources in ascending id order; the decoder accepts
only that canonical form, so every payload it accepts re-encodes to itself.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Mapping, Optional

from .errors import Malformed, ValueTooLarge
from .model import ObjectInstance, ObjLink, ResourceKind, check_value, kind_of

MAX_DEPTH = 2
MAX_LENGTH = 0xFFFFFF


class TlvKind(enum.IntEnum):
    OBJECT_INSTANCE = 0
    RESOURCE_INSTANCE = 1
    MULTIPLE_RESOURCE = 2
    RESOURCE = 3


CONTAINERS = {
    TlvKind.OBJECT_INSTANCE: {TlvKind.RESOURCE, TlvKind.MULTIPLE_RESOURCE},
    TlvKind.MULTIPLE_RESOURCE: {TlvKind.RESOURCE_INSTANCE},
}


@dataclass(frozen=True)
class TlvRecord:
    kind: TlvKind
    id: int
    value: bytes


def encode_record(record: TlvRecord) -> bytes:
    if not 0 <= record.id <= 0xFFFF:
        raise ValueError(f"TLV id {record.id} is not 16-bit")
    n = len(record.value)
    if n > MAX_LENGTH:
        raise ValueTooLarge(f"{n} bytes do not fit a 24-bit length field")
    type_byte = record.kind << 6
    if record.id > 0xFF:
        type_byte |= 0x20
        ident = record.id.to_bytes(2, "big")
    else:
        ident = bytes([record.id])
    if n <= 7:
        type_byte |= n
        length = b""
    elif n <= 0xFF:
        type_byte |= 0x08
        length = bytes([n])
    elif n <= 0xFFFF:
        type_byte |= 0x10
        length = n.to_bytes(2, "big")
    else:
        type_byte |= 0x18
        length = n.to_bytes(3, "big")
    return bytes([type_byte]) + ident + length + record.value


def encode_records(records) -> bytes:
    return b"".join(encode_record(r) for r in records)


def decode_records(payload: bytes, _depth: int = 1) -> list[TlvRecord]:
    """Split a payload into records, validating nested containers."""
    payload = bytes(payload)
    records = []
    pos = 0
    while pos < len(payload):
        type_byte = payload[pos]
        pos += 1
        kind = TlvKind(type_byte >> 6)
        id_width = 2 if type_byte & 0x20 else 1
        len_width = (type_byte >> 3) & 0x03
        if pos + id_width + len_width > len(payload):
            raise Malformed("truncated TLV header")
        ident = int.from_bytes(payload[pos:pos + id_width], "big")
        pos += id_width
        if id_width == 2 and ident <= 0xFF:
            raise Malformed("non-minimal TLV id")
        if len_width:
            if type_byte & 0x07:
                raise Malformed("length bits set alongside a length field")
            length = int.from_bytes(payload[pos:pos + len_width], "big")
            pos += len_width
            if length < (8, 0x100, 0x10000)[len_width - 1]:
                raise Malformed("non-minimal TLV length")
        else:
            length = type_byte & 0x07
        if pos + length > len(payload):
            raise Malformed("truncated TLV value")
        value = payload[pos:pos + length]
        pos += length
        if kind in CONTAINERS:
            if _depth >= MAX_DEPTH:
                raise Malformed("TLV nesting deeper than 2 levels")
            children = decode_records(value, _depth + 1)
            if any(c.kind not in CONTAINERS[kind] for c in children):
                raise Malformed(f"{kind.name} holds an invalid child record")
            _check_ascending(children)
        records.append(TlvRecord(kind, ident, value))
    return records


def _check_ascending(records) -> None:
    ids = [r.id for r in records]
    if any(a >= b for a, b in zip(ids, ids[1:])):
        raise Malformed("TLV ids must be unique and ascending")


# value encodings

def encode_value(value) -> bytes:
    kind = kind_of(value)
    check_value(value)
    if kind is ResourceKind.BOOLEAN:
        return b"\x01" if value else b"\x00"
    if kind is ResourceKind.INTEGER:
        for width in (1, 2, 4, 8):
            if -(1 << (8 * width - 1)) <= value < (1 << (8 * width - 1)):
                return value.to_bytes(width, "big", signed=True)
    if kind is ResourceKind.STRING:
        return value.encode("utf-8")
    if kind is ResourceKind.OBJLNK:
        return struct.pack(">HH", *value)
    return bytes(value)


def decode_value(raw: bytes, kind: ResourceKind):
    if kind is ResourceKind.BOOLEAN:
        if raw not in (b"\x00", b"\x01"):
            raise Malformed("boolean must be a single 0 or 1 byte")
        return raw == b"\x01"
    if kind is ResourceKind.INTEGER:
        if len(raw) not in (1, 2, 4, 8):
            raise Malformed(f"integer of {len(raw)} bytes")
        value = int.from_bytes(raw, "big", signed=True)
        if encode_value(value) != raw:
            raise Malformed("non-minimal integer")
        return value
    if kind is ResourceKind.STRING:
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise Malformed(f"invalid UTF-8: {exc}") from None
    if kind is ResourceKind.OBJLNK:
        if len(raw) != 4:
            raise Malformed("object link must be 4 bytes")
        return ObjLink(*struct.unpack(">HH", raw))
    if len(raw) > 1024:
        raise Malformed("opaque value above the 1024 byte cap")
    return bytes(raw)


# instance codec

def _resource_records(resources: Mapping[int, object]) -> list[TlvRecord]:
    return [TlvRecord(TlvKind.RESOURCE, rid, encode_value(resources[rid])) for rid in sorted(resources)]


def tlv_encode(instance: ObjectInstance | Mapping[int, object], wrap: bool = False) -> bytes:
    """Encode an instance's resources; ``wrap`` adds the object-instance record."""
    if isinstance(instance, ObjectInstance):
        resources, iid = instance.resources, instance.instance_id
    else:
        resources, iid = instance, None
    body = encode_records(_resource_records(resources))
    if not wrap:
        return body
    if iid is None:
        raise ValueError("wrapping needs an instance id")
    return encode_record(TlvRecord(TlvKind.OBJECT_INSTANCE, iid, body))


def _typed(records, kinds: Optional[Mapping[int, ResourceKind]]) -> dict:
    out = {}
    for rec in records:
        if rec.kind is not TlvKind.RESOURCE:
            raise Malformed(f"unsupported {rec.kind.name} record")
        if kinds is None:
            out[rec.id] = rec.value
        elif rec.id not in kinds:
            raise Malformed(f"undeclared resource {rec.id}")
        else:
            out[rec.id] = decode_value(rec.value, kinds[rec.id])
    return out


def tlv_decode(payload: bytes, kinds: Optional[Mapping[int, ResourceKind]] = None) -> dict:
    """Decode a flat run of resource records.

    Without ``kinds`` the values stay raw bytes; with a resource-kind mapping
    they are converted to typed values.
    """
    records = decode_records(payload)
    _check_ascending(records)
    return _typed(records, kinds)


def tlv_decode_instance(payload: bytes, kinds: Optional[Mapping[int, ResourceKind]] = None):
    """Decode either a flat run of resources or one wrapping object-instance record.

    Returns ``(instance_id or None, resources)``.
    """
    records = decode_records(payload)
    if records and records[0].kind is TlvKind.OBJECT_INSTANCE:
        if len(records) != 1:
            raise Malformed("expected a single object-instance record")
        return records[0].id, tlv_decode(records[0].value, kinds)
    _check_ascending(records)
    return None, _typed(records, kinds)
