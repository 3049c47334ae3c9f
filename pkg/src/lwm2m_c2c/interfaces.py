"""Device management, information reporting and registration handlers.

``handle_request`` is the single entry point for requests arriving at a
hosting node. Servers and requesting clients share the same handlers; what
differs is the access decision and the shape of denials:

* anonymous principals always get 4.01 with owner server hints, whether the
  target exists or not;
* a client without the discover bit on the target gets that same 4.01 for
  hidden and for absent targets, and a 4.04 only when it may discover;
* servers get the usual 4.04 / 4.01 split.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterable, Optional

from . import objects
from .acl import AccessFlags, ClientAclInstance, Principal, apply_create_side_effects, check_access
from .coap import LINK_FORMAT, TLV_FORMAT, Code, Kind, Message, Option, response_to, uint_bytes
from .errors import (
    DuplicateEndpoint,
    Forbidden,
    Lwm2mError,
    Malformed,
    NotFound,
    ObservationEvicted,
    OwnerUnknown,
    TypeMismatch,
    ValueTooLarge,
)
from .model import (
    ACCESS_CONTROL,
    CLIENT,
    CLIENT_ACCESS_CONTROL,
    CLIENT_SECURITY,
    OSCORE,
    RESERVED_OBJECTS,
    ObjectInstance,
    Path,
)
from .tlv import decode_value, encode_value, tlv_decode_instance, tlv_encode

if TYPE_CHECKING:
    from .node import Lwm2mClient

MAX_OBSERVATIONS = 16


class Operation(enum.Enum):
    READ = "read"
    OBSERVE = "observe"
    CANCEL = "cancel"
    DISCOVER = "discover"
    WRITE = "write"
    PARTIAL_WRITE = "partial-write"
    CREATE = "create"
    EXECUTE = "execute"
    DELETE = "delete"


REQUIRED_FLAG = {
    Operation.READ: AccessFlags.READ,
    Operation.OBSERVE: AccessFlags.READ,
    Operation.CANCEL: AccessFlags.READ,
    Operation.DISCOVER: AccessFlags.DISCOVER,
    Operation.WRITE: AccessFlags.WRITE,
    Operation.PARTIAL_WRITE: AccessFlags.WRITE,
    Operation.CREATE: AccessFlags.CREATE,
    Operation.EXECUTE: AccessFlags.EXECUTE,
    Operation.DELETE: AccessFlags.DELETE,
}


def classify(msg: Message, path: Path) -> Optional[Operation]:
    if msg.code is Code.GET:
        if msg.accept == LINK_FORMAT:
            return Operation.DISCOVER
        if msg.observe == 0:
            return Operation.OBSERVE
        if msg.observe == 1:
            return Operation.CANCEL
        return Operation.READ
    if msg.code is Code.PUT:
        return Operation.WRITE if not path.is_object else None
    if msg.code is Code.POST:
        if path.is_object:
            return Operation.CREATE
        return Operation.PARTIAL_WRITE if path.is_instance else Operation.EXECUTE
    if msg.code is Code.DELETE:
        return Operation.DELETE if path.is_instance else None
    return None


# observations

@dataclass
class Observation:
    observer: Principal
    peer: str
    path: Path
    token: bytes
    counter: int = 0
    confirmable: bool = False


class ObservationTable:
    def __init__(self, cap: int = MAX_OBSERVATIONS):
        self.cap = cap
        self._obs: "OrderedDict[tuple, Observation]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._obs)

    def __iter__(self):
        return iter(list(self._obs.values()))

    def add(self, obs: Observation) -> Observation:
        key = (obs.peer, obs.token)
        if key in self._obs:
            # re-registration with the same token replaces the old one
            del self._obs[key]
        elif len(self._obs) >= self.cap:
            raise ObservationEvicted(f"observation cap of {self.cap} reached")
        self._obs[key] = obs
        return obs

    def remove(self, peer: str, token: bytes) -> Optional[Observation]:
        return self._obs.pop((peer, token), None)

    def drop_peer(self, peer: str) -> int:
        keys = [k for k in self._obs if k[0] == peer]
        for k in keys:
            del self._obs[k]
        return len(keys)

    def drop_path(self, path: Path) -> None:
        for key in [k for k, o in self._obs.items() if path.covers(o.path)]:
            del self._obs[key]

    def matching(self, changed: Path) -> list[Observation]:
        return [o for o in self._obs.values() if o.path.covers(changed) or changed.covers(o.path)]

    def dump(self) -> list[dict]:
        return [
            {"observer": str(o.observer), "peer": o.peer, "path": str(o.path),
             "token": o.token.hex(), "counter": o.counter}
            for o in self._obs.values()
        ]


# registration

@dataclass
class Registration:
    endpoint: str
    address: str
    client_id: int
    lifetime_s: int = 86400
    objects: tuple = ()
    location: str = ""


class Registry:
    """Server-side endpoint directory."""

    def __init__(self):
        self.by_endpoint: Dict[str, Registration] = {}
        self._next_id = 1

    def register(self, endpoint: str, address: str, principal: Principal,
                 lifetime_s: int = 86400, objects_: Iterable[str] = ()) -> Registration:
        if not endpoint:
            raise Malformed("registration without endpoint name")
        if principal.kind == "anonymous":
            raise Forbidden("registration requires an authenticated channel")
        current = self.by_endpoint.get(endpoint)
        if current is not None and current.address != address:
            raise DuplicateEndpoint(f"endpoint {endpoint!r} is already registered")
        if current is not None:
            current.lifetime_s = lifetime_s
            current.objects = tuple(objects_)
            return current
        reg = Registration(endpoint, address, self._next_id, lifetime_s, tuple(objects_),
                           f"rd/{self._next_id}")
        self._next_id += 1
        self.by_endpoint[endpoint] = reg
        return reg

    def by_address(self, address: str) -> Optional[Registration]:
        return next((r for r in self.by_endpoint.values() if r.address == address), None)

    def deregister(self, endpoint: str) -> None:
        self.by_endpoint.pop(endpoint, None)

    def __len__(self) -> int:
        return len(self.by_endpoint)


# content helpers

def encode_content(node: "Lwm2mClient", path: Path) -> tuple[bytes, list]:
    """Payload and options for a read of ``path``."""
    if path.is_resource:
        return encode_value(node.tree.get(path)), []
    if path.is_instance:
        return tlv_encode(node.tree.get(path)), [(Option.CONTENT_FORMAT, uint_bytes(TLV_FORMAT))]
    body = b"".join(tlv_encode(i, wrap=True) for i in node.tree.instances_of(path.object_id))
    return body, [(Option.CONTENT_FORMAT, uint_bytes(TLV_FORMAT))]


def link_format(node: "Lwm2mClient", path: Path) -> bytes:
    links = []
    instances = node.tree.instances_of(path.object_id)
    if path.is_object:
        links.append(f"</{path.object_id}>")
    for inst in instances:
        if path.instance_id is not None and inst.instance_id != path.instance_id:
            continue
        if not path.is_resource:
            links.append(f"</{inst.object_id}/{inst.instance_id}>")
        for rid in sorted(inst.resources):
            if path.resource_id is None or rid == path.resource_id:
                links.append(f"</{inst.object_id}/{inst.instance_id}/{rid}>")
    return ",".join(links).encode()


def notification(node: "Lwm2mClient", obs: Observation, message_id: int) -> Message:
    payload, options = encode_content(node, obs.path)
    kind = Kind.CON if obs.confirmable else Kind.NON
    return Message(kind, Code.CONTENT, message_id, obs.token,
                   [(Option.OBSERVE, uint_bytes(obs.counter))] + options, payload)


# request handling

def _unauthorized(node: "Lwm2mClient", msg: Message, path: Optional[Path]) -> Message:
    from .authorization import hints_for
    hints = hints_for(node, path)
    return response_to(msg, Code.UNAUTHORIZED, hints.encode() if hints else b"")


def handle_request(node: "Lwm2mClient", principal: Principal, msg: Message, peer: str = "") -> Message:
    """Answer one request; ``peer`` is the sender address, used to key observations."""
    path = msg.path
    if path is None or len(msg.uri_path) == 0:
        return response_to(msg, Code.BAD_REQUEST)
    op = classify(msg, path)
    if op is None:
        return response_to(msg, Code.METHOD_NOT_ALLOWED)
    if not (principal.is_server or principal.is_client):
        return _unauthorized(node, msg, path)
    if principal.is_server and path.object_id in RESERVED_OBJECTS:
        return _handle_reserved(node, principal, msg, path, op)

    exists = node.tree.has_object(path.object_id) if op is Operation.CREATE else node.tree.exists(path)
    allowed = check_access(principal, REQUIRED_FLAG[op], path, node.acl, node.server_ids)
    if principal.is_client:
        if not exists:
            may_discover = check_access(principal, AccessFlags.DISCOVER, path, node.acl, node.server_ids)
            return response_to(msg, Code.NOT_FOUND) if may_discover else _unauthorized(node, msg, path)
        if not allowed:
            return _unauthorized(node, msg, path)
    else:
        if not exists:
            return response_to(msg, Code.NOT_FOUND)
        if not allowed:
            return response_to(msg, Code.UNAUTHORIZED)

    try:
        return _perform(node, principal, msg, path, op, peer)
    except (Malformed, TypeMismatch, ValueTooLarge):
        return response_to(msg, Code.BAD_REQUEST)
    except NotFound:
        return response_to(msg, Code.NOT_FOUND)


def _perform(node: "Lwm2mClient", principal: Principal, msg: Message, path: Path, op: Operation,
             peer: str) -> Message:
    tree = node.tree
    if op in (Operation.READ, Operation.OBSERVE, Operation.CANCEL):
        payload, options = encode_content(node, path)
        if op is Operation.OBSERVE:
            try:
                obs = node.observations.add(Observation(principal, peer, path, msg.token))
            except ObservationEvicted:
                # plain read: CoAP's way of declining an observer
                return response_to(msg, Code.CONTENT, payload, options)
            options = [(Option.OBSERVE, uint_bytes(obs.counter))] + options
        elif op is Operation.CANCEL:
            node.observations.remove(peer, msg.token)
        return response_to(msg, Code.CONTENT, payload, options)
    if op is Operation.DISCOVER:
        return response_to(msg, Code.CONTENT, link_format(node, path),
                           [(Option.CONTENT_FORMAT, uint_bytes(LINK_FORMAT))])
    if op is Operation.WRITE or op is Operation.PARTIAL_WRITE:
        if path.is_resource:
            value = decode_value(msg.payload, tree.kind(path.object_id, path.resource_id))
            tree.set(path, value)
        else:
            iid, values = tlv_decode_instance(msg.payload, tree.schemas[path.object_id])
            if iid is not None and iid != path.instance_id:
                raise Malformed("instance id in payload does not match the path")
            for rid, value in values.items():
                tree.set(Path(path.object_id, path.instance_id, rid), value)
        return response_to(msg, Code.CHANGED)
    if op is Operation.EXECUTE:
        return response_to(msg, Code.CHANGED)
    if op is Operation.DELETE:
        tree.delete(path)
        node.acl.drop_target(path)
        node.observations.drop_path(path)
        return response_to(msg, Code.DELETED)
    # create
    iid, values = tlv_decode_instance(msg.payload, tree.schemas[path.object_id])
    if iid is not None and tree.exists(Path(path.object_id, iid)):
        return response_to(msg, Code.BAD_REQUEST)
    inst: ObjectInstance = tree.create(path.object_id, values, iid)
    if principal.is_client:
        authorizing = node.acl.find(ClientAclInstance, path.object_id, None)
        try:
            apply_create_side_effects(principal.id, authorizing, (inst.object_id, inst.instance_id),
                                      node.acl, node.server_ids, node.create_grants)
        except OwnerUnknown:
            tree.delete(inst.path)
            return response_to(msg, Code.INTERNAL_ERROR)
    location = [(Option.LOCATION_PATH, s.encode()) for s in inst.path.segments]
    return response_to(msg, Code.CREATED, options=location)


def _handle_reserved(node: "Lwm2mClient", principal: Principal, msg: Message, path: Path,
                     op: Operation) -> Message:
    oid = path.object_id
    if oid not in objects.SCHEMAS:
        return response_to(msg, Code.NOT_FOUND)
    if not check_access(principal, REQUIRED_FLAG[op], path, node.acl, node.server_ids):
        return response_to(msg, Code.UNAUTHORIZED)
    try:
        if op is Operation.CREATE:
            iid, res = tlv_decode_instance(msg.payload, objects.SCHEMAS[oid])
            if oid == CLIENT:
                result = objects.upsert_client(node, res, iid)
            elif oid == CLIENT_SECURITY:
                result = objects.upsert_client_security(node, res)
            elif oid == OSCORE:
                result = objects.create_oscore(node, res, iid)
            else:
                result = objects.upsert_acl(node, principal, oid, res, iid)
            location = [(Option.LOCATION_PATH, s.encode()) for s in (str(oid), str(result.instance_id))]
            return response_to(msg, Code.CREATED if result.created else Code.CHANGED, options=location)
        if op is Operation.DELETE:
            if oid == CLIENT:
                objects.delete_client_account(node, path.instance_id)
            elif oid == CLIENT_SECURITY:
                objects.delete_client_security(node, path.instance_id)
            elif oid == OSCORE:
                if node.oscore.pop(path.instance_id, None) is None:
                    raise NotFound(str(path))
            else:
                objects.delete_acl(node, principal, oid, path.instance_id)
            return response_to(msg, Code.DELETED)
        if op is Operation.READ and path.is_instance:
            return response_to(msg, Code.CONTENT, tlv_encode(objects.read_reserved(node, oid, path.instance_id)),
                               [(Option.CONTENT_FORMAT, uint_bytes(TLV_FORMAT))])
        return response_to(msg, Code.METHOD_NOT_ALLOWED)
    except (Forbidden, OwnerUnknown):
        return response_to(msg, Code.UNAUTHORIZED)
    except NotFound:
        return response_to(msg, Code.NOT_FOUND)
    except (Malformed, TypeMismatch, ValueTooLarge, ValueError):
        return response_to(msg, Code.BAD_REQUEST)
    except Lwm2mError:
        return response_to(msg, Code.INTERNAL_ERROR)


def parse_registration(msg: Message) -> tuple[str, int, list[str]]:
    query = dict(q.split("=", 1) if "=" in q else (q, "") for q in msg.uri_query)
    if "ep" not in query:
        raise Malformed("registration without ep")
    try:
        lifetime = int(query.get("lt", "86400"))
    except ValueError:
        raise Malformed("bad lifetime") from None
    links = [x for x in msg.payload.decode("utf-8", "replace").split(",") if x]
    return query["ep"], lifetime, links
