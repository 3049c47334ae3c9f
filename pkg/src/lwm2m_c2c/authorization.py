"""Owner server hints, the access request interface and server-side provisioning plans."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, Iterable, Optional

from . import cbor
from .acl import AccessFlags, AclInstance, ClientAclInstance
from .errors import Malformed, MissingEp, NoTrustedServer, PolicyRefused
from .model import CLIENT, CLIENT_ACCESS_CONTROL, CLIENT_SECURITY, OSCORE, MAX_ID, ObjLink, Path
from .objects import MODE_NOSEC, MODE_PSK, OBJECT_LEVEL, pack_entries
from .security import AccountStore, SecurityMode, ServerAccount

if TYPE_CHECKING:
    from .node import Lwm2mClient

AC_PATH = ("ac",)
KEY_OBJECT, KEY_INSTANCE, KEY_FLAGS = 1, 2, 3


@dataclass(frozen=True)
class OwnerServerHints:
    server_uris: tuple

    def __post_init__(self):
        if not self.server_uris:
            raise ValueError("hints need at least one server URI")
        object.__setattr__(self, "server_uris", tuple(self.server_uris))

    def encode(self) -> bytes:
        return cbor.dumps(list(self.server_uris))

    @classmethod
    def decode(cls, payload: bytes) -> "OwnerServerHints":
        value = cbor.loads(payload)
        if not isinstance(value, list) or not value or not all(isinstance(u, str) for u in value):
            raise Malformed("hints must be a non-empty array of text URIs")
        return cls(tuple(value))


def hints_for(node: "Lwm2mClient", path: Optional[Path]) -> Optional[OwnerServerHints]:
    """Owner of the object-level ACL for ``path`` (if any) plus the default server.

    Only object-level entries are consulted: an instance-level owner would
    reveal that the instance exists. ``None`` for a client that knows no server.
    """
    uris = []
    if path is not None:
        for kind in (ClientAclInstance, AclInstance):
            acl = node.acl.find(kind, path.object_id, None)
            if acl is None:
                continue
            account = node.accounts.servers.get(acl.owner)
            if account is not None:
                uris.append(account.uri)
    uris.extend(node.hint_servers)
    return OwnerServerHints(tuple(dict.fromkeys(uris))) if uris else None


def validate_hints(accounts: AccountStore, hints: OwnerServerHints) -> ServerAccount:
    """First hinted URI that names a server this client is registered with."""
    for uri in hints.server_uris:
        account = accounts.server_by_uri(uri)
        if account is not None and account.registered:
            return account
    raise NoTrustedServer(f"none of {list(hints.server_uris)} is a registered server")


# access request wire format

@dataclass(frozen=True)
class AccessItem:
    object_id: int
    instance_id: Optional[int]
    flags: AccessFlags

    def __post_init__(self):
        object.__setattr__(self, "flags", AccessFlags(self.flags))
        if not self.flags:
            raise ValueError("an access item needs at least one flag")
        if self.instance_id is not None and AccessFlags.CREATE in self.flags:
            raise ValueError("create can only be requested on a whole object")
        if not 0 <= self.object_id <= MAX_ID or not (self.instance_id is None or 0 <= self.instance_id <= MAX_ID):
            raise ValueError("ids must be unsigned 16-bit")

    @property
    def path(self) -> Path:
        return Path(self.object_id, self.instance_id)


@dataclass(frozen=True)
class AccessRequest:
    target_endpoint: str
    need_credentials: bool
    items: tuple

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise ValueError("an access request needs at least one item")
        if not self.target_endpoint:
            raise ValueError("target endpoint name is mandatory")


def encode_access_request(req: AccessRequest) -> tuple[list[str], list[str], bytes]:
    query = [f"ep={req.target_endpoint}"]
    if req.need_credentials:
        query.append("c")
    body = []
    for item in req.items:
        entry = {KEY_OBJECT: item.object_id, KEY_FLAGS: int(item.flags)}
        if item.instance_id is not None:
            entry[KEY_INSTANCE] = item.instance_id
        body.append(entry)
    return list(AC_PATH), query, cbor.dumps(body)


def decode_access_request(uri_path: Iterable[str], uri_query: Iterable[str], payload: bytes) -> AccessRequest:
    if tuple(uri_path) != AC_PATH:
        raise Malformed("access requests are posted to /ac")
    endpoint, need_credentials = None, False
    for q in uri_query:
        key, sep, value = q.partition("=")
        if key == "ep" and sep and endpoint is None:
            endpoint = value
        elif key == "c" and not sep and not need_credentials:
            need_credentials = True
        else:
            raise Malformed(f"unexpected query parameter {q!r}")
    if not endpoint:
        raise MissingEp("access request without ep")
    body = cbor.loads(payload)
    if not isinstance(body, list) or not body:
        raise Malformed("access request payload must be a non-empty array")
    items = []
    for entry in body:
        if not isinstance(entry, dict) or not set(entry) <= {KEY_OBJECT, KEY_INSTANCE, KEY_FLAGS}:
            raise Malformed("bad access request entry")
        obj, inst, flags = entry.get(KEY_OBJECT), entry.get(KEY_INSTANCE), entry.get(KEY_FLAGS)
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in (obj, flags)):
            raise Malformed("object id and flags are mandatory integers")
        if inst is not None and (not isinstance(inst, int) or isinstance(inst, bool)):
            raise Malformed("instance id must be an integer")
        if flags & ~0x3F:
            raise Malformed("unknown flag bits")
        try:
            items.append(AccessItem(obj, inst, AccessFlags(flags)))
        except ValueError as exc:
            raise Malformed(str(exc)) from None
    return AccessRequest(endpoint, need_credentials, tuple(items))


# policy

class PolicyTable:
    """Upper bound on what each requester may obtain on each host object."""

    def __init__(self, entries: Optional[Dict[tuple, AccessFlags]] = None):
        self.entries: Dict[tuple, AccessFlags] = {k: AccessFlags(v) for k, v in (entries or {}).items()}

    def allow(self, requester: str, host: str, object_id: int, flags: AccessFlags) -> None:
        self.entries[(requester, host, object_id)] = AccessFlags(flags)

    def limit(self, requester: str, host: str, object_id: int) -> AccessFlags:
        return self.entries.get((requester, host, object_id), AccessFlags.NONE)

    def check(self, requester: str, req: AccessRequest) -> None:
        for item in req.items:
            limit = self.limit(requester, req.target_endpoint, item.object_id)
            if item.flags & ~limit:
                raise PolicyRefused(
                    f"{requester} may not obtain {item.flags.names()} on /{item.object_id} of {req.target_endpoint}")

    @classmethod
    def from_rows(cls, rows: Iterable[dict]) -> "PolicyTable":
        table = cls()
        for row in rows:
            flags = row["flags"]
            flags = AccessFlags.parse(flags) if isinstance(flags, str) else AccessFlags(flags)
            table.allow(row["requester"], row["host"], int(row["object"]), flags)
        return table


# provisioning plan

@dataclass
class ProvisionStep:
    """One create the server performs; ``resources`` is filled from earlier results."""

    name: str
    target: str  # "host" or "requester"
    object_id: int
    resources: Callable[[dict], dict]
    instance_id: Optional[int] = None


@dataclass
class PeerInfo:
    endpoint: str
    address: str
    uri: str
    client_id: int


@dataclass
class ProvisioningPlan:
    steps: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


def plan_access_request(server_id: int, requester: PeerInfo, host: PeerInfo, req: AccessRequest,
                        policy: PolicyTable, mode: SecurityMode, new_key: Callable[[], bytes],
                        lifetime_s: int = 0) -> ProvisioningPlan:
    """Decide an access request and lay out the creates that realise it.

    Raises :class:`PolicyRefused` before any key is drawn, so a refused
    request leaves no trace on either peer.
    """
    policy.check(requester.endpoint, req)
    plan = ProvisioningPlan()
    plan.steps.append(ProvisionStep("client", "host", CLIENT, lambda ctx: {
        0: requester.client_id, 1: requester.endpoint, 2: lifetime_s, 7: "U",
    }, requester.client_id))
    if req.need_credentials:
        key = new_key()
        identity = f"{requester.endpoint}@{host.endpoint}".encode()
        if mode is SecurityMode.CONTEXT:
            plan.steps.append(ProvisionStep("oscore", "host", OSCORE, lambda ctx: {
                0: key, 1: host.endpoint.encode(), 2: requester.endpoint.encode(),
            }))
            plan.steps.append(ProvisionStep("client-security", "host", CLIENT_SECURITY, lambda ctx: {
                0: requester.uri, 2: MODE_NOSEC, 3: identity, 10: requester.client_id,
                17: ObjLink(OSCORE, ctx["oscore"]),
            }))
        else:
            plan.steps.append(ProvisionStep("client-security", "host", CLIENT_SECURITY, lambda ctx: {
                0: requester.uri, 2: MODE_PSK, 3: identity, 5: key, 10: requester.client_id,
            }))
    for n, item in enumerate(req.items):
        plan.steps.append(ProvisionStep(f"client-acl-{n}", "host", CLIENT_ACCESS_CONTROL, lambda ctx, item=item: {
            0: item.object_id,
            1: OBJECT_LEVEL if item.instance_id is None else item.instance_id,
            2: pack_entries({requester.client_id: item.flags}),
            3: server_id,
        }))
    if req.need_credentials:
        security_mode = MODE_NOSEC if mode is SecurityMode.CONTEXT else MODE_PSK
        plan.steps.append(ProvisionStep("peer-security", "requester", CLIENT_SECURITY, lambda ctx: {
            0: host.uri, 2: security_mode, 3: identity, 5: key, 10: host.client_id,
        }))
    return plan
