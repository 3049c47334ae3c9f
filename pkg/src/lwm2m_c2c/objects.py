"""Resource layouts of the reserved objects and their mapping onto node state.

Servers provision peers by creating instances of these objects with ordinary
CoAP POSTs. Creates are upserts keyed by a natural key (endpoint name for the
client object, peer URI for the client security object, target path for the
ACL objects) so that a repeated access request refreshes rather than
duplicates. Upserts report whether they created anything, which is what the
provisioning rollback needs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Optional

from .acl import AccessFlags, AclInstance, ClientAclInstance, Principal, mutate_acl
from .errors import Forbidden, Malformed, NotFound, OwnerUnknown
from .model import (
    ACCESS_CONTROL,
    CLIENT,
    CLIENT_ACCESS_CONTROL,
    CLIENT_SECURITY,
    MAX_ID,
    OSCORE,
    ObjLink,
    ResourceKind as K,
)
from .security import ClientAccount, Psk, SecureChannel, SecurityMode

if TYPE_CHECKING:
    from .node import Lwm2mClient

MODE_PSK = 0
MODE_NOSEC = 3  # transport unprotected, payload protected through an OSCORE link

CLIENT_SCHEMA = {0: K.INTEGER, 1: K.STRING, 2: K.INTEGER, 3: K.INTEGER, 4: K.INTEGER, 7: K.STRING}
CLIENT_SECURITY_SCHEMA = {
    0: K.STRING,    # peer URI
    2: K.INTEGER,   # security mode
    3: K.OPAQUE,    # PSK identity
    5: K.OPAQUE,    # PSK key
    10: K.INTEGER,  # client id of the peer
    17: K.OBJLNK,   # OSCORE object instance
}
OSCORE_SCHEMA = {0: K.OPAQUE, 1: K.OPAQUE, 2: K.OPAQUE}
ACL_SCHEMA = {0: K.INTEGER, 1: K.INTEGER, 2: K.OPAQUE, 3: K.INTEGER}

SCHEMAS = {
    CLIENT: CLIENT_SCHEMA,
    CLIENT_SECURITY: CLIENT_SECURITY_SCHEMA,
    OSCORE: OSCORE_SCHEMA,
    ACCESS_CONTROL: ACL_SCHEMA,
    CLIENT_ACCESS_CONTROL: ACL_SCHEMA,
}

OBJECT_LEVEL = MAX_ID  # instance_ref value meaning "whole object"


def uri_address(uri: str) -> str:
    """``coaps://node`` → ``node``; bare names pass through."""
    return uri.split("://", 1)[-1].rstrip("/")


def pack_entries(acl: Dict[int, AccessFlags]) -> bytes:
    return b"".join(struct.pack(">HH", k, int(v)) for k, v in sorted(acl.items()))


def unpack_entries(raw: bytes) -> Dict[int, AccessFlags]:
    if len(raw) % 4:
        raise Malformed("ACL entry list must be a multiple of 4 bytes")
    entries = {}
    for off in range(0, len(raw), 4):
        key, flags = struct.unpack(">HH", raw[off:off + 4])
        if key in entries or flags & ~0x3F:
            raise Malformed("duplicate ACL key or unknown flag bits")
        entries[key] = AccessFlags(flags)
    return entries


def acl_resources(acl) -> dict:
    return {
        0: acl.object_ref,
        1: OBJECT_LEVEL if acl.instance_ref is None else acl.instance_ref,
        2: pack_entries(acl.acl),
        3: acl.owner,
    }


@dataclass
class OscoreMaterial:
    master_secret: bytes
    sender_id: bytes = b""
    recipient_id: bytes = b""


class Upsert(tuple):
    """``(instance_id, created)``"""

    def __new__(cls, instance_id: int, created: bool):
        return super().__new__(cls, (instance_id, created))

    @property
    def instance_id(self) -> int:
        return self[0]

    @property
    def created(self) -> bool:
        return self[1]


def _require(res: dict, *rids: int) -> None:
    missing = [r for r in rids if r not in res]
    if missing:
        raise Malformed(f"missing mandatory resources {missing}")


def upsert_client(node: "Lwm2mClient", res: dict, instance_id: Optional[int]) -> Upsert:
    _require(res, 1)
    endpoint = res[1]
    account = node.accounts.client_by_endpoint(endpoint)
    created = account is None
    if created:
        client_id = res.get(0, instance_id)
        # the security instance may have arrived first and be waiting for its client object
        account = node.accounts.clients.get(client_id) if client_id is not None else None
        if account is not None and account.endpoint_name:
            account = None
        if account is None:
            if client_id is None or client_id in node.accounts.clients:
                client_id = node.accounts.free_client_id()
            account = node.accounts.add_client(ClientAccount(client_id, created_at=node.sim.now))
    account.endpoint_name = endpoint
    account.lifetime_s = res.get(2, account.lifetime_s)
    account.default_pmin = res.get(3, account.default_pmin)
    account.default_pmax = res.get(4, account.default_pmax)
    account.binding = res.get(7, account.binding)
    account.refresh(node.sim.now)
    return Upsert(account.client_id, created)


def upsert_client_security(node: "Lwm2mClient", res: dict) -> Upsert:
    _require(res, 0, 2)
    uri, mode = res[0], res[2]
    account = node.accounts.client_by_uri(uri)
    created = account is None
    if created:
        client_id = res.get(10)
        account = node.accounts.clients.get(client_id) if client_id is not None else None
        if account is not None and account.uri not in ("", uri):
            account = None
        if account is None:
            if client_id is None or client_id in node.accounts.clients:
                client_id = node.accounts.free_client_id()
            account = node.accounts.add_client(ClientAccount(client_id, created_at=node.sim.now))
    if mode == MODE_PSK:
        _require(res, 3, 5)
        psk = Psk(res[3], res[5])
        security_mode = SecurityMode.HANDSHAKE
    elif mode == MODE_NOSEC and 17 in res:
        link: ObjLink = res[17]
        material = node.oscore.get(link.instance_id)
        if link.object_id != OSCORE or material is None:
            raise NotFound(f"OSCORE instance {link} does not exist")
        psk = Psk(res.get(3, material.sender_id or b"ctx"), material.master_secret)
        security_mode = SecurityMode.CONTEXT
    elif mode == MODE_NOSEC:
        # context credentials delivered inline
        _require(res, 3, 5)
        psk = Psk(res[3], res[5])
        security_mode = SecurityMode.CONTEXT
    else:
        raise Malformed(f"unsupported security mode {mode}")
    if account.credentials != psk or account.security_mode is not security_mode:
        # new credentials invalidate any session built on the old ones
        node.close_peer(uri_address(uri))
    account.uri = uri
    account.credentials = psk
    account.security_mode = security_mode
    return Upsert(account.client_id, created)


def delete_client_account(node: "Lwm2mClient", client_id: int) -> None:
    account = node.accounts.clients.pop(client_id, None)
    if account is None:
        raise NotFound(f"no client account {client_id}")
    if account.uri:
        node.close_peer(uri_address(account.uri))


def delete_client_security(node: "Lwm2mClient", client_id: int) -> None:
    account = node.accounts.clients.get(client_id)
    if account is None or not account.uri:
        raise NotFound(f"no client security instance {client_id}")
    node.close_peer(uri_address(account.uri))
    if account.endpoint_name:
        account.uri, account.credentials = "", None
    else:
        del node.accounts.clients[client_id]


def create_oscore(node: "Lwm2mClient", res: dict, instance_id: Optional[int]) -> Upsert:
    _require(res, 0)
    if len(res[0]) != 16:
        raise Malformed("OSCORE master secret must be 16 bytes")
    if instance_id is None or instance_id in node.oscore:
        instance_id = next(i for i in range(MAX_ID) if i not in node.oscore)
    node.oscore[instance_id] = OscoreMaterial(res[0], res.get(1, b""), res.get(2, b""))
    return Upsert(instance_id, True)


def upsert_acl(node: "Lwm2mClient", principal: Principal, object_id: int, res: dict,
               instance_id: Optional[int]) -> Upsert:
    _require(res, 0, 2, 3)
    kind = ClientAclInstance if object_id == CLIENT_ACCESS_CONTROL else AclInstance
    object_ref = res[0]
    instance_ref = None if res.get(1, OBJECT_LEVEL) == OBJECT_LEVEL else res[1]
    entries = unpack_entries(res[2])
    owner = res[3]
    existing = node.acl.find(kind, object_ref, instance_ref)
    if existing is not None:
        mutate_acl(principal, existing, grant=entries, owner=owner, known_servers=node.server_ids)
        return Upsert(existing.instance_id, False)
    if owner not in node.server_ids:
        raise OwnerUnknown(f"owner {owner} is not a known server")
    if owner != principal.id:
        raise Forbidden("a server may only create ACL instances it owns")
    if instance_id is None or instance_id in (node.acl.client if kind is ClientAclInstance else node.acl.server):
        instance_id = node.acl.free_id(kind)
    try:
        acl = kind(instance_id, object_ref, instance_ref, entries, owner)
    except ValueError as exc:
        raise Malformed(str(exc)) from None
    node.acl.add(acl)
    return Upsert(instance_id, True)


def delete_acl(node: "Lwm2mClient", principal: Principal, object_id: int, instance_id: int) -> None:
    store = node.acl.client if object_id == CLIENT_ACCESS_CONTROL else node.acl.server
    acl = store.get(instance_id)
    if acl is None:
        raise NotFound(f"/{object_id}/{instance_id}")
    if principal.id != acl.owner:
        raise Forbidden(f"{principal} does not own /{object_id}/{instance_id}")
    node.acl.remove(acl)


def read_reserved(node: "Lwm2mClient", object_id: int, instance_id: int) -> dict:
    """Readable view of a reserved instance. Key material is never returned."""
    if object_id == CLIENT:
        account = node.accounts.clients.get(instance_id)
        if account is None or not account.endpoint_name:
            raise NotFound(f"/{object_id}/{instance_id}")
        return {0: account.client_id, 1: account.endpoint_name, 2: account.lifetime_s,
                3: account.default_pmin, 4: account.default_pmax, 7: account.binding}
    if object_id in (ACCESS_CONTROL, CLIENT_ACCESS_CONTROL):
        store = node.acl.client if object_id == CLIENT_ACCESS_CONTROL else node.acl.server
        if instance_id not in store:
            raise NotFound(f"/{object_id}/{instance_id}")
        return acl_resources(store[instance_id])
    raise Forbidden(f"object {object_id} is not readable")


def context_channel(local: str, account: ClientAccount) -> SecureChannel:
    if account.credentials is None:
        raise NotFound("account has no credentials")
    return SecureChannel.from_context(local, uri_address(account.uri), account.credentials)
