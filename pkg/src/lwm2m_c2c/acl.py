"""Server and client access control lists and the access decision."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Union

from .errors import Forbidden, OwnerUnknown
from .model import (
    ACCESS_CONTROL,
    CLIENT_ACCESS_CONTROL,
    RESERVED_OBJECTS,
    Path,
)

BOOTSTRAP_OWNER = 0xFFFF


class AccessFlags(enum.IntFlag):
    NONE = 0
    READ = 1
    WRITE = 2
    EXECUTE = 4
    DELETE = 8
    CREATE = 16
    DISCOVER = 32

    @classmethod
    def parse(cls, text: str) -> "AccessFlags":
        """``"read|write"`` style names; empty string means no rights."""
        flags = cls.NONE
        for name in filter(None, (p.strip() for p in text.replace(",", "|").split("|"))):
            flags |= cls[name.upper()]
        return flags

    def names(self) -> list[str]:
        return [f.name.lower() for f in AccessFlags if f and f in self]


ALL_SERVER_RIGHTS = AccessFlags.READ | AccessFlags.WRITE | AccessFlags.EXECUTE | AccessFlags.DELETE


@dataclass(frozen=True)
class Principal:
    kind: str  # "server" | "client" | "anonymous"
    id: Optional[int] = None

    @classmethod
    def server(cls, short_id: int) -> "Principal":
        return cls("server", short_id)

    @classmethod
    def client(cls, client_id: int) -> "Principal":
        return cls("client", client_id)

    @property
    def is_server(self) -> bool:
        return self.kind == "server"

    @property
    def is_client(self) -> bool:
        return self.kind == "client"

    def __str__(self) -> str:
        return self.kind if self.id is None else f"{self.kind}:{self.id}"


ANONYMOUS = Principal("anonymous")


@dataclass
class _AclBase:
    instance_id: int
    object_ref: int
    instance_ref: Optional[int]
    acl: Dict[int, AccessFlags] = field(default_factory=dict)
    owner: int = BOOTSTRAP_OWNER

    def __post_init__(self):
        self.acl = {k: AccessFlags(v) for k, v in self.acl.items()}
        if self.instance_ref is not None and any(AccessFlags.CREATE in f for f in self.acl.values()):
            raise ValueError("create rights only apply to object-level entries")

    @property
    def target(self) -> Path:
        return Path(self.object_ref, self.instance_ref)


@dataclass
class AclInstance(_AclBase):
    """Rights of servers on one object or object instance (object 2)."""

    def __post_init__(self):
        super().__post_init__()
        if any(AccessFlags.DISCOVER in f for f in self.acl.values()):
            raise ValueError("discover is a client-only flag")


@dataclass
class ClientAclInstance(_AclBase):
    """Rights of requesting clients on one object or object instance (object 11002)."""


AnyAcl = Union[AclInstance, ClientAclInstance]


class AclTable:
    """Both ACL objects of one hosting node."""

    def __init__(self):
        self.server: Dict[int, AclInstance] = {}
        self.client: Dict[int, ClientAclInstance] = {}

    def _store(self, acl: AnyAcl) -> dict:
        return self.server if isinstance(acl, AclInstance) else self.client

    def add(self, acl: AnyAcl) -> AnyAcl:
        store = self._store(acl)
        if acl.instance_id in store:
            raise ValueError(f"ACL instance {acl.instance_id} already exists")
        if self.find(type(acl), acl.object_ref, acl.instance_ref) is not None:
            raise ValueError(f"{acl.target} already has an ACL instance")
        store[acl.instance_id] = acl
        return acl

    def remove(self, acl: AnyAcl) -> None:
        self._store(acl).pop(acl.instance_id, None)

    def free_id(self, kind) -> int:
        store = self.server if kind is AclInstance else self.client
        return next(i for i in range(0xFFFF) if i not in store)

    def find(self, kind, object_id: int, instance_id: Optional[int]) -> Optional[AnyAcl]:
        store = self.server if kind is AclInstance else self.client
        for acl in store.values():
            if acl.object_ref == object_id and acl.instance_ref == instance_id:
                return acl
        return None

    def governing(self, kind, path: Path) -> Optional[AnyAcl]:
        """Instance-level entry when present, otherwise the object-level one."""
        if path.instance_id is not None:
            acl = self.find(kind, path.object_id, path.instance_id)
            if acl is not None:
                return acl
        return self.find(kind, path.object_id, None)

    def drop_target(self, path: Path) -> None:
        """Remove both ACL instances attached to a deleted object instance."""
        for kind in (AclInstance, ClientAclInstance):
            acl = self.find(kind, path.object_id, path.instance_id)
            if acl is not None:
                self.remove(acl)

    def __iter__(self):
        yield from sorted(self.server.values(), key=lambda a: a.instance_id)
        yield from sorted(self.client.values(), key=lambda a: a.instance_id)

    def dump(self) -> dict:
        def row(a):
            return {
                "instance": a.instance_id,
                "object": a.object_ref,
                "instance_ref": a.instance_ref,
                "owner": a.owner,
                "acl": {str(k): v.names() for k, v in sorted(a.acl.items())},
            }
        return {
            "access_control": [row(a) for a in sorted(self.server.values(), key=lambda a: a.instance_id)],
            "client_access_control": [row(a) for a in sorted(self.client.values(), key=lambda a: a.instance_id)],
        }

    def digest(self) -> str:
        return hashlib.sha256(repr(self.dump()).encode()).hexdigest()


def check_access(principal: Principal, op: AccessFlags, path: Path, tables: AclTable,
                 server_ids: Iterable[int] = ()) -> bool:
    """Decide whether ``principal`` may perform the single operation ``op`` on ``path``."""
    server_ids = set(server_ids)
    if principal.is_client:
        if path.object_id in RESERVED_OBJECTS:
            return False
        if op is AccessFlags.CREATE:
            if not path.is_object:
                return False
            acl = tables.find(ClientAclInstance, path.object_id, None)
        else:
            acl = tables.governing(ClientAclInstance, path)
        return acl is not None and op in acl.acl.get(principal.id, AccessFlags.NONE)

    if not principal.is_server:
        return False
    if principal.id not in server_ids:
        return False
    if path.object_id in RESERVED_OBJECTS:
        return _server_on_reserved(principal, op, path, tables)
    if op is AccessFlags.DISCOVER:
        # servers may always discover
        return True
    if len(server_ids) == 1 and not tables.server:
        return True
    if op is AccessFlags.CREATE:
        if not path.is_object:
            return False
        acl = tables.find(AclInstance, path.object_id, None)
        return acl is not None and op in acl.acl.get(principal.id, AccessFlags.NONE)
    acl = tables.governing(AclInstance, path)
    if acl is None:
        return False
    if principal.id == acl.owner and principal.id not in acl.acl:
        return op in ALL_SERVER_RIGHTS
    return op in acl.acl.get(principal.id, AccessFlags.NONE)


def _server_on_reserved(principal: Principal, op: AccessFlags, path: Path, tables: AclTable) -> bool:
    if path.object_id not in (ACCESS_CONTROL, CLIENT_ACCESS_CONTROL):
        return True
    if op in (AccessFlags.CREATE, AccessFlags.READ, AccessFlags.DISCOVER) or path.instance_id is None:
        return True
    store = tables.server if path.object_id == ACCESS_CONTROL else tables.client
    acl = store.get(path.instance_id)
    return acl is None or acl.owner == principal.id


def apply_create_side_effects(creator: int, authorizing_acl: ClientAclInstance,
                              new_instance: tuple[int, int], tables: AclTable,
                              server_ids: Iterable[int],
                              grants: AccessFlags = AccessFlags.READ | AccessFlags.WRITE,
                              ) -> tuple[AclInstance, ClientAclInstance]:
    """Create the ACL pair for an instance a requesting client just created.

    Both new instances are owned by the server that owns the authorizing
    client ACL, never by the creator. Servers listed in the object-level
    server ACL (other than the owner) receive read access on the new instance.
    """
    owner = authorizing_acl.owner
    if owner not in set(server_ids):
        raise OwnerUnknown(f"owner {owner} is not a registered server account")
    object_id, instance_id = new_instance
    object_level = tables.find(AclInstance, object_id, None)
    server_acl = {
        sid: AccessFlags.READ
        for sid in sorted(object_level.acl if object_level else ())
        if sid != owner
    }
    grants = AccessFlags(grants) & ~AccessFlags.CREATE
    acl = tables.add(AclInstance(tables.free_id(AclInstance), object_id, instance_id, server_acl, owner))
    cacl = tables.add(ClientAclInstance(tables.free_id(ClientAclInstance), object_id, instance_id,
                                        {creator: grants}, owner))
    return acl, cacl


def mutate_acl(principal: Principal, target: AnyAcl, *, grant: Optional[dict] = None,
               revoke: Iterable[int] = (), owner: Optional[int] = None,
               known_servers: Optional[Iterable[int]] = None) -> None:
    """Apply an owner-issued change to an ACL instance."""
    if not principal.is_server:
        raise Forbidden(f"{principal} may not modify access rights")
    if principal.id != target.owner:
        raise Forbidden(f"{principal} is not the owner of ACL instance {target.instance_id}")
    if owner is not None and known_servers is not None and owner not in set(known_servers) | {BOOTSTRAP_OWNER}:
        raise OwnerUnknown(f"owner {owner} is not a known server")
    new_acl = dict(target.acl)
    for key in revoke:
        new_acl.pop(key, None)
    for key, flags in (grant or {}).items():
        new_acl[key] = AccessFlags(flags)
    # validate before touching the target
    type(target)(target.instance_id, target.object_ref, target.instance_ref, new_acl, target.owner)
    target.acl = new_acl
    if owner is not None:
        target.owner = owner
