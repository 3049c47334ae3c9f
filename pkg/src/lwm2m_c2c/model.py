"""Object tree: paths, typed resource values and per-node instance storage."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, NamedTuple, Optional, Union

from .errors import NotFound, TypeMismatch, ValueTooLarge

# standard objects
SECURITY = 0
SERVER = 1
ACCESS_CONTROL = 2
DEVICE = 3
OSCORE = 21
GENERIC_SENSOR = 3300
LIGHT_CONTROL = 3311

# client-to-client objects
CLIENT_SECURITY = 11000
CLIENT = 11001
CLIENT_ACCESS_CONTROL = 11002

RESERVED_OBJECTS = frozenset(
    {SECURITY, SERVER, ACCESS_CONTROL, OSCORE, CLIENT_SECURITY, CLIENT, CLIENT_ACCESS_CONTROL}
)

MAX_ID = 0xFFFF
OPAQUE_CAP = 1024


class ObjLink(NamedTuple):
    object_id: int
    instance_id: int


ResourceValue = Union[int, str, bytes, bool, ObjLink]


class ResourceKind(enum.Enum):
    INTEGER = "integer"
    STRING = "string"
    OPAQUE = "opaque"
    BOOLEAN = "boolean"
    OBJLNK = "objlnk"


def kind_of(value: ResourceValue) -> ResourceKind:
    # bool before int: bool is an int subclass
    if isinstance(value, bool):
        return ResourceKind.BOOLEAN
    if isinstance(value, ObjLink):
        return ResourceKind.OBJLNK
    if isinstance(value, int):
        return ResourceKind.INTEGER
    if isinstance(value, str):
        return ResourceKind.STRING
    if isinstance(value, (bytes, bytearray)):
        return ResourceKind.OPAQUE
    raise TypeMismatch(f"unsupported resource value {value!r}")


def check_value(value: ResourceValue, kind: Optional[ResourceKind] = None) -> None:
    actual = kind_of(value)
    if kind is not None and actual is not kind:
        raise TypeMismatch(f"expected {kind.value}, got {actual.value}")
    if actual is ResourceKind.INTEGER and not -(2**63) <= value < 2**63:
        raise ValueTooLarge("integer outside signed 64-bit range")
    if actual is ResourceKind.OPAQUE and len(value) > OPAQUE_CAP:
        raise ValueTooLarge(f"opaque value of {len(value)} bytes exceeds {OPAQUE_CAP}")
    if actual is ResourceKind.OBJLNK and not (
        0 <= value.object_id <= MAX_ID and 0 <= value.instance_id <= MAX_ID
    ):
        raise ValueTooLarge("object link ids must be 16-bit")


def _check_id(value: Optional[int], what: str) -> None:
    if value is not None and not 0 <= value <= MAX_ID:
        raise ValueError(f"{what} {value} is not an unsigned 16-bit id")


@dataclass(frozen=True, order=True)
class Path:
    """Address of an object, an instance or a single resource."""

    object_id: int
    instance_id: Optional[int] = None
    resource_id: Optional[int] = None

    def __post_init__(self):
        _check_id(self.object_id, "object id")
        _check_id(self.instance_id, "instance id")
        _check_id(self.resource_id, "resource id")
        if self.resource_id is not None and self.instance_id is None:
            raise ValueError("a resource path needs an instance id")

    @classmethod
    def parse(cls, text: str) -> "Path":
        parts = [p for p in text.strip("/").split("/") if p]
        if not 1 <= len(parts) <= 3 or not all(p.isdigit() for p in parts):
            raise ValueError(f"bad path {text!r}")
        return cls(*(int(p) for p in parts))

    @classmethod
    def from_segments(cls, segments) -> "Path":
        return cls.parse("/".join(segments))

    @property
    def segments(self) -> list[str]:
        ids = (self.object_id, self.instance_id, self.resource_id)
        return [str(i) for i in ids if i is not None]

    @property
    def is_object(self) -> bool:
        return self.instance_id is None

    @property
    def is_instance(self) -> bool:
        return self.instance_id is not None and self.resource_id is None

    @property
    def is_resource(self) -> bool:
        return self.resource_id is not None

    def instance(self) -> "Path":
        return Path(self.object_id, self.instance_id)

    def covers(self, other: "Path") -> bool:
        """True if ``other`` is this path or lies below it."""
        if self.object_id != other.object_id:
            return False
        if self.instance_id is None:
            return True
        if self.instance_id != other.instance_id:
            return False
        return self.resource_id is None or self.resource_id == other.resource_id

    def __str__(self) -> str:
        return "/" + "/".join(self.segments)


@dataclass
class ObjectInstance:
    object_id: int
    instance_id: int
    resources: Dict[int, ResourceValue] = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return Path(self.object_id, self.instance_id)


Schema = Dict[int, Dict[int, ResourceKind]]

DEFAULT_SCHEMAS: Schema = {
    DEVICE: {0: ResourceKind.STRING, 1: ResourceKind.STRING, 13: ResourceKind.INTEGER},
    GENERIC_SENSOR: {5700: ResourceKind.OPAQUE, 5701: ResourceKind.STRING},
    LIGHT_CONTROL: {
        5850: ResourceKind.BOOLEAN,
        5851: ResourceKind.INTEGER,
        5750: ResourceKind.STRING,
    },
}


class ObjectTree:
    """Application objects hosted by one node.

    Resource kinds are fixed per object id when the tree is built. Listeners
    registered with :meth:`subscribe` are called with the path of every
    successful ``set``.
    """

    def __init__(self, schemas: Optional[Schema] = None):
        self.schemas: Schema = {k: dict(v) for k, v in (schemas or DEFAULT_SCHEMAS).items()}
        self._instances: Dict[tuple, ObjectInstance] = {}
        self._listeners: list[Callable[[Path], None]] = []

    def subscribe(self, listener: Callable[[Path], None]) -> None:
        self._listeners.append(listener)

    def kind(self, object_id: int, resource_id: int) -> ResourceKind:
        try:
            return self.schemas[object_id][resource_id]
        except KeyError:
            raise NotFound(f"/{object_id}/*/{resource_id} is not declared") from None

    def has_object(self, object_id: int) -> bool:
        return object_id in self.schemas

    def exists(self, path: Path) -> bool:
        if path.is_object:
            return self.has_object(path.object_id)
        inst = self._instances.get((path.object_id, path.instance_id))
        if inst is None:
            return False
        return path.resource_id is None or path.resource_id in inst.resources

    def instances_of(self, object_id: int) -> list[ObjectInstance]:
        return sorted(
            (i for (o, _), i in self._instances.items() if o == object_id),
            key=lambda i: i.instance_id,
        )

    def __iter__(self) -> Iterator[ObjectInstance]:
        return iter(sorted(self._instances.values(), key=lambda i: (i.object_id, i.instance_id)))

    def free_instance_id(self, object_id: int) -> int:
        used = {i.instance_id for i in self.instances_of(object_id)}
        return next(i for i in range(MAX_ID) if i not in used)

    def create(self, object_id: int, resources: Optional[dict] = None,
               instance_id: Optional[int] = None) -> ObjectInstance:
        if object_id not in self.schemas:
            raise NotFound(f"object {object_id} is not supported")
        if instance_id is None:
            instance_id = self.free_instance_id(object_id)
        if (object_id, instance_id) in self._instances:
            raise TypeMismatch(f"/{object_id}/{instance_id} already exists")
        resources = dict(resources or {})
        for rid, value in resources.items():
            check_value(value, self.kind(object_id, rid))
        inst = ObjectInstance(object_id, instance_id, resources)
        self._instances[(object_id, instance_id)] = inst
        return inst

    def delete(self, path: Path) -> ObjectInstance:
        if not path.is_instance:
            raise NotFound(f"{path} is not an instance path")
        try:
            return self._instances.pop((path.object_id, path.instance_id))
        except KeyError:
            raise NotFound(str(path)) from None

    def get(self, path: Path):
        """Value at a resource path, or a copy of the resource mapping at an instance path."""
        if path.is_object:
            raise NotFound(f"{path} is an object path")
        inst = self._instances.get((path.object_id, path.instance_id))
        if inst is None:
            raise NotFound(str(path))
        if path.resource_id is None:
            return dict(inst.resources)
        try:
            return inst.resources[path.resource_id]
        except KeyError:
            raise NotFound(str(path)) from None

    def set(self, path: Path, value: ResourceValue) -> None:
        if not path.is_resource:
            raise NotFound(f"{path} does not name a resource")
        inst = self._instances.get((path.object_id, path.instance_id))
        if inst is None:
            raise NotFound(str(path))
        check_value(value, self.kind(path.object_id, path.resource_id))
        inst.resources[path.resource_id] = value
        for listener in self._listeners:
            listener(path)

    def snapshot(self) -> dict:
        return {str(i.path): dict(i.resources) for i in self}
