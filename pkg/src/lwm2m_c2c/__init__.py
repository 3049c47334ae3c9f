"""Client-to-client communication and third-party authorization for LwM2M, on a simulated network."""

from .acl import ANONYMOUS, AccessFlags, AclInstance, AclTable, ClientAclInstance, Principal, check_access
from .authorization import AccessItem, AccessRequest, OwnerServerHints, PolicyTable
from .errors import ConfigInvalid, Lwm2mError, Malformed
from .kernel import Simulator
from .model import ObjectInstance, ObjectTree, Path
from .netsim import LinkSpec, Metrics, Network, fragments_for, message_count_energy_proxy
from .node import Lwm2mClient, Lwm2mServer
from .scenario import ScenarioConfig, build_world, run_scenario
from .security import Psk, SecurityMode

__all__ = [
    "ANONYMOUS", "AccessFlags", "AclInstance", "AclTable", "ClientAclInstance", "Principal", "check_access",
    "AccessItem", "AccessRequest", "OwnerServerHints", "PolicyTable",
    "ConfigInvalid", "Lwm2mError", "Malformed",
    "Simulator", "ObjectInstance", "ObjectTree", "Path",
    "LinkSpec", "Metrics", "Network", "fragments_for", "message_count_energy_proxy",
    "Lwm2mClient", "Lwm2mServer", "ScenarioConfig", "build_world", "run_scenario",
    "Psk", "SecurityMode",
]
