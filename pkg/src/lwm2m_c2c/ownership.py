"""Replay of the create-ownership example.

Hosting client ``c1`` knows two servers (``s1`` = 1, ``s2`` = 2) and one
requesting client ``c3`` (client id 3). Before the create:

* access control 0 on /3311: create for both servers, owned by bootstrap;
* client access control 0 on /3311: create for c3, owned by s1.

``c3`` then creates /3311/1 over its secure channel. The hosting client adds
an ACL pair for the new instance, owned by s1 (not by c3), giving s2 read and
c3 read and write.
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

from . import coap
from .acl import BOOTSTRAP_OWNER, AccessFlags, AclInstance, ClientAclInstance
from .coap import Code, Option, TLV_FORMAT, uint_bytes
from .errors import UnknownNode
from .kernel import Simulator
from .model import LIGHT_CONTROL, ObjectInstance, Path
from .netsim import LinkSpec, Network
from .node import Lwm2mClient, Lwm2mServer
from .security import ClientAccount, Psk, SecurityMode
from .tlv import tlv_encode

C3_CLIENT_ID = 3


@dataclass
class OwnershipReplay:
    sim: Simulator
    nodes: dict
    response: coap.Message

    def node(self, name: str):
        try:
            return self.nodes[name]
        except KeyError:
            raise UnknownNode(f"no node called {name!r}; known: {sorted(self.nodes)}") from None


def replay_create_ownership(seed: int = 0) -> OwnershipReplay:
    rng = np.random.default_rng(seed)
    g = nx.Graph()
    hop = LinkSpec.lowpan()
    g.add_edge("c1", "c3", link=hop)
    g.add_edge("c1", "gateway", link=hop)
    for s in ("s1", "s2"):
        g.add_edge("gateway", s, link=LinkSpec.uplink())
    sim = Simulator()
    net = Network(sim, g, seed=seed)
    c1 = Lwm2mClient("c1", net, np.random.default_rng(rng.integers(1 << 32)))
    c3 = Lwm2mClient("c3", net, np.random.default_rng(rng.integers(1 << 32)))
    s1 = Lwm2mServer("s1", net, np.random.default_rng(rng.integers(1 << 32)), short_server_id=1)
    s2 = Lwm2mServer("s2", net, np.random.default_rng(rng.integers(1 << 32)), short_server_id=2)
    for sid, server in ((1, s1), (2, s2)):
        psk = Psk(f"c1@{server.name}".encode(), rng.bytes(16))
        c1.add_server(sid, server.uri, psk, default=(sid == 1))
        server.add_client_credentials(psk)

    pair = Psk(b"c3@c1", rng.bytes(16))
    c1.accounts.add_client(ClientAccount(C3_CLIENT_ID, "c3", c3.uri, credentials=pair,
                                         security_mode=SecurityMode.HANDSHAKE))
    c3.accounts.add_client(ClientAccount(0, "c1", c1.uri, credentials=pair,
                                         security_mode=SecurityMode.HANDSHAKE))
    c1.tree.create(LIGHT_CONTROL, {5850: False, 5851: 0, 5750: "hall"}, 0)
    c1.acl.add(AclInstance(0, LIGHT_CONTROL, None,
                           {1: AccessFlags.CREATE, 2: AccessFlags.CREATE}, BOOTSTRAP_OWNER))
    c1.acl.add(ClientAclInstance(0, LIGHT_CONTROL, None, {C3_CLIENT_ID: AccessFlags.CREATE}, 1))

    body = tlv_encode(ObjectInstance(LIGHT_CONTROL, 1, {5850: True, 5851: 40, 5750: "desk"}), wrap=True)
    msg = coap.request(Code.POST, Path(LIGHT_CONTROL), payload=body)
    msg.options.append((Option.CONTENT_FORMAT, uint_bytes(TLV_FORMAT)))
    response = sim.run_until_complete(c3.request("c1", msg), limit=60_000.0)
    return OwnershipReplay(sim, {"c1": c1, "c3": c3, "s1": s1, "s2": s2}, response)
