"""Walk a requester from zero knowledge to an authorized read of a neighbour's sensor.

Run with ``python3 demos/access_flow.py [handshake|context]``.
"""

import sys

from lwm2m_c2c.acl import AccessFlags
from lwm2m_c2c.authorization import OwnerServerHints
from lwm2m_c2c.coap import Code
from lwm2m_c2c import coap
from lwm2m_c2c.scenario import SENSOR_VALUE, ScenarioConfig, build_world, provisioning_operations
from lwm2m_c2c.threats import register_both, run

mode = sys.argv[1] if len(sys.argv) > 1 else "handshake"
world = build_world(ScenarioConfig(seed=3, mode=mode))
host, requester, server = world.host, world.requester, world.server
host.tree.set(SENSOR_VALUE, b"\x00\x00\x00\x2a\x00")

run(world, register_both(world))
print(f"[{world.sim.now:8.1f} ms] both clients registered with {server.uri}")

# A stranger asks directly and is told where to go.
probe = run(world, requester.peer_request(host.name, coap.request(Code.GET, SENSOR_VALUE)))
hints = OwnerServerHints.decode(probe.payload)
print(f"[{world.sim.now:8.1f} ms] plain read answered {probe.code.dotted}, hints {list(hints.server_uris)}")

# The full flow: hints, access request, provisioning, secure channel, read.
start = world.sim.now
resp = run(world, requester.access(host.name, host.endpoint, SENSOR_VALUE, AccessFlags.READ))
print(f"[{world.sim.now:8.1f} ms] authorized read answered {resp.code.dotted} with {resp.payload.hex()}"
      f" ({world.sim.now - start:.1f} ms simulated)")

print(f"\nprovisioning operations ({mode} mode): {provisioning_operations(world)}")
for t, addr, step, code in server.provision_log:
    print(f"  {t:8.1f} ms  server -> {addr:<10} {step:<16} {code}")

print("\nhost ACL after provisioning:")
for row in host.dump()["client_access_control"]:
    print(f"  /{row['object']}/{row['instance_ref']}  owner {row['owner']}  {row['acl']}")
