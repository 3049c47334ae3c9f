"""Scripted checks against the client-to-client threat model.

T0  hint indistinguishability: a denied request for an existing resource and
    a request for a missing one get the same answer.
T1  cookie statelessness: a flood of cookie-less hellos leaves no per-peer
    state on the listener.
T2  lifetime expiry: once a provisioned account outlives its lifetime the
    requester is treated as a stranger again.
T3  rogue hints: hinted servers the requester is not registered with are
    never contacted.

``cookie_enabled`` and ``enforce_lifetime`` exist only as negative controls:
switching either off must make the matching check fail.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

from . import coap
from .acl import AccessFlags
from .coap import Code
from .authorization import OwnerServerHints
from .errors import Malformed, NoTrustedServer
from .model import GENERIC_SENSOR, LIGHT_CONTROL, Path
from .node import Lwm2mClient, Lwm2mServer
from .scenario import SENSOR_VALUE, ScenarioConfig, World, build_world
from .security import ClientHello

FLOOD_SIZE = 1000
LIFETIME_S = 30


@dataclass
class ThreatResult:
    threat: str
    title: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{self.threat} {'PASS' if self.passed else 'FAIL'}  {self.title}: {self.detail}"


def run(world: World, gen, limit_ms: float = 600_000.0):
    return world.sim.run_until_complete(world.sim.process(gen), limit=world.sim.now + limit_ms)


def register_both(world: World):
    yield world.sim.process(world.host.register(world.server.uri))
    yield world.sim.process(world.requester.register(world.server.uri))


def _masked(msg: coap.Message) -> bytes:
    return coap.encode(replace(msg, message_id=0, token=b""))


def check_hint_indistinguishability(seed: int = 0) -> ThreatResult:
    world = build_world(ScenarioConfig(seed=seed))
    host, requester = world.host, world.requester
    host.tree.create(LIGHT_CONTROL, {5850: True}, 0)
    run(world, register_both(world))

    def probe(path: Path, secure: bool):
        resp = yield requester.request(host.name, coap.request(Code.GET, path), secure=secure)
        return resp

    # stranger: no account on the host at all
    anon = [run(world, probe(p, False)) for p in (SENSOR_VALUE.instance(), Path(GENERIC_SENSOR, 9))]
    # known client holding read on /3300/0 only, without discover
    run(world, requester.access(host.name, host.endpoint, SENSOR_VALUE.instance(), AccessFlags.READ))
    known = [run(world, probe(p, True)) for p in (Path(LIGHT_CONTROL, 0), Path(LIGHT_CONTROL, 7))]
    same = all(_masked(a) == _masked(b) for a, b in (anon, known))
    codes = [m.code.dotted for m in anon + known]
    all_401 = all(m.code is Code.UNAUTHORIZED for m in anon + known)
    return ThreatResult("T0", "hint indistinguishability", same and all_401,
                        f"responses {codes}, byte-identical pairs={same}")


def check_cookie_flood(seed: int = 0, cookie_enabled: bool = True, hellos: int = FLOOD_SIZE) -> ThreatResult:
    world = build_world(ScenarioConfig(seed=seed))
    listener = world.host.listener
    listener.cookie_enabled = cookie_enabled
    before = listener.state_count
    for i in range(hellos):
        hello = ClientHello(f"spoof-{i}".encode(), world.host.rng.bytes(16), b"", bytes(12))
        listener.on_hello(f"10.0.{i // 256}.{i % 256}", hello.encode(), world.sim.now)
    grown = listener.state_count - before
    return ThreatResult("T1", "cookie statelessness", grown == 0,
                        f"{hellos} cookie-less hellos allocated {grown} per-peer states")


def _read_after(lifetime_s: int, wait_s: float, seed: int, enforce_lifetime: bool) -> coap.Message:
    world = build_world(ScenarioConfig(seed=seed, lifetime_s=lifetime_s))
    world.host.enforce_lifetime = enforce_lifetime
    run(world, register_both(world))
    run(world, world.requester.access(world.host.name, world.host.endpoint, SENSOR_VALUE.instance(),
                                      AccessFlags.READ))
    account = world.host.accounts.client_by_endpoint(world.requester.endpoint)
    world.sim.run(until=account.created_at + wait_s * 1000.0)
    op = coap.request(Code.GET, SENSOR_VALUE.instance())
    return run(world, world.requester.peer_request(world.host.name, op))


def check_lifetime_expiry(seed: int = 0, enforce_lifetime: bool = True) -> ThreatResult:
    expired = _read_after(LIFETIME_S, LIFETIME_S + 1, seed, enforce_lifetime)
    unlimited = _read_after(0, 1e6, seed, enforce_lifetime)
    try:
        hinted = bool(OwnerServerHints.decode(expired.payload).server_uris)
    except Malformed:
        hinted = False
    ok = expired.code is Code.UNAUTHORIZED and hinted and unlimited.code is Code.CONTENT
    return ThreatResult("T2", "lifetime expiry", ok,
                        f"read {LIFETIME_S + 1}s after a {LIFETIME_S}s grant -> {expired.code.dotted} "
                        f"(hints={hinted}); "
                        f"read after 1e6 s with lifetime 0 -> {unlimited.code.dotted}")


def check_rogue_hints(seed: int = 0) -> ThreatResult:
    world = build_world(ScenarioConfig(seed=seed),
                        extra_edges=[("requester", "rogue-host"), ("rogue-host", "rogue-as")])
    rogue_host = Lwm2mClient("rogue-host", world.network, world.host.rng)
    rogue_host.tree.create(GENERIC_SENSOR, {5700: b"bait"}, 0)
    rogue_host.hint_servers = ["coaps://rogue-as", "coaps://rogue-as-2"]
    rogue_as = Lwm2mServer("rogue-as", world.network, world.server.rng)
    contacted = []
    world.network.taps.append(lambda rec: contacted.append(rec) if rec.dst.startswith("rogue-as") else None)
    run(world, register_both(world))
    try:
        run(world, world.requester.access("rogue-host", "rogue-host", SENSOR_VALUE.instance(), AccessFlags.READ))
        refused = False
    except NoTrustedServer:
        refused = True
    world.sim.run(until=world.sim.now + 60_000.0)
    received = world.network.counters["rogue-as"].received_msgs + rogue_as.stats.datagrams_received
    ok = refused and not contacted and received == 0
    return ThreatResult("T3", "rogue hint rejection", ok,
                        f"NoTrustedServer raised={refused}, messages to hinted rogue servers={len(contacted)}")


CHECKS: dict[str, Callable[..., ThreatResult]] = {
    "T0": check_hint_indistinguishability,
    "T1": check_cookie_flood,
    "T2": check_lifetime_expiry,
    "T3": check_rogue_hints,
}


def run_threat_checks(seed: int = 0, cookie_enabled: bool = True, enforce_lifetime: bool = True) -> list[ThreatResult]:
    return [
        check_hint_indistinguishability(seed),
        check_cookie_flood(seed, cookie_enabled=cookie_enabled),
        check_lifetime_expiry(seed, enforce_lifetime=enforce_lifetime),
        check_rogue_hints(seed),
    ]
