"""Scenario configs and the end-to-end runner.

A scenario wires one server, one hosting client and one requesting client
into a simulated topology, performs the setup its kind needs, then lets the
host publish ``count`` sensor updates at a fixed interval. Each update is a
5-byte value (4-byte sequence number plus filler) written to
``/3300/0/5700``; it counts as delivered when the same value lands in the
requester's own ``/3300/0/5700``.

* ``server-centric``: the server observes the host and writes every new value
  to the requester.
* ``c2c``: the requester obtains access through the server once, then
  observes the host directly over a ``handshake`` or ``context`` channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Iterable

import numpy as np
import yaml

from .acl import AccessFlags
from .authorization import PolicyTable
from .errors import ConfigInvalid, Lwm2mError
from .kernel import Simulator
from .model import GENERIC_SENSOR, Path
from .netsim import (
    LinkSpec,
    Metrics,
    Network,
    NodeCounters,
    forwarder_topology,
    random_topology,
)
from .node import Lwm2mClient, Lwm2mServer
from .security import Psk, SecurityMode

SCENARIO_KINDS = ("server-centric", "c2c")
ENDPOINT_STYLES = ("urn", "plain")
SENSOR_VALUE = Path(GENERIC_SENSOR, 0, 5700)
SERVER_ID = 1
SETUP_LIMIT_MS = 120_000.0
LINK_KEYS = ("hop_latency_ms", "uplink_latency_ms", "uplink_jitter_ms", "loss_prob")
DRAIN_MS = 35_000.0  # long enough for the last confirmable to give up


@dataclass
class ScenarioConfig:
    scenario: str = "c2c"
    mode: str = "handshake"
    topology: str = "forwarders"
    forwarders: int = 0
    nodes: int = 20
    hop_latency_ms: float = 15.0
    uplink_latency_ms: float = 78.0
    uplink_jitter_ms: float = 0.0
    loss_prob: float = 0.0
    interval_ms: float = 1000.0
    count: int = 500
    payload_bytes: int = 5
    seed: int = 0
    lifetime_s: int = 0
    endpoint_style: str = "urn"
    policy: list = field(default_factory=lambda: [
        {"requester": "requester", "host": "host", "object": GENERIC_SENSOR, "flags": "read"},
    ])

    def __post_init__(self):
        if self.scenario not in SCENARIO_KINDS:
            raise ConfigInvalid(f"unknown scenario kind {self.scenario!r}; expected one of {SCENARIO_KINDS}")
        if self.mode not in ("handshake", "context"):
            raise ConfigInvalid(f"unknown security mode {self.mode!r}")
        if self.topology not in ("forwarders", "random"):
            raise ConfigInvalid(f"unknown topology {self.topology!r}")
        if self.forwarders < 0 or self.nodes < 3:
            raise ConfigInvalid("topology size out of range")
        if self.interval_ms <= 0 or self.count <= 0:
            raise ConfigInvalid("interval_ms and count must be positive")
        if not 4 <= self.payload_bytes <= 1024:
            raise ConfigInvalid("payload_bytes must be between 4 and 1024")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ConfigInvalid("loss_prob must lie in [0, 1]")
        if min(self.hop_latency_ms, self.uplink_latency_ms, self.uplink_jitter_ms) < 0:
            raise ConfigInvalid("latencies must be non-negative")
        if self.endpoint_style not in ENDPOINT_STYLES:
            raise ConfigInvalid(f"endpoint_style must be one of {ENDPOINT_STYLES}")
        if self.lifetime_s < 0:
            raise ConfigInvalid("lifetime_s must be non-negative")

    @property
    def security_mode(self) -> SecurityMode:
        return SecurityMode(self.mode)

    @property
    def label(self) -> str:
        return self.scenario if self.scenario == "server-centric" else f"c2c-{self.mode}"

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        if not isinstance(raw, dict):
            raise ConfigInvalid("scenario file must hold a mapping")
        raw = dict(raw)
        topo = raw.pop("topology", None)
        if isinstance(topo, dict):
            topo = dict(topo)
            raw["topology"] = topo.pop("kind", "forwarders")
            for key in ("forwarders", "nodes"):
                if key in topo:
                    raw[key] = topo.pop(key)
            if topo:
                raise ConfigInvalid(f"unknown topology keys {sorted(topo)}")
        elif topo is not None:
            raw["topology"] = topo
        links = raw.pop("links", None) or {}
        if not isinstance(links, dict):
            raise ConfigInvalid("links must be a mapping")
        for key, value in links.items():
            if key not in LINK_KEYS:
                raise ConfigInvalid(f"unknown link key {key!r}")
            raw[key] = value
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            raw = yaml.safe_load(FsPath(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigInvalid(f"cannot read {path}: {exc}") from None
        return cls.from_dict(raw)


@dataclass
class World:
    """Everything one run owns; handy for tests and state dumps."""

    config: ScenarioConfig
    sim: Simulator
    network: Network
    server: Lwm2mServer
    host: Lwm2mClient
    requester: Lwm2mClient

    def node(self, name: str):
        from .errors import UnknownNode
        for n in (self.server, self.host, self.requester):
            if name in (n.name, getattr(n, "endpoint", None)):
                return n
        raise UnknownNode(f"no node called {name!r}")


def build_world(config: ScenarioConfig, extra_edges: Iterable[tuple] = ()) -> World:
    """Build the nodes of one run; ``extra_edges`` (a, b) attach additional radios by one hop."""
    hop = LinkSpec.lowpan(config.loss_prob, config.hop_latency_ms)
    uplink = LinkSpec.uplink(config.uplink_latency_ms, config.uplink_jitter_ms)
    if config.topology == "forwarders":
        graph = forwarder_topology(config.forwarders, hop, uplink)
        host_name, requester_name = "host", "requester"
    else:
        graph, host_name, requester_name = random_topology(config.seed, config.nodes, hop=hop, uplink=uplink)
    for a, b in extra_edges:
        graph.add_edge(a, b, link=hop)
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    sim = Simulator()
    network = Network(sim, graph, seed=int(seeds[0].generate_state(1)[0]))
    host = Lwm2mClient(host_name, network, np.random.default_rng(seeds[2]),
                       endpoint=endpoint_name(host_name, config.endpoint_style))
    requester = Lwm2mClient(requester_name, network, np.random.default_rng(seeds[3]),
                            endpoint=endpoint_name(requester_name, config.endpoint_style))
    try:
        policy = PolicyTable.from_rows(
            {**row, "requester": _resolve(row["requester"], host, requester),
             "host": _resolve(row["host"], host, requester)}
            for row in config.policy
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigInvalid(f"bad policy row: {exc}") from None
    server = Lwm2mServer("server", network, np.random.default_rng(seeds[1]), SERVER_ID, policy,
                         config.security_mode, config.lifetime_s)
    for client in (host, requester):
        psk = Psk(client.endpoint.encode(), client.rng.bytes(16))
        server.add_client_credentials(psk)
        client.add_server(SERVER_ID, server.uri, psk)
        client.tree.create(GENERIC_SENSOR, {5700: b"", 5701: "sensor"}, 0)
    return World(config, sim, network, server, host, requester)


def endpoint_name(node: str, style: str = "urn") -> str:
    """Endpoint client name for a node: URN form by default, the bare node name with ``plain``."""
    return f"urn:dev:ops:c2c-sim-{node}" if style == "urn" else node


def _resolve(name: str, host: Lwm2mClient, requester: Lwm2mClient) -> str:
    # policy rows may name the roles instead of the endpoints
    return {"host": host.endpoint, "requester": requester.endpoint}.get(name, name)


def setup_flow(world: World):
    """Registrations, then either the relay or access request plus observation."""
    cfg, server, host, requester = world.config, world.server, world.host, world.requester
    yield world.sim.process(host.register(server.uri))
    yield world.sim.process(requester.register(server.uri))
    if cfg.scenario == "server-centric":
        yield world.sim.process(server.relay(host.endpoint, SENSOR_VALUE, requester.endpoint, SENSOR_VALUE))
        return

    def mirror(msg):
        requester.tree.set(SENSOR_VALUE, msg.payload)

    yield world.sim.process(requester.access(host.name, host.endpoint, SENSOR_VALUE.instance(), AccessFlags.READ))
    yield requester.observe(host.name, SENSOR_VALUE, mirror)


def run_setup(world: World) -> float:
    """Drive :func:`setup_flow` to completion; returns the simulated time it took."""
    try:
        world.sim.run_until_complete(world.sim.process(setup_flow(world)), limit=SETUP_LIMIT_MS)
    except RuntimeError as exc:
        raise Lwm2mError(f"setup did not finish: {exc}") from None
    return world.sim.now


def run_world(world: World) -> Metrics:
    cfg, sim = world.config, world.sim
    setup_ms = run_setup(world)
    for name in world.network.counters:
        world.network.counters[name] = NodeCounters()

    metrics = Metrics(cfg.label, cfg.interval_ms, cfg.payload_bytes)
    filler = bytes(cfg.payload_bytes - 4)
    t0 = math.ceil(setup_ms / 1000.0) * 1000.0 + 1000.0
    metrics.t_emit = [t0 + i * cfg.interval_ms for i in range(cfg.count)]
    metrics.t_deliver = [math.nan] * cfg.count

    def on_requester_change(path: Path) -> None:
        if path != SENSOR_VALUE:
            return
        value = world.requester.tree.get(SENSOR_VALUE)
        if len(value) != cfg.payload_bytes:
            return
        seq = int.from_bytes(value[:4], "big")
        if seq < cfg.count and math.isnan(metrics.t_deliver[seq]):
            metrics.t_deliver[seq] = sim.now

    world.requester.tree.subscribe(on_requester_change)

    def emit(seq: int) -> None:
        world.host.tree.set(SENSOR_VALUE, seq.to_bytes(4, "big") + filler)

    for seq, t in enumerate(metrics.t_emit):
        sim.schedule(t - sim.now, emit, seq)
    sim.run(until=metrics.t_emit[-1] + DRAIN_MS)

    metrics.counters = {k: NodeCounters(**vars(v)) for k, v in world.network.counters.items()}
    metrics.extra = {
        "mode": cfg.mode if cfg.scenario == "c2c" else None,
        "seed": cfg.seed,
        "setup_ms": round(setup_ms, 3),
        "path_hops": world.network.hops(world.host.name, world.requester.name) if cfg.scenario == "c2c"
        else world.network.hops(world.host.name, "server") + world.network.hops("server", world.requester.name),
        "provisioning_operations": provisioning_operations(world),
        "relay_dropped": getattr(getattr(world.server, "relay_target", None), "dropped", 0),
    }
    return metrics


def provisioning_operations(world: World) -> int:
    """Access requests sent by the requester plus creates the server issued for them."""
    access_requests = sum(1 for r in world.requester.stats.requests if r[3] == "/ac")
    return access_requests + len(world.server.provision_log)


def run_scenario(config: ScenarioConfig | dict) -> Metrics:
    if isinstance(config, dict):
        config = ScenarioConfig.from_dict(config)
    return run_world(build_world(config))
