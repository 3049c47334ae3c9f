"""Simulated network: links, 6LoWPAN byte budgets, radios, routing and metrics.

A datagram travels hop by hop along the shortest path. On a low-power hop the
sending node's radio is occupied for the hop latency plus the airtime of any
extra fragments; while it is busy at most one further datagram may wait, and
anything beyond that is dropped. Every fragment is an independent Bernoulli
loss event; losing any fragment loses the datagram. The Internet uplink is a
pure delay with no radio contention.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import networkx as nx
import numpy as np

from .errors import ConfigInvalid, UnknownNode
from .kernel import Simulator

LOWPAN_HOP = "lowpan-hop"
INTERNET_UPLINK = "internet-uplink"
LINK_KINDS = (LOWPAN_HOP, INTERNET_UPLINK)

RADIO_QUEUE_DEPTH = 1
RADIO_RATE_KBPS = 250.0


@dataclass(frozen=True)
class LinkSpec:
    latency_ms: float = 15.0
    loss_prob: float = 0.0
    kind: str = LOWPAN_HOP
    jitter_ms: float = 0.0

    def __post_init__(self):
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ConfigInvalid("link latency and jitter must be non-negative")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ConfigInvalid(f"loss probability {self.loss_prob} outside [0, 1]")
        if self.kind not in LINK_KINDS:
            raise ConfigInvalid(f"unknown link kind {self.kind!r}")

    @classmethod
    def lowpan(cls, loss_prob: float = 0.0, latency_ms: float = 15.0) -> "LinkSpec":
        return cls(latency_ms, loss_prob, LOWPAN_HOP)

    @classmethod
    def uplink(cls, latency_ms: float = 78.0, jitter_ms: float = 0.0) -> "LinkSpec":
        return cls(latency_ms, 0.0, INTERNET_UPLINK, jitter_ms)


@dataclass(frozen=True)
class FrameBudget:
    phy_mtu: int = 127
    mac_overhead: int = 23
    adaptation_overhead: int = 41
    fragment_header: int = 8

    @property
    def link_payload(self) -> int:
        return self.phy_mtu - self.mac_overhead

    @property
    def first_fragment(self) -> int:
        return self.link_payload - self.adaptation_overhead

    @property
    def next_fragment(self) -> int:
        return self.link_payload - self.fragment_header

    @property
    def frame_airtime_ms(self) -> float:
        return self.phy_mtu * 8 / RADIO_RATE_KBPS

    def link_bytes(self, upper_bytes: int) -> int:
        """Link-layer payload for an unfragmented datagram of ``upper_bytes``."""
        return upper_bytes + self.adaptation_overhead


DEFAULT_BUDGET = FrameBudget()


def fragments_for(upper_bytes: int, budget: FrameBudget = DEFAULT_BUDGET) -> int:
    """Number of link frames needed for a UDP payload of ``upper_bytes``."""
    if upper_bytes < 0:
        raise ValueError("negative payload size")
    if upper_bytes <= budget.first_fragment:
        return 1
    return 1 + math.ceil((upper_bytes - budget.first_fragment) / budget.next_fragment)


@dataclass
class NodeCounters:
    originated_msgs: int = 0
    originated_frames: int = 0
    forwarded_frames: int = 0
    received_msgs: int = 0
    dropped_queue: int = 0
    dropped_loss: int = 0


@dataclass
class WireRecord:
    time: float
    src: str
    dst: str
    size: int
    frame_type: int


class _Radio:
    __slots__ = ("busy", "queue")

    def __init__(self):
        self.busy = False
        self.queue: deque = deque()


class Network:
    def __init__(self, sim: Simulator, graph: nx.Graph, seed: int = 0,
                 budget: FrameBudget = DEFAULT_BUDGET, record_wire: bool = False):
        for u, v, data in graph.edges(data=True):
            if not isinstance(data.get("link"), LinkSpec):
                raise ConfigInvalid(f"edge {u}-{v} has no LinkSpec")
        self.sim = sim
        self.graph = graph
        self.budget = budget
        self.rng = np.random.default_rng(seed)
        self.nodes: Dict[str, object] = {}
        self.counters: Dict[str, NodeCounters] = {n: NodeCounters() for n in graph.nodes}
        self._radios: Dict[str, _Radio] = {n: _Radio() for n in graph.nodes}
        self._routes: Dict[tuple, list] = {}
        self.record_wire = record_wire
        self.wire: list[WireRecord] = []
        self.taps: list[Callable[[WireRecord], None]] = []

    def attach(self, node) -> None:
        if node.name not in self.graph:
            raise UnknownNode(f"{node.name} is not part of the topology")
        self.nodes[node.name] = node

    def route(self, src: str, dst: str) -> list:
        key = (src, dst)
        if key not in self._routes:
            if src not in self.graph or dst not in self.graph:
                raise UnknownNode(f"no such node: {src if src not in self.graph else dst}")
            try:
                self._routes[key] = nx.shortest_path(self.graph, src, dst)
            except nx.NetworkXNoPath:
                raise UnknownNode(f"{dst} is unreachable from {src}") from None
        return self._routes[key]

    def hops(self, src: str, dst: str) -> int:
        return len(self.route(src, dst)) - 1

    def send(self, src: str, dst: str, data: bytes) -> None:
        path = self.route(src, dst)
        record = WireRecord(self.sim.now, src, dst, len(data), data[0] if data else -1)
        if self.record_wire:
            self.wire.append(record)
        for tap in self.taps:
            tap(record)
        self.counters[src].originated_msgs += 1
        self._enqueue(path, 0, bytes(data))

    # hop machinery

    def _enqueue(self, path: list, index: int, data: bytes) -> None:
        here, nxt = path[index], path[index + 1]
        link: LinkSpec = self.graph.edges[here, nxt]["link"]
        if link.kind == INTERNET_UPLINK:
            self._count_frames(path, index, 1)
            delay = link.latency_ms
            if link.jitter_ms:
                delay = max(0.0, delay + self.rng.uniform(-link.jitter_ms, link.jitter_ms))
            self.sim.schedule(delay, self._arrive, path, index + 1, data)
            return
        radio = self._radios[here]
        if radio.busy:
            if len(radio.queue) >= RADIO_QUEUE_DEPTH:
                self.counters[here].dropped_queue += 1
                return
            radio.queue.append((path, index, data))
            return
        self._transmit(radio, path, index, data)

    def _transmit(self, radio: _Radio, path: list, index: int, data: bytes) -> None:
        here, nxt = path[index], path[index + 1]
        link: LinkSpec = self.graph.edges[here, nxt]["link"]
        frames = fragments_for(len(data), self.budget)
        self._count_frames(path, index, frames)
        radio.busy = True
        airtime = link.latency_ms + (frames - 1) * self.budget.frame_airtime_ms
        lost = link.loss_prob > 0 and bool((self.rng.random(frames) < link.loss_prob).any())
        self.sim.schedule(airtime, self._hop_done, radio, path, index, data, lost)

    def _hop_done(self, radio: _Radio, path: list, index: int, data: bytes, lost: bool) -> None:
        radio.busy = False
        if lost:
            self.counters[path[index]].dropped_loss += 1
        else:
            self._arrive(path, index + 1, data)
        if radio.queue:
            self._transmit(radio, *radio.queue.popleft())

    def _count_frames(self, path: list, index: int, frames: int) -> None:
        c = self.counters[path[index]]
        if index == 0:
            c.originated_frames += frames
        else:
            c.forwarded_frames += frames

    def _arrive(self, path: list, index: int, data: bytes) -> None:
        here = path[index]
        if index == len(path) - 1:
            self.counters[here].received_msgs += 1
            node = self.nodes.get(here)
            if node is not None:
                node.receive(path[0], data)
            return
        self._enqueue(path, index, data)


# topologies

def forwarder_topology(forwarders: int = 0, hop: Optional[LinkSpec] = None,
                       uplink: Optional[LinkSpec] = None) -> nx.Graph:
    """Host and requester one hop apart, each behind ``forwarders`` relays to the gateway.

    Adding one forwarder on each side (a forwarder pair) lengthens both the
    host→gateway and gateway→requester paths by one hop.
    """
    if forwarders < 0:
        raise ConfigInvalid("forwarder count must be non-negative")
    hop = hop or LinkSpec.lowpan()
    uplink = uplink or LinkSpec.uplink()
    g = nx.Graph()
    g.add_edge("host", "requester", link=hop)
    for side in ("host", "requester"):
        chain = [side] + [f"fwd-{side[0]}{i}" for i in range(1, forwarders + 1)] + ["gateway"]
        for a, b in zip(chain, chain[1:]):
            g.add_edge(a, b, link=hop)
    g.add_edge("gateway", "server", link=uplink)
    return g


def random_topology(seed: int, n_nodes: int = 20, min_spacing: float = 2.2, max_spacing: float = 6.6,
                    hop: Optional[LinkSpec] = None, uplink: Optional[LinkSpec] = None,
                    max_tries: int = 200) -> tuple[nx.Graph, str, str]:
    """Random placement of ``n_nodes`` radios; returns (graph, host, requester).

    Node 0 is the gateway. Nodes are placed one by one, each at a distance in
    [min_spacing, max_spacing] from a random already-placed node and no closer
    than ``min_spacing`` to any other; radios within ``max_spacing`` of each
    other share a link.
    """
    hop = hop or LinkSpec.lowpan()
    uplink = uplink or LinkSpec.uplink()
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        pts = [np.zeros(2)]
        while len(pts) < n_nodes:
            anchor = pts[rng.integers(len(pts))]
            angle = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(min_spacing, max_spacing)
            cand = anchor + dist * np.array([np.cos(angle), np.sin(angle)])
            if min(np.linalg.norm(cand - p) for p in pts) >= min_spacing - 1e-9:
                pts.append(cand)
        names = ["gateway"] + [f"n{i:02d}" for i in range(1, n_nodes)]
        g = nx.Graph()
        for i, name in enumerate(names):
            g.add_node(name, pos=tuple(float(x) for x in pts[i]))
        for i in range(n_nodes):
            for j in range(i + 1, n_nodes):
                if np.linalg.norm(pts[i] - pts[j]) <= max_spacing + 1e-9:
                    g.add_edge(names[i], names[j], link=hop)
        if not nx.is_connected(g):
            continue
        host, requester = (str(x) for x in rng.choice(names[1:], size=2, replace=False))
        g.add_edge("gateway", "server", link=uplink)
        return g, host, requester
    raise ConfigInvalid("could not build a connected random topology")


# metrics

@dataclass
class Metrics:
    scenario: str
    interval_ms: float
    payload_bytes: int
    t_emit: list = field(default_factory=list)
    t_deliver: list = field(default_factory=list)  # NaN when never delivered
    counters: Dict[str, NodeCounters] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def sent(self) -> int:
        return len(self.t_emit)

    @property
    def delays(self) -> np.ndarray:
        emit, deliver = np.asarray(self.t_emit, float), np.asarray(self.t_deliver, float)
        ok = ~np.isnan(deliver)
        return deliver[ok] - emit[ok]

    @property
    def delivered(self) -> int:
        return int((~np.isnan(np.asarray(self.t_deliver, float))).sum())

    @property
    def delivery_rate(self) -> float:
        return self.delivered / self.sent if self.sent else 0.0

    @property
    def median_delay_ms(self) -> float:
        d = self.delays
        return float(np.median(d)) if d.size else math.nan

    @property
    def goodput_bps(self) -> float:
        """Delivered payload bytes per second over the emission window (or longer if delivery lags)."""
        if not self.sent or not self.delivered:
            return 0.0
        deliver = np.asarray(self.t_deliver, float)
        span = max(self.sent * self.interval_ms, float(np.nanmax(deliver)) - self.t_emit[0])
        return self.delivered * self.payload_bytes / (span / 1000.0)

    @property
    def optimum_bps(self) -> float:
        return self.payload_bytes / (self.interval_ms / 1000.0)

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["seq", "t_emit", "t_deliver", "delivered"])
        for seq, (e, d) in enumerate(zip(self.t_emit, self.t_deliver)):
            ok = not math.isnan(d)
            writer.writerow([seq, f"{e:.3f}", f"{d:.3f}" if ok else "", int(ok)])
        return buf.getvalue()

    def summary(self) -> dict:
        d = self.delays
        return {
            "scenario": self.scenario,
            "interval_ms": self.interval_ms,
            "sent": self.sent,
            "delivered": self.delivered,
            "delivery_rate": round(self.delivery_rate, 6),
            "median_delay_ms": None if not d.size else round(float(np.median(d)), 3),
            "p90_delay_ms": None if not d.size else round(float(np.percentile(d, 90)), 3),
            "goodput_Bps": round(self.goodput_bps, 3),
            "optimum_Bps": round(self.optimum_bps, 3),
            **self.extra,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def message_count_energy_proxy(metrics: Metrics) -> Dict[str, dict]:
    """Frames each node put on the air, split into originated and forwarded."""
    return {
        name: {
            "originated": c.originated_frames,
            "forwarded": c.forwarded_frames,
            "total": c.originated_frames + c.forwarded_frames,
        }
        for name, c in sorted(metrics.counters.items())
    }
