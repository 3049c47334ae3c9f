"""Simulated LwM2M nodes.

:class:`Node` carries everything both roles share: the datagram transport,
confirmable messaging with retransmission and duplicate detection, and secure
channels in either mode. :class:`Lwm2mClient` adds the object tree, ACLs,
observations and the requesting-client side of the authorization flow;
:class:`Lwm2mServer` adds registration, the access request interface and a
relay used by the server-centric scenario.

Application flows (``register``, ``access``, ``observe`` ...) are generator
processes: start them with ``sim.process(...)`` and wait on the result.
"""

from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional

import numpy as np

from . import coap, interfaces
from .acl import ANONYMOUS, AccessFlags, AclTable, Principal, check_access
from .authorization import (
    AccessItem,
    AccessRequest,
    OwnerServerHints,
    PeerInfo,
    PolicyTable,
    encode_access_request,
    decode_access_request,
    plan_access_request,
    validate_hints,
)
from .coap import Code, Kind, Message, Option, TLV_FORMAT, uint_bytes
from .errors import (
    ChannelClosed,
    ChannelError,
    CookieRejected,
    DuplicateEndpoint,
    Forbidden,
    GiveUp,
    HandshakeFailed,
    Lwm2mError,
    Malformed,
    NoCredentials,
    NoTrustedServer,
    PeerExpired,
    PolicyRefused,
    ReplayDetected,
    AuthFailed,
)
from .kernel import Future, Simulator, Timer
from .model import ObjectInstance, ObjectTree, Path
from .netsim import Network
from .objects import uri_address
from .security import (
    FRAME_ALERT,
    FRAME_CONTEXT,
    FRAME_CONTEXT_RESPONSE,
    FRAME_HANDSHAKE,
    FRAME_PLAIN,
    FRAME_RECORD,
    HS_CLIENT_HELLO,
    AccountStore,
    CookieJar,
    HandshakeInitiator,
    HandshakeListener,
    Psk,
    SecureChannel,
    SecurityMode,
    ServerAccount,
    expire_accounts,
    open_record,
    seal,
    seal_request,
    seal_response,
)
from .tlv import tlv_encode

ACK_TIMEOUTS_MS = (2000.0, 4000.0, 8000.0, 16000.0)
DEDUP_WINDOW = 32
CONSTRAINED_PROCESSING_MS = 2.57
SERVER_PROCESSING_MS = 0.5


@dataclass
class NodeStats:
    datagrams_sent: int = 0
    datagrams_received: int = 0
    retransmissions: int = 0
    give_ups: int = 0
    auth_failures: int = 0
    replays: int = 0
    malformed: int = 0
    alerts_sent: int = 0
    alerts_received: int = 0
    handshakes_completed: int = 0
    requests: list = field(default_factory=list)  # (time, peer, method, path, secure)


@dataclass
class Exchange:
    peer: str
    message: Message
    secure: bool
    future: Future
    timeouts: list
    observer: Optional[Callable[[Message], None]] = None
    timer: Optional[Timer] = None
    acked: bool = False
    last_observe: int = -1


@dataclass
class _Reliable:
    peer: str
    message: Message
    role: str
    secure: bool
    request_seq: Optional[int]
    timeouts: list
    future: Future
    timer: Optional[Timer] = None


@dataclass
class _Handshake:
    initiator: HandshakeInitiator
    future: Future
    flight: bytes
    timeouts: list
    timer: Optional[Timer] = None


def _done(sim: Simulator, value=None, error: Optional[BaseException] = None) -> Future:
    fut = Future(sim)
    if error is not None:
        fut.set_error(error)
    else:
        fut.set_result(value)
    return fut


class Node:
    processing_ms = CONSTRAINED_PROCESSING_MS

    def __init__(self, name: str, network: Network, rng: Optional[np.random.Generator] = None):
        self.name = name
        self.uri = f"coaps://{name}"
        self.network = network
        self.sim: Simulator = network.sim
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.accounts = AccountStore()
        self.channels: Dict[str, SecureChannel] = {}
        self.listener = HandshakeListener(name, CookieJar(self.rng.bytes(16)), self._psk_for_identity,
                                          self.rng.bytes)
        self.enforce_lifetime = True
        self.stats = NodeStats()
        self._mid = int(self.rng.integers(0, 0x10000))
        self._token = int(self.rng.integers(0, 1 << 32))
        self._exchanges: Dict[tuple, Exchange] = {}
        self._by_mid: Dict[tuple, Exchange] = {}
        self._reliable: Dict[tuple, _Reliable] = {}
        self._handshakes: Dict[str, _Handshake] = {}
        self._dedup: Dict[tuple, OrderedDict] = {}
        network.attach(self)

    # ids

    def next_mid(self) -> int:
        self._mid = (self._mid + 1) & 0xFFFF
        return self._mid

    def next_token(self) -> bytes:
        self._token = (self._token + 1) & 0xFFFFFFFF
        return self._token.to_bytes(4, "big")

    # identity and credentials

    def _client_account_at(self, address: str):
        return next((c for c in self.accounts.clients.values() if c.uri and uri_address(c.uri) == address), None)

    def _server_account_at(self, address: str) -> Optional[ServerAccount]:
        return next((s for s in self.accounts.servers.values() if uri_address(s.uri) == address), None)

    def expire_now(self) -> list[int]:
        if not self.enforce_lifetime:
            return []
        return expire_accounts(self.accounts, self.sim.now,
                               on_expire=lambda a: self.close_peer(uri_address(a.uri)) if a.uri else None)

    def credentials_for(self, peer: str) -> tuple[Psk, SecurityMode]:
        server = self._server_account_at(peer)
        if server is not None:
            if server.credentials is None:
                raise NoCredentials(f"no credentials for server {peer}")
            return server.credentials, server.mode
        self.expire_now()
        account = self._client_account_at(peer)
        if account is None or account.credentials is None:
            raise NoCredentials(f"no credentials for {peer}")
        if account.expired and self.enforce_lifetime:
            raise PeerExpired(f"account for {peer} has expired")
        return account.credentials, account.security_mode

    def _psk_for_identity(self, identity: bytes) -> Optional[Psk]:
        self.expire_now()
        account = self.accounts.client_by_identity(identity)
        if account is None or account.security_mode is not SecurityMode.HANDSHAKE:
            return None
        if account.expired and self.enforce_lifetime:
            return None
        return account.credentials

    def principal_for(self, peer: str) -> Principal:
        server = self._server_account_at(peer)
        if server is not None:
            return Principal.server(server.short_server_id)
        account = self._client_account_at(peer)
        if account is not None and not (account.expired and self.enforce_lifetime):
            return Principal.client(account.client_id)
        return ANONYMOUS

    # channels

    def ensure_channel(self, peer: str) -> Future:
        ch = self.channels.get(peer)
        if ch is not None and ch.established:
            return _done(self.sim, ch)
        if peer in self._handshakes:
            return self._handshakes[peer].future
        try:
            psk, mode = self.credentials_for(peer)
        except ChannelError as exc:
            return _done(self.sim, error=exc)
        if mode is SecurityMode.CONTEXT:
            ch = SecureChannel.from_context(self.name, peer, psk)
            self.channels[peer] = ch
            return _done(self.sim, ch)
        init = HandshakeInitiator(self.name, peer, psk, self.rng.bytes(16))
        hs = _Handshake(init, Future(self.sim), init.first_flight(), list(ACK_TIMEOUTS_MS))
        self._handshakes[peer] = hs
        self._send_flight(peer, hs)
        return hs.future

    def _send_flight(self, peer: str, hs: _Handshake) -> None:
        if hs.timer is not None:
            hs.timer.cancel()
        self._transmit(peer, FRAME_HANDSHAKE, hs.flight)
        hs.timer = self.sim.schedule(hs.timeouts.pop(0), self._flight_timeout, peer, hs)

    def _flight_timeout(self, peer: str, hs: _Handshake) -> None:
        if self._handshakes.get(peer) is not hs:
            return
        if not hs.timeouts:
            del self._handshakes[peer]
            self.stats.give_ups += 1
            hs.future.set_error(GiveUp(f"handshake with {peer} timed out"))
            return
        self.stats.retransmissions += 1
        self._send_flight(peer, hs)

    def close_peer(self, peer: str) -> None:
        """Drop every piece of session state shared with ``peer``."""
        ch = self.channels.pop(peer, None)
        if ch is not None:
            ch.close()
        self.listener.drop(peer)
        hs = self._handshakes.pop(peer, None)
        if hs is not None:
            if hs.timer:
                hs.timer.cancel()
            hs.future.set_error(ChannelClosed(f"session with {peer} closed"))
        for ex in [e for e in self._exchanges.values() if e.peer == peer and e.secure]:
            self._fail(ex, ChannelClosed(f"session with {peer} closed"))
        for rel in [r for r in self._reliable.values() if r.peer == peer and r.secure]:
            self._finish_reliable(rel, ChannelClosed(f"session with {peer} closed"))

    def handshake_state_count(self) -> int:
        return self.listener.state_count

    # wire

    def _transmit(self, peer: str, frame: int, body: bytes) -> None:
        self.stats.datagrams_sent += 1
        self.network.send(self.name, peer, bytes([frame]) + body)

    def _send_alert(self, peer: str) -> None:
        self.stats.alerts_sent += 1
        self._transmit(peer, FRAME_ALERT, b"\x00")

    def _send(self, peer: str, msg: Message, role: str, secure: bool,
              request_seq: Optional[int] = None) -> None:
        raw = coap.encode(msg)
        if not secure:
            self._transmit(peer, FRAME_PLAIN, raw)
            return
        ch = self.channels.get(peer)
        if ch is None or not ch.established:
            raise ChannelClosed(f"no session with {peer}")
        if role == "request":
            sealed = seal_request(ch, raw, msg.token)
        elif role == "response":
            sealed = seal_response(ch, raw, msg.token, request_seq)
        elif role == "notification":
            sealed = seal_response(ch, raw, msg.token, notification=True)
        elif ch.mode is SecurityMode.CONTEXT:
            # empty ACK/RST carry nothing worth protecting
            self._transmit(peer, FRAME_PLAIN, raw)
            return
        else:
            sealed = seal(ch, raw)[0]
        self._transmit(peer, sealed.frame, sealed.data)

    def receive(self, src: str, data: bytes) -> None:
        self.sim.schedule(self.processing_ms, self._dispatch, src, data)

    def _dispatch(self, src: str, data: bytes) -> None:
        self.stats.datagrams_received += 1
        if not data:
            return
        frame, body = data[0], data[1:]
        if frame == FRAME_PLAIN:
            try:
                msg = coap.decode(body)
            except Malformed:
                self.stats.malformed += 1
                return
            self._on_message(src, msg, ANONYMOUS, False, None)
        elif frame == FRAME_HANDSHAKE:
            self._on_handshake(src, body)
        elif frame == FRAME_ALERT:
            self._on_alert(src)
        elif frame in (FRAME_RECORD, FRAME_CONTEXT, FRAME_CONTEXT_RESPONSE):
            self._on_record(src, frame, body)

    def _on_record(self, src: str, frame: int, body: bytes) -> None:
        self.expire_now()
        ch = self.channels.get(src)
        if (ch is None or not ch.established) and frame == FRAME_CONTEXT:
            ch = self._incoming_context_channel(src)
        if ch is None or not ch.established:
            self._send_alert(src)
            return
        try:
            opened = open_record(ch, frame, body)
        except ReplayDetected:
            self.stats.replays += 1
            return
        except (AuthFailed, ChannelClosed):
            self.stats.auth_failures += 1
            return
        try:
            msg = coap.decode(opened.plaintext)
        except Malformed:
            self.stats.malformed += 1
            return
        principal = self.principal_for(src)
        self._on_message(src, msg, principal, True, opened.seq)

    def _incoming_context_channel(self, src: str) -> Optional[SecureChannel]:
        account = self._client_account_at(src)
        if (account is None or account.credentials is None
                or account.security_mode is not SecurityMode.CONTEXT
                or (account.expired and self.enforce_lifetime)):
            return None
        ch = SecureChannel.from_context(self.name, src, account.credentials)
        self.channels[src] = ch
        return ch

    def _on_handshake(self, src: str, body: bytes) -> None:
        if body[:1] == bytes([HS_CLIENT_HELLO]):
            try:
                reply, ch = self.listener.on_hello(src, body, self.sim.now)
            except CookieRejected:
                return
            except (HandshakeFailed, Malformed):
                self._send_alert(src)
                return
            if ch is not None and self.channels.get(src) is not ch:
                old = self.channels.pop(src, None)
                if old is not None:
                    old.close()
                self.channels[src] = ch
                self.stats.handshakes_completed += 1
                self.on_channel(src, ch)
            self._transmit(src, FRAME_HANDSHAKE, reply)
            return
        hs = self._handshakes.get(src)
        if hs is None:
            return
        try:
            nxt = hs.initiator.on_message(body)
        except (HandshakeFailed, Malformed) as exc:
            del self._handshakes[src]
            if hs.timer:
                hs.timer.cancel()
            self._send_alert(src)
            hs.future.set_error(HandshakeFailed(str(exc)))
            return
        if nxt is not None:
            hs.flight = nxt
            hs.timeouts = list(ACK_TIMEOUTS_MS)
            self._send_flight(src, hs)
            return
        del self._handshakes[src]
        if hs.timer:
            hs.timer.cancel()
        self.channels[src] = hs.initiator.channel
        self.stats.handshakes_completed += 1
        hs.future.set_result(hs.initiator.channel)

    def on_channel(self, peer: str, ch: SecureChannel) -> None:
        """Hook for listeners that want to know who completed a handshake."""

    def _on_alert(self, src: str) -> None:
        self.stats.alerts_received += 1
        hs = self._handshakes.pop(src, None)
        if hs is not None:
            if hs.timer:
                hs.timer.cancel()
            hs.future.set_error(HandshakeFailed(f"{src} aborted the handshake"))
        self.close_peer(src)

    # messaging

    def request(self, peer: str, msg: Message, *, secure: bool = True,
                observer: Optional[Callable[[Message], None]] = None) -> Future:
        """Send a request and return a future for its response."""
        msg = replace(msg, message_id=self.next_mid(), token=self.next_token())
        ex = Exchange(peer, msg, secure, Future(self.sim),
                      list(ACK_TIMEOUTS_MS) if msg.kind is Kind.CON else [], observer)
        self._exchanges[(peer, msg.token)] = ex
        self._by_mid[(peer, msg.message_id)] = ex
        self.stats.requests.append((self.sim.now, peer, msg.code.name, "/" + "/".join(msg.uri_path), secure))
        if secure:
            def go(f: Future):
                if f.error is not None:
                    self._fail(ex, f.error)
                else:
                    self._transmit_exchange(ex)
            self.ensure_channel(peer).add_callback(go)
        else:
            self._transmit_exchange(ex)
        return ex.future

    def _transmit_exchange(self, ex: Exchange) -> None:
        if ex.future.done and ex.observer is None:
            return
        if ex.secure and ex.observer is not None:
            ch = self.channels.get(ex.peer)
            if ch is not None:
                ch.expect(ex.message.token, observe=True)
        try:
            self._send(ex.peer, ex.message, "request", ex.secure)
        except ChannelError as exc:
            self._fail(ex, exc)
            return
        if ex.message.kind is Kind.CON and not ex.acked and ex.timeouts:
            ex.timer = self.sim.schedule(ex.timeouts.pop(0), self._exchange_timeout, ex)

    def _exchange_timeout(self, ex: Exchange) -> None:
        if ex.future.done or ex.acked:
            return
        if not ex.timeouts:
            self.stats.give_ups += 1
            self._fail(ex, GiveUp(f"no answer from {ex.peer} for {ex.message.code.name}"))
            return
        self.stats.retransmissions += 1
        self._transmit_exchange(ex)

    def _forget(self, ex: Exchange) -> None:
        if ex.timer is not None:
            ex.timer.cancel()
        self._exchanges.pop((ex.peer, ex.message.token), None)
        self._by_mid.pop((ex.peer, ex.message.message_id), None)
        ch = self.channels.get(ex.peer)
        if ch is not None and ex.secure:
            ch.forget(ex.message.token)

    def _fail(self, ex: Exchange, error: BaseException) -> None:
        self._forget(ex)
        if not ex.future.done:
            ex.future.set_error(error)

    def cancel_observation(self, peer: str, token: bytes) -> None:
        ex = self._exchanges.get((peer, token))
        if ex is not None:
            self._forget(ex)

    def send_confirmable(self, peer: str, msg: Message, role: str, secure: bool,
                         request_seq: Optional[int] = None) -> Future:
        rel = _Reliable(peer, msg, role, secure, request_seq, list(ACK_TIMEOUTS_MS), Future(self.sim))
        self._reliable[(peer, msg.message_id)] = rel
        self._transmit_reliable(rel)
        return rel.future

    def _transmit_reliable(self, rel: _Reliable) -> None:
        try:
            self._send(rel.peer, rel.message, rel.role, rel.secure, rel.request_seq)
        except ChannelError as exc:
            self._finish_reliable(rel, exc)
            return
        rel.timer = self.sim.schedule(rel.timeouts.pop(0), self._reliable_timeout, rel)

    def _reliable_timeout(self, rel: _Reliable) -> None:
        if rel.future.done:
            return
        if not rel.timeouts:
            self.stats.give_ups += 1
            self._finish_reliable(rel, GiveUp(f"{rel.peer} never acknowledged"))
            return
        self.stats.retransmissions += 1
        self._transmit_reliable(rel)

    def _finish_reliable(self, rel: _Reliable, error: Optional[BaseException] = None) -> None:
        if rel.timer is not None:
            rel.timer.cancel()
        self._reliable.pop((rel.peer, rel.message.message_id), None)
        if error is None:
            rel.future.set_result(None)
        else:
            rel.future.set_error(error)

    def _on_message(self, src: str, msg: Message, principal: Principal, secure: bool,
                    seq: Optional[int]) -> None:
        if msg.code.is_request:
            cache = self._dedup.setdefault((src, secure), OrderedDict())
            if msg.message_id in cache:
                cached = cache[msg.message_id]
                if cached is not None:
                    self._reply(src, cached, secure, seq)
                return
            cache[msg.message_id] = None
            while len(cache) > DEDUP_WINDOW:
                cache.popitem(last=False)
            response = self.handle(src, principal, msg, secure, seq)
            if response is not None:
                cache[msg.message_id] = response
                self._reply(src, response, secure, seq)
            return
        if msg.code is Code.EMPTY:
            if msg.kind is Kind.ACK:
                rel = self._reliable.get((src, msg.message_id))
                if rel is not None:
                    self._finish_reliable(rel)
                    return
                ex = self._by_mid.get((src, msg.message_id))
                if ex is not None and not ex.acked:
                    ex.acked = True
                    if ex.timer is not None:
                        ex.timer.cancel()
            elif msg.kind is Kind.RST:
                self.on_reset(src, msg)
            elif msg.kind is Kind.CON:
                self._send(src, Message(Kind.RST, Code.EMPTY, msg.message_id), "empty", secure)
            return
        # a response
        if msg.kind is Kind.CON:
            self._send(src, Message(Kind.ACK, Code.EMPTY, msg.message_id), "empty", secure)
        if msg.kind is Kind.ACK:
            rel = self._reliable.get((src, msg.message_id))
            if rel is not None:
                self._finish_reliable(rel)
        ex = self._exchanges.get((src, msg.token))
        if ex is None or ex.secure != secure:
            return
        if ex.future.done:
            if ex.observer is not None and msg.code.is_success:
                if msg.observe is not None and msg.observe <= ex.last_observe:
                    return  # stale notification
                ex.last_observe = msg.observe if msg.observe is not None else ex.last_observe
                ex.observer(msg)
            return
        if ex.timer is not None:
            ex.timer.cancel()
        if ex.observer is not None and msg.code.is_success and msg.observe is not None:
            ex.last_observe = msg.observe
            ex.future.set_result(msg)
            return
        self._forget(ex)
        ex.future.set_result(msg)

    def _reply(self, src: str, response: Message, secure: bool, seq: Optional[int]) -> None:
        role = "empty" if response.code is Code.EMPTY else "response"
        try:
            self._send(src, response, role, secure, seq)
        except ChannelError:
            pass

    def on_reset(self, src: str, msg: Message) -> None:
        """Peer rejected one of our messages (for example a notification it no longer wants)."""

    def handle(self, src: str, principal: Principal, msg: Message, secure: bool,
               seq: Optional[int]) -> Optional[Message]:
        return coap.response_to(msg, Code.NOT_FOUND)

    def dump(self) -> dict:
        self.expire_now()
        return {"node": self.name, "accounts": self.accounts.dump(),
                "channels": sorted(p for p, c in self.channels.items() if c.established)}


class Lwm2mClient(Node):
    def __init__(self, name: str, network: Network, rng: Optional[np.random.Generator] = None,
                 endpoint: Optional[str] = None, schemas=None):
        super().__init__(name, network, rng)
        self.endpoint = endpoint or name
        self.tree = ObjectTree(schemas)
        self.tree.subscribe(self._on_tree_change)
        self.acl = AclTable()
        self.observations = interfaces.ObservationTable()
        self.oscore: dict = {}
        self.hint_servers: list[str] = []
        self.create_grants = AccessFlags.READ | AccessFlags.WRITE

    @property
    def server_ids(self) -> set:
        return set(self.accounts.servers)

    def add_server(self, short_server_id: int, uri: str, psk: Psk, default: bool = True) -> ServerAccount:
        account = self.accounts.add_server(ServerAccount(short_server_id, uri, psk))
        if default:
            self.hint_servers.append(uri)
        return account

    def close_peer(self, peer: str) -> None:
        super().close_peer(peer)
        self.observations.drop_peer(peer)

    def handle(self, src, principal, msg, secure, seq):
        return interfaces.handle_request(self, principal, msg, src)

    def on_reset(self, src: str, msg: Message) -> None:
        for obs in list(self.observations):
            if obs.peer == src:
                self.observations.remove(src, obs.token)

    def _on_tree_change(self, path: Path) -> None:
        self.expire_now()
        for obs in self.observations.matching(path):
            if not check_access(obs.observer, AccessFlags.READ, obs.path, self.acl, self.server_ids):
                self.observations.remove(obs.peer, obs.token)
                continue
            obs.counter += 1
            msg = interfaces.notification(self, obs, self.next_mid())
            try:
                if obs.confirmable:
                    self.send_confirmable(obs.peer, msg, "notification", True)
                else:
                    self._send(obs.peer, msg, "notification", True)
            except ChannelError:
                self.observations.remove(obs.peer, obs.token)

    def dump(self) -> dict:
        out = super().dump()
        out.update(self.acl.dump())
        out["observations"] = self.observations.dump()
        out["objects"] = {k: {str(r): (v.hex() if isinstance(v, bytes) else v) for r, v in res.items()}
                          for k, res in self.tree.snapshot().items()}
        return out

    # application flows (generators)

    def register(self, server_uri: str, lifetime_s: int = 86400):
        """Register with a server. Never sent in the clear: a channel failure aborts it."""
        account = self.accounts.server_by_uri(server_uri)
        if account is None:
            raise NoCredentials(f"{server_uri} is not a configured server")
        links = ",".join(f"</{i.object_id}/{i.instance_id}>" for i in self.tree).encode()
        msg = coap.request(Code.POST, ["rd"], query=[f"ep={self.endpoint}", f"lt={lifetime_s}"], payload=links)
        resp = yield self.request(uri_address(server_uri), msg)
        if resp.code is Code.CREATED:
            account.registered = True
            return resp
        if resp.code is Code.FORBIDDEN:
            raise DuplicateEndpoint(f"{self.endpoint} rejected by {server_uri}")
        raise Lwm2mError(f"registration failed with {resp.code.dotted}")

    def peer_request(self, peer: str, msg: Message):
        """Use the secure session when credentials exist, fall back to a plain request otherwise."""
        try:
            self.credentials_for(peer)
        except ChannelError:
            return (yield self.request(peer, msg, secure=False))
        try:
            return (yield self.request(peer, msg, secure=True))
        except ChannelError:
            return (yield self.request(peer, msg, secure=False))

    def access(self, host: str, host_endpoint: str, path: Path, flags: AccessFlags = AccessFlags.READ,
               need_credentials: bool = True, operation: Optional[Message] = None):
        """Reach ``path`` on ``host``, going through hints and an access request if needed.

        Returns the response to ``operation`` (a read by default).
        """
        op = operation or coap.request(Code.GET, path)
        first = yield from self.peer_request(host, op)
        if first.code is not Code.UNAUTHORIZED:
            return first
        if not first.payload:
            raise NoTrustedServer(f"{host} named no server to ask")
        hints = OwnerServerHints.decode(first.payload)
        server = validate_hints(self.accounts, hints)
        req = AccessRequest(host_endpoint, need_credentials, (AccessItem(path.object_id, path.instance_id, flags),))
        uri_path, query, payload = encode_access_request(req)
        resp = yield self.request(uri_address(server.uri), coap.request(Code.POST, uri_path, query=query,
                                                                        payload=payload))
        if resp.code is not Code.CREATED:
            raise PolicyRefused(f"access request answered with {resp.code.dotted}")
        return (yield from self.peer_request(host, op))

    def observe(self, peer: str, path: Path, on_notify: Callable[[Message], None], secure: bool = True) -> Future:
        return self.request(peer, coap.request(Code.GET, path, observe=0), secure=secure, observer=on_notify)


@dataclass
class _RelayTarget:
    address: str
    path: Path
    busy: bool = False
    pending: deque = field(default_factory=lambda: deque(maxlen=1))
    dropped: int = 0


class Lwm2mServer(Node):
    processing_ms = SERVER_PROCESSING_MS

    def __init__(self, name: str, network: Network, rng: Optional[np.random.Generator] = None,
                 short_server_id: int = 1, policy: Optional[PolicyTable] = None,
                 c2c_mode: SecurityMode = SecurityMode.HANDSHAKE, client_lifetime_s: int = 0):
        super().__init__(name, network, rng)
        self.short_server_id = short_server_id
        self.registry = interfaces.Registry()
        self.policy = policy or PolicyTable()
        self.c2c_mode = c2c_mode
        self.client_lifetime_s = client_lifetime_s
        self.issued_keys: set = set()
        self.provision_log: list = []  # (time, target address, step name, response code)
        self._bootstrap: Dict[bytes, Psk] = {}
        self._channel_identity: Dict[str, bytes] = {}
        self._inflight: Dict[tuple, list] = {}

    def add_client_credentials(self, psk: Psk) -> None:
        self._bootstrap[psk.identity] = psk

    def _psk_for_identity(self, identity: bytes) -> Optional[Psk]:
        return self._bootstrap.get(identity)

    def principal_for(self, peer: str) -> Principal:
        reg = self.registry.by_address(peer)
        if reg is not None:
            return Principal.client(reg.client_id)
        if peer in self.channels:
            return Principal("client")
        return ANONYMOUS

    def new_key(self) -> bytes:
        while True:
            key = self.rng.bytes(16)
            if key not in self.issued_keys:
                self.issued_keys.add(key)
                return key

    def handle(self, src, principal, msg, secure, seq):
        if not secure:
            return coap.response_to(msg, Code.UNAUTHORIZED)
        if msg.uri_path == ["rd"] and msg.code is Code.POST:
            try:
                endpoint, lifetime, links = interfaces.parse_registration(msg)
                reg = self.registry.register(endpoint, src, principal, lifetime, links)
            except DuplicateEndpoint:
                return coap.response_to(msg, Code.FORBIDDEN)
            except (Malformed, Forbidden):
                return coap.response_to(msg, Code.BAD_REQUEST)
            return coap.response_to(msg, Code.CREATED,
                                    options=[(Option.LOCATION_PATH, s.encode()) for s in reg.location.split("/")])
        if msg.uri_path == ["ac"] and msg.code is Code.POST:
            return self._on_access_request(src, msg, seq)
        return coap.response_to(msg, Code.NOT_FOUND)

    def dump(self) -> dict:
        out = super().dump()
        out["registrations"] = [{"endpoint": r.endpoint, "address": r.address, "client_id": r.client_id}
                                for r in self.registry.by_endpoint.values()]
        return out

    # access requests

    def _peer_info(self, reg) -> PeerInfo:
        return PeerInfo(reg.endpoint, reg.address, f"coaps://{reg.address}", reg.client_id)

    def _on_access_request(self, src: str, msg: Message, seq: Optional[int]) -> Optional[Message]:
        requester = self.registry.by_address(src)
        if requester is None:
            return coap.response_to(msg, Code.UNAUTHORIZED)
        try:
            req = decode_access_request(msg.uri_path, msg.uri_query, msg.payload)
        except Malformed:
            return coap.response_to(msg, Code.BAD_REQUEST)
        host = self.registry.by_endpoint.get(req.target_endpoint)
        if host is None or host.address == src:
            return coap.response_to(msg, Code.NOT_FOUND)
        pair = (requester.endpoint, host.endpoint)
        separate_ack = Message(Kind.ACK, Code.EMPTY, msg.message_id) if msg.kind is Kind.CON else None
        if pair in self._inflight:
            self._inflight[pair].append((src, msg, seq))
            return separate_ack
        try:
            plan = plan_access_request(self.short_server_id, self._peer_info(requester), self._peer_info(host),
                                       req, self.policy, self.c2c_mode, self.new_key, self.client_lifetime_s)
        except PolicyRefused:
            return coap.response_to(msg, Code.UNAUTHORIZED)
        self._inflight[pair] = [(src, msg, seq)]
        self.sim.process(self._provision(pair, plan, requester.address, host.address))
        return separate_ack

    def _provision(self, pair, plan, requester_addr: str, host_addr: str):
        ctx: dict = {}
        created: list = []
        ok = True
        for step in plan.steps:
            addr = host_addr if step.target == "host" else requester_addr
            resources = step.resources(ctx)
            if step.instance_id is not None:
                payload = tlv_encode(ObjectInstance(step.object_id, step.instance_id, resources), wrap=True)
            else:
                payload = tlv_encode(resources)
            m = coap.request(Code.POST, Path(step.object_id), payload=payload)
            m.options.append((Option.CONTENT_FORMAT, uint_bytes(TLV_FORMAT)))
            try:
                resp = yield self.request(addr, m)
            except Lwm2mError:
                self.provision_log.append((self.sim.now, addr, step.name, "error"))
                ok = False
                break
            self.provision_log.append((self.sim.now, addr, step.name, resp.code.dotted))
            if resp.code not in (Code.CREATED, Code.CHANGED) or not resp.location_path:
                ok = False
                break
            iid = int(resp.location_path[-1])
            ctx[step.name] = iid
            if resp.code is Code.CREATED:
                created.append((addr, step.object_id, iid))
        if not ok:
            for addr, oid, iid in reversed(created):
                try:
                    yield self.request(addr, coap.request(Code.DELETE, Path(oid, iid)))
                except Lwm2mError:
                    pass
        code = Code.CREATED if ok else Code.INTERNAL_ERROR
        for src, req_msg, seq in self._inflight.pop(pair, []):
            answer = Message(Kind.CON if req_msg.kind is Kind.CON else Kind.NON, code, self.next_mid(),
                             req_msg.token)
            if answer.kind is Kind.CON:
                self.send_confirmable(src, answer, "response", True, seq)
            else:
                self._reply(src, answer, True, seq)
        return ok

    # server-centric relay

    def relay(self, host_endpoint: str, source: Path, requester_endpoint: str, target: Path,
              on_write: Optional[Callable[[bytes], None]] = None):
        """Observe ``source`` on the host and write each new value to ``target`` on the requester.

        Writes to one endpoint are serialised (one outstanding confirmable);
        while one is in flight the newest value waits in a single slot and any
        value it displaces is lost.
        """
        host = self.registry.by_endpoint[host_endpoint]
        dest = _RelayTarget(self.registry.by_endpoint[requester_endpoint].address, target)
        self.relay_target = dest

        def on_notify(msg: Message) -> None:
            self._relay_enqueue(dest, msg.payload)

        first = yield self.request(host.address, coap.request(Code.GET, source, observe=0), observer=on_notify)
        return first

    def _relay_enqueue(self, dest: _RelayTarget, value: bytes) -> None:
        if dest.busy:
            if dest.pending:
                dest.dropped += 1
            dest.pending.append(value)
            return
        self._relay_write(dest, value)

    def _relay_write(self, dest: _RelayTarget, value: bytes) -> None:
        dest.busy = True
        fut = self.request(dest.address, coap.request(Code.PUT, dest.path, payload=value))

        def done(_f: Future) -> None:
            dest.busy = False
            if dest.pending:
                self._relay_write(dest, dest.pending.popleft())
        fut.add_callback(done)
