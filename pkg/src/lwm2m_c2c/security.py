"""Accounts, credentials and the secure-channel abstraction.

Two channel styles are modelled:

* handshake mode: a four-flight PSK exchange with a stateless cookie, then
  records with a 13-byte header, an 8-byte explicit nonce and an 8-byte tag
  (29 bytes of overhead per record);
* context mode: keys derived locally from the PSK with no flights. Requests
  and notifications carry a 6-byte header (flags + 5-byte sequence number),
  plain responses reuse the request's sequence number and carry only the tag.

All payload protection is AES-128-CCM with an 8-byte tag. Simulation times
are milliseconds; account lifetimes are seconds.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, NamedTuple, Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESCCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    AuthFailed,
    ChannelClosed,
    CookieRejected,
    HandshakeFailed,
    Malformed,
    ReplayDetected,
)

KEY_LEN = 16
TAG_LEN = 8
COOKIE_LEN = 16
RANDOM_LEN = 16
PROOF_LEN = 12
REPLAY_WINDOW = 64
MAX_SEQ = (1 << 48) - 1
COOKIE_ROTATION_MS = 60_000.0

# frame types on the simulated wire (first byte of every datagram)
FRAME_PLAIN = 0x00
FRAME_HANDSHAKE = 0x01
FRAME_RECORD = 0x02
FRAME_CONTEXT = 0x03
FRAME_CONTEXT_RESPONSE = 0x04
FRAME_ALERT = 0x05

RECORD_HEADER_LEN = 13
EXPLICIT_NONCE_LEN = 8
CONTEXT_HEADER_LEN = 6
CONTEXT_PIV_LEN = 5

HANDSHAKE_OVERHEAD = RECORD_HEADER_LEN + EXPLICIT_NONCE_LEN + TAG_LEN
CONTEXT_REQUEST_OVERHEAD = CONTEXT_HEADER_LEN + TAG_LEN
CONTEXT_RESPONSE_OVERHEAD = TAG_LEN


class SecurityMode(enum.Enum):
    HANDSHAKE = "handshake"
    CONTEXT = "context"


@dataclass(frozen=True)
class Psk:
    identity: bytes
    key: bytes

    def __post_init__(self):
        if len(self.key) != KEY_LEN:
            raise ValueError(f"PSK key must be {KEY_LEN} bytes, got {len(self.key)}")


@dataclass
class ServerAccount:
    short_server_id: int
    uri: str
    credentials: Optional[Psk] = None
    registered: bool = False
    mode: SecurityMode = SecurityMode.HANDSHAKE

    def __post_init__(self):
        if not 1 <= self.short_server_id <= 0xFFFE:
            raise ValueError("short server id must be in 1..65534")


@dataclass
class ClientAccount:
    """What a node knows about one peer client."""

    client_id: int
    endpoint_name: str = ""
    uri: str = ""
    lifetime_s: int = 0
    binding: str = "U"
    security_mode: SecurityMode = SecurityMode.HANDSHAKE
    credentials: Optional[Psk] = None
    created_at: float = 0.0
    expired: bool = False
    default_pmin: int = 0
    default_pmax: int = 0

    @property
    def expires_at(self) -> Optional[float]:
        if self.lifetime_s == 0:
            return None
        return self.created_at + self.lifetime_s * 1000.0

    def is_due(self, now: float) -> bool:
        deadline = self.expires_at
        return deadline is not None and now >= deadline

    def refresh(self, now: float) -> None:
        self.created_at = now
        self.expired = False


class AccountStore:
    def __init__(self):
        self.servers: Dict[int, ServerAccount] = {}
        self.clients: Dict[int, ClientAccount] = {}

    def add_server(self, account: ServerAccount) -> ServerAccount:
        if account.short_server_id in self.servers:
            raise ValueError(f"short server id {account.short_server_id} already used")
        self.servers[account.short_server_id] = account
        return account

    def add_client(self, account: ClientAccount) -> ClientAccount:
        if account.client_id in self.clients:
            raise ValueError(f"client id {account.client_id} already used")
        self.clients[account.client_id] = account
        return account

    def server_by_uri(self, uri: str) -> Optional[ServerAccount]:
        return next((s for s in self.servers.values() if s.uri == uri), None)

    def client_by_uri(self, uri: str) -> Optional[ClientAccount]:
        return next((c for c in self.clients.values() if c.uri == uri), None)

    def client_by_endpoint(self, name: str) -> Optional[ClientAccount]:
        return next((c for c in self.clients.values() if c.endpoint_name == name), None)

    def client_by_identity(self, identity: bytes) -> Optional[ClientAccount]:
        return next(
            (c for c in self.clients.values() if c.credentials and c.credentials.identity == identity),
            None,
        )

    def free_client_id(self) -> int:
        return next(i for i in range(0xFFFF) if i not in self.clients)

    def dump(self) -> dict:
        return {
            "servers": [
                {"short_server_id": s.short_server_id, "uri": s.uri, "registered": s.registered}
                for s in sorted(self.servers.values(), key=lambda s: s.short_server_id)
            ],
            "clients": [
                {
                    "client_id": c.client_id,
                    "endpoint": c.endpoint_name,
                    "uri": c.uri,
                    "lifetime_s": c.lifetime_s,
                    "mode": c.security_mode.value,
                    "has_credentials": c.credentials is not None,
                    "created_at_ms": c.created_at,
                    "expired": c.expired,
                }
                for c in sorted(self.clients.values(), key=lambda c: c.client_id)
            ],
        }


def expire_accounts(accounts: AccountStore, now: float,
                    on_expire: Optional[Callable[[ClientAccount], None]] = None) -> list[int]:
    """Mark every client account past its lifetime as expired.

    ``on_expire`` is called once per newly expired account so the owner can
    close channels to that peer. Returns the ids expired by this call.
    """
    expired = []
    for account in sorted(accounts.clients.values(), key=lambda a: a.client_id):
        if not account.expired and account.is_due(now):
            account.expired = True
            expired.append(account.client_id)
            if on_expire is not None:
                on_expire(account)
    return expired


# key schedule

def _hkdf(secret: bytes, info: bytes, length: int, salt: Optional[bytes] = None) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(secret)


def _mac(key: bytes, *parts: bytes) -> bytes:
    return hmac.new(key, b"".join(parts), hashlib.sha256).digest()


class ReplayWindow:
    """Sliding window over received sequence numbers."""

    def __init__(self, size: int = REPLAY_WINDOW):
        self.size = size
        self.highest = -1
        self.bitmap = 0

    def seen(self, seq: int) -> bool:
        if seq > self.highest:
            return False
        offset = self.highest - seq
        return offset >= self.size or bool(self.bitmap >> offset & 1)

    def mark(self, seq: int) -> None:
        if seq > self.highest:
            shift = seq - self.highest
            self.bitmap = ((self.bitmap << shift) | 1) & ((1 << self.size) - 1)
            self.highest = seq
        else:
            self.bitmap |= 1 << (self.highest - seq)


class Sealed(NamedTuple):
    frame: int
    data: bytes


class Opened(NamedTuple):
    plaintext: bytes
    seq: Optional[int]
    token: Optional[bytes]  # request token the record is bound to; None for requests


@dataclass
class SecureChannel:
    local: str
    peer: str
    mode: SecurityMode
    secret: bytes
    established: bool = False
    send_seq: int = 0
    window: ReplayWindow = field(default_factory=ReplayWindow)
    pending: Dict[bytes, list] = field(default_factory=dict)
    observing: set = field(default_factory=set)
    completed: deque = field(default_factory=lambda: deque(maxlen=32))

    def __post_init__(self):
        self._send = AESCCM(_hkdf(self.secret, b"key:" + self.local.encode(), KEY_LEN), tag_length=TAG_LEN)
        self._recv = AESCCM(_hkdf(self.secret, b"key:" + self.peer.encode(), KEY_LEN), tag_length=TAG_LEN)
        iv_len = 4 if self.mode is SecurityMode.HANDSHAKE else 13
        self._send_iv = _hkdf(self.secret, b"iv:" + self.local.encode(), iv_len)
        self._recv_iv = _hkdf(self.secret, b"iv:" + self.peer.encode(), iv_len)

    @classmethod
    def from_context(cls, local: str, peer: str, psk: Psk) -> "SecureChannel":
        secret = _hkdf(psk.key, b"context", 32, salt=psk.identity)
        return cls(local, peer, SecurityMode.CONTEXT, secret, established=True)

    @classmethod
    def from_handshake(cls, local: str, peer: str, psk: Psk,
                       client_random: bytes, server_random: bytes) -> "SecureChannel":
        secret = _hkdf(psk.key, b"master", 32, salt=client_random + server_random)
        return cls(local, peer, SecurityMode.HANDSHAKE, secret, established=True)

    def close(self) -> None:
        self.established = False
        self.pending.clear()
        self.observing.clear()

    def _next_seq(self) -> int:
        if self.send_seq > MAX_SEQ:
            raise ChannelClosed("sequence space exhausted")
        seq = self.send_seq
        self.send_seq += 1
        return seq

    def _context_nonce(self, iv: bytes, owner: int, piv: int) -> bytes:
        block = bytes([owner]) + bytes(4) + piv.to_bytes(8, "big")
        return bytes(a ^ b for a, b in zip(iv, block))

    def expect(self, token: bytes, observe: bool = False) -> None:
        if observe:
            self.observing.add(token)

    def forget(self, token: bytes) -> None:
        self.pending.pop(token, None)
        self.observing.discard(token)


def seal(ch: SecureChannel, plaintext: bytes, token: Optional[bytes] = None, *,
         request_seq: Optional[int] = None, notification: bool = False) -> Sealed:
    """Protect one message.

    ``token=None`` seals a request, which becomes pending until its response
    arrives. Responses pass the request token they answer (and in context mode
    the sequence number of that request); notifications set ``notification``.
    """
    if not ch.established:
        raise ChannelClosed(f"channel {ch.local}->{ch.peer} is not established")
    binding = token or b""
    if ch.mode is SecurityMode.HANDSHAKE:
        seq = ch._next_seq()
        explicit = struct.pack(">H", 1) + seq.to_bytes(6, "big")
        length = EXPLICIT_NONCE_LEN + len(plaintext) + TAG_LEN
        header = b"\x17\xfe\xfd" + explicit + struct.pack(">H", length)
        ct = ch._send.encrypt(ch._send_iv + explicit, plaintext, header + binding)
        return Sealed(FRAME_RECORD, header + explicit + ct), seq
    if token is not None and not notification:
        if request_seq is None:
            raise ValueError("context-mode responses need the request sequence number")
        nonce = ch._context_nonce(ch._send_iv, 2, request_seq)
        aad = binding + request_seq.to_bytes(CONTEXT_PIV_LEN, "big")
        return Sealed(FRAME_CONTEXT_RESPONSE, ch._send.encrypt(nonce, plaintext, aad)), None
    seq = ch._next_seq()
    if seq >= 1 << (8 * CONTEXT_PIV_LEN):
        raise ChannelClosed("sequence space exhausted")
    header = bytes([CONTEXT_PIV_LEN]) + seq.to_bytes(CONTEXT_PIV_LEN, "big")
    nonce = ch._context_nonce(ch._send_iv, 1, seq)
    return Sealed(FRAME_CONTEXT, header + ch._send.encrypt(nonce, plaintext, header + binding)), seq


def seal_request(ch: SecureChannel, plaintext: bytes, token: bytes) -> Sealed:
    """Seal a request and remember it so the response can be bound to it."""
    sealed, seq = seal(ch, plaintext)
    ch.pending.setdefault(token, []).append(seq)
    return sealed


def seal_response(ch: SecureChannel, plaintext: bytes, token: bytes,
                  request_seq: Optional[int] = None, notification: bool = False) -> Sealed:
    return seal(ch, plaintext, token, request_seq=request_seq, notification=notification)[0]


def _try(aead: AESCCM, nonce: bytes, data: bytes, aad: bytes) -> Optional[bytes]:
    try:
        return aead.decrypt(nonce, data, aad)
    except InvalidTag:
        return None


def open_record(ch: SecureChannel, frame: int, data: bytes) -> Opened:
    """Authenticate, replay-check and decrypt one record."""
    if not ch.established:
        raise ChannelClosed(f"channel {ch.local}<-{ch.peer} is not established")
    if frame == FRAME_RECORD:
        if ch.mode is not SecurityMode.HANDSHAKE:
            raise AuthFailed("record style does not match channel mode")
        if len(data) < RECORD_HEADER_LEN + EXPLICIT_NONCE_LEN + TAG_LEN:
            raise AuthFailed("record too short")
        header, explicit, ct = data[:13], data[13:21], data[21:]
        if header[:3] != b"\x17\xfe\xfd" or header[3:11] != explicit:
            raise AuthFailed("bad record header")
        if struct.unpack(">H", header[11:13])[0] != len(data) - RECORD_HEADER_LEN:
            raise AuthFailed("record length mismatch")
        seq = int.from_bytes(explicit[2:], "big")
        nonce = ch._recv_iv + explicit
        return _finish(ch, seq, lambda binding: _try(ch._recv, nonce, ct, header + binding))
    if ch.mode is not SecurityMode.CONTEXT:
        raise AuthFailed("record style does not match channel mode")
    if frame == FRAME_CONTEXT:
        if len(data) < CONTEXT_HEADER_LEN + TAG_LEN or data[0] != CONTEXT_PIV_LEN:
            raise AuthFailed("bad context header")
        header, ct = data[:CONTEXT_HEADER_LEN], data[CONTEXT_HEADER_LEN:]
        seq = int.from_bytes(header[1:], "big")
        nonce = ch._context_nonce(ch._recv_iv, 1, seq)
        return _finish(ch, seq, lambda binding: _try(ch._recv, nonce, ct, header + binding))
    if frame == FRAME_CONTEXT_RESPONSE:
        if len(data) < TAG_LEN:
            raise AuthFailed("record too short")
        candidates = [(t, s, False) for t, seqs in ch.pending.items() for s in seqs]
        candidates += [(t, s, True) for t, s in ch.completed if s is not None]
        for token, req_seq, stale in candidates:
            nonce = ch._context_nonce(ch._recv_iv, 2, req_seq)
            pt = _try(ch._recv, nonce, data, token + req_seq.to_bytes(CONTEXT_PIV_LEN, "big"))
            if pt is not None:
                if stale:
                    raise ReplayDetected("response for an already answered request")
                _complete(ch, token, req_seq)
                return Opened(pt, None, token)
        raise AuthFailed("no outstanding request matches this response")
    raise AuthFailed(f"unknown record frame {frame}")


def _complete(ch: SecureChannel, token: bytes, seq: Optional[int]) -> None:
    for s in ch.pending.pop(token, []):
        ch.completed.append((token, s))
    if seq is not None and (token, seq) not in ch.completed:
        ch.completed.append((token, seq))


def _finish(ch: SecureChannel, seq: int, attempt) -> Opened:
    pt = attempt(b"")
    token = None
    if pt is None:
        live = list(ch.pending) + sorted(ch.observing - set(ch.pending))
        stale = [t for t, _ in ch.completed if t not in ch.pending and t not in ch.observing]
        for candidate in live + stale:
            pt = attempt(candidate)
            if pt is not None:
                token = candidate
                break
        if pt is None:
            raise AuthFailed("record failed authentication")
        if token in stale:
            raise ReplayDetected("response for an already answered request")
    if ch.window.seen(seq):
        raise ReplayDetected(f"sequence number {seq} already received")
    ch.window.mark(seq)
    if token is not None and token not in ch.observing:
        _complete(ch, token, None)
    return Opened(pt, seq, token)


# cookies

class CookieJar:
    """Stateless cookie minting bound to the source address.

    Secrets rotate every ``rotation_ms``; a cookie is accepted in the epoch it
    was minted and the following one.
    """

    def __init__(self, master: Optional[bytes] = None, rotation_ms: float = COOKIE_ROTATION_MS):
        self.master = master or os.urandom(16)
        self.rotation_ms = rotation_ms

    def _secret(self, epoch: int) -> bytes:
        return _mac(self.master, b"cookie-epoch", epoch.to_bytes(8, "big", signed=True))

    def _epoch(self, now: float) -> int:
        return int(now // self.rotation_ms)

    def challenge(self, source: str, hello: bytes, now: float) -> bytes:
        return _mac(self._secret(self._epoch(now)), source.encode(), b"\x00", hello)[:COOKIE_LEN]

    def verify(self, cookie: bytes, source: str, hello: bytes, now: float) -> bool:
        epoch = self._epoch(now)
        for e in (epoch, epoch - 1):
            expected = _mac(self._secret(e), source.encode(), b"\x00", hello)[:COOKIE_LEN]
            if hmac.compare_digest(expected, cookie):
                return True
        return False


# handshake messages

HS_CLIENT_HELLO = 1
HS_SERVER_FINISHED = 2
HS_HELLO_VERIFY = 3


@dataclass(frozen=True)
class ClientHello:
    identity: bytes
    client_random: bytes
    cookie: bytes = b""
    proof: bytes = b""

    def cookie_input(self) -> bytes:
        return bytes([len(self.identity)]) + self.identity + self.client_random

    def encode(self) -> bytes:
        return (bytes([HS_CLIENT_HELLO, len(self.identity)]) + self.identity + self.client_random
                + bytes([len(self.cookie)]) + self.cookie + bytes([len(self.proof)]) + self.proof)


def decode_handshake(data: bytes):
    try:
        kind = data[0]
        if kind == HS_CLIENT_HELLO:
            pos = 1
            n = data[pos]
            identity = data[pos + 1:pos + 1 + n]
            pos += 1 + n
            client_random = data[pos:pos + RANDOM_LEN]
            pos += RANDOM_LEN
            n = data[pos]
            cookie = data[pos + 1:pos + 1 + n]
            pos += 1 + n
            n = data[pos]
            proof = data[pos + 1:pos + 1 + n]
            pos += 1 + n
            if (pos != len(data) or len(identity) == 0 or len(client_random) != RANDOM_LEN
                    or len(cookie) not in (0, COOKIE_LEN) or len(proof) not in (0, PROOF_LEN)):
                raise Malformed("bad client hello")
            return ClientHello(bytes(identity), bytes(client_random), bytes(cookie), bytes(proof))
        if kind == HS_HELLO_VERIFY and len(data) == 1 + COOKIE_LEN:
            return ("verify", bytes(data[1:]))
        if kind == HS_SERVER_FINISHED and len(data) == 1 + RANDOM_LEN + PROOF_LEN:
            return ("finished", bytes(data[1:1 + RANDOM_LEN]), bytes(data[1 + RANDOM_LEN:]))
    except IndexError:
        pass
    raise Malformed("bad handshake message")


def _client_proof(psk: Psk, hello: ClientHello, cookie: bytes) -> bytes:
    return _mac(psk.key, b"client finished", hello.client_random, cookie)[:PROOF_LEN]


def _server_proof(psk: Psk, client_random: bytes, server_random: bytes, client_proof: bytes) -> bytes:
    return _mac(psk.key, b"server finished", client_random, server_random, client_proof)[:PROOF_LEN]


class HandshakeInitiator:
    """Requesting side of the four-flight exchange."""

    def __init__(self, local: str, peer: str, psk: Psk, client_random: bytes):
        self.local, self.peer, self.psk = local, peer, psk
        self.hello = ClientHello(psk.identity, client_random)
        self.proof = b""
        self.channel: Optional[SecureChannel] = None

    def first_flight(self) -> bytes:
        return self.hello.encode()

    def on_message(self, data: bytes) -> Optional[bytes]:
        """Feed one received flight; returns the next flight to send, if any."""
        msg = decode_handshake(data)
        if isinstance(msg, tuple) and msg[0] == "verify":
            cookie = msg[1]
            self.proof = _client_proof(self.psk, self.hello, cookie)
            self.hello = ClientHello(self.hello.identity, self.hello.client_random, cookie, self.proof)
            return self.hello.encode()
        if isinstance(msg, tuple) and msg[0] == "finished":
            _, server_random, proof = msg
            if not self.proof or not hmac.compare_digest(
                    proof, _server_proof(self.psk, self.hello.client_random, server_random, self.proof)):
                raise HandshakeFailed("server failed to prove key possession")
            self.channel = SecureChannel.from_handshake(
                self.local, self.peer, self.psk, self.hello.client_random, server_random)
            return None
        raise HandshakeFailed("unexpected handshake message")


class HandshakeListener:
    """Responding side. Allocates per-peer state only after cookie and proof verify."""

    def __init__(self, local: str, cookies: CookieJar, lookup: Callable[[bytes], Optional[Psk]],
                 random_bytes: Callable[[int], bytes], cookie_enabled: bool = True):
        self.local = local
        self.cookies = cookies
        self.lookup = lookup
        self.random_bytes = random_bytes
        self.cookie_enabled = cookie_enabled
        self.half_open: Dict[str, ClientHello] = {}
        self.channels: Dict[str, SecureChannel] = {}
        self._finished: Dict[str, tuple] = {}

    @property
    def state_count(self) -> int:
        return len(self.half_open) + len(self.channels)

    def on_hello(self, source: str, data: bytes, now: float):
        """Returns ``(reply_bytes or None, channel or None)``."""
        hello = decode_handshake(data)
        if not isinstance(hello, ClientHello):
            raise HandshakeFailed("expected a client hello")
        if not hello.cookie:
            if not self.cookie_enabled:
                # unprotected listener: remembers every hello it sees
                self.half_open[source] = hello
                cookie = b"\x00" * COOKIE_LEN
            else:
                cookie = self.cookies.challenge(source, hello.cookie_input(), now)
            return bytes([HS_HELLO_VERIFY]) + cookie, None
        if self.cookie_enabled and not self.cookies.verify(hello.cookie, source, hello.cookie_input(), now):
            raise CookieRejected(f"cookie from {source} does not verify")
        cached = self._finished.get(source)
        if cached is not None and cached[0] == hello.encode() and source in self.channels:
            # retransmitted third flight: repeat the same answer
            return cached[1], self.channels[source]
        psk = self.lookup(hello.identity)
        if psk is None:
            raise HandshakeFailed("unknown PSK identity")
        if not hmac.compare_digest(hello.proof, _client_proof(psk, hello, hello.cookie)):
            raise HandshakeFailed("client failed to prove key possession")
        self.half_open.pop(source, None)
        server_random = self.random_bytes(RANDOM_LEN)
        channel = SecureChannel.from_handshake(self.local, source, psk, hello.client_random, server_random)
        self.channels[source] = channel
        reply = bytes([HS_SERVER_FINISHED]) + server_random + _server_proof(
            psk, hello.client_random, server_random, hello.proof)
        self._finished[source] = (hello.encode(), reply)
        return reply, channel

    def drop(self, source: str) -> None:
        self.channels.pop(source, None)
        self.half_open.pop(source, None)
        self._finished.pop(source, None)
