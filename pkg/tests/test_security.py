import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lwm2m_c2c.errors import AuthFailed, ChannelClosed, ReplayDetected
from lwm2m_c2c.security import (
    CONTEXT_REQUEST_OVERHEAD,
    CONTEXT_RESPONSE_OVERHEAD,
    HANDSHAKE_OVERHEAD,
    AccountStore,
    ClientAccount,
    CookieJar,
    HandshakeInitiator,
    HandshakeListener,
    Psk,
    ReplayWindow,
    SecureChannel,
    SecurityMode,
    expire_accounts,
    open_record,
    seal,
    seal_request,
    seal_response,
)

PSK = Psk(b"req@host", bytes(range(16)))
TOKEN = b"\x00\x00\x00\x2a"


def handshake_pair():
    cr, sr = b"c" * 16, b"s" * 16
    return (SecureChannel.from_handshake("req", "host", PSK, cr, sr),
            SecureChannel.from_handshake("host", "req", PSK, cr, sr))


def context_pair():
    return SecureChannel.from_context("req", "host", PSK), SecureChannel.from_context("host", "req", PSK)


@pytest.fixture(params=["handshake", "context"])
def pair(request):
    return handshake_pair() if request.param == "handshake" else context_pair()


def test_psk_key_length():
    with pytest.raises(ValueError):
        Psk(b"id", b"short")


def test_request_response_round_trip(pair):
    a, b = pair
    sealed = seal_request(a, b"GET /3300/0", TOKEN)
    opened = open_record(b, *sealed)
    assert opened.plaintext == b"GET /3300/0"
    resp = seal_response(b, b"2.05 content", TOKEN, opened.seq)
    back = open_record(a, *resp)
    assert (back.plaintext, back.token) == (b"2.05 content", TOKEN)


def test_replayed_request_refused(pair):
    a, b = pair
    sealed = seal_request(a, b"x", TOKEN)
    open_record(b, *sealed)
    with pytest.raises(ReplayDetected):
        open_record(b, *sealed)


def test_replayed_response_refused(pair):
    a, b = pair
    opened = open_record(b, *seal_request(a, b"x", TOKEN))
    resp = seal_response(b, b"y", TOKEN, opened.seq)
    open_record(a, *resp)
    with pytest.raises(ReplayDetected):
        open_record(a, *resp)


def test_response_bound_to_token(pair):
    a, b = pair
    opened = open_record(b, *seal_request(a, b"x", TOKEN))
    forged = seal_response(b, b"y", b"\xff\xff\xff\xff", opened.seq)
    with pytest.raises(AuthFailed):
        open_record(a, *forged)


def test_cross_channel_record_refused():
    a, _ = handshake_pair()
    _, other = context_pair()
    with pytest.raises(AuthFailed):
        open_record(other, *seal_request(a, b"x", TOKEN))


def test_closed_channel_refuses(pair):
    a, b = pair
    b.close()
    with pytest.raises(ChannelClosed):
        open_record(b, *seal_request(a, b"x", TOKEN))
    with pytest.raises(ChannelClosed):
        seal(b, b"x")


def test_notifications_after_response(pair):
    a, b = pair
    a.expect(TOKEN, observe=True)
    opened = open_record(b, *seal_request(a, b"observe", TOKEN))
    open_record(a, *seal_response(b, b"first", TOKEN, opened.seq))
    seqs = []
    for i in range(3):
        n = open_record(a, *seal_response(b, f"n{i}".encode(), TOKEN, notification=True))
        assert n.token == TOKEN
        seqs.append(n.seq)
    assert seqs == sorted(seqs)


@pytest.mark.parametrize("mode, request_overhead, response_overhead", [
    ("handshake", 29, 29),
    ("context", 14, 8),
])
def test_record_overheads(mode, request_overhead, response_overhead):
    a, b = handshake_pair() if mode == "handshake" else context_pair()
    req = seal_request(a, bytes(20), TOKEN)
    opened = open_record(b, *req)
    resp = seal_response(b, bytes(20), TOKEN, opened.seq)
    assert (len(req.data) - 20, len(resp.data) - 20) == (request_overhead, response_overhead)


def test_overhead_deltas():
    assert HANDSHAKE_OVERHEAD - CONTEXT_REQUEST_OVERHEAD == 15
    assert HANDSHAKE_OVERHEAD - CONTEXT_RESPONSE_OVERHEAD == 21


@settings(max_examples=100)
@given(st.binary(max_size=300))
def test_seal_open_inverse(payload):
    a, b = context_pair()
    assert open_record(b, *seal_request(a, payload, TOKEN)).plaintext == payload


# replay window

def test_window_accepts_out_of_order_once():
    w = ReplayWindow(64)
    for seq in (5, 3, 4, 70):
        assert not w.seen(seq)
        w.mark(seq)
    assert w.seen(3) and w.seen(70)
    assert w.seen(6)        # 70 - 6 = 64, outside the window
    assert not w.seen(7)


@given(st.lists(st.integers(0, 200), max_size=60))
def test_window_never_accepts_twice(seqs):
    w, accepted = ReplayWindow(), []
    for s in seqs:
        if not w.seen(s):
            w.mark(s)
            accepted.append(s)
    assert len(accepted) == len(set(accepted))


# cookies and the handshake

def test_cookie_bound_to_source():
    jar = CookieJar(b"k" * 16)
    cookie = jar.challenge("10.0.0.1", b"hello", 0.0)
    assert jar.verify(cookie, "10.0.0.1", b"hello", 1000.0)
    assert not jar.verify(cookie, "10.0.0.2", b"hello", 1000.0)


@pytest.mark.parametrize("later, accepted", [(59_000.0, True), (119_000.0, True), (121_000.0, False)])
def test_cookie_rotation(later, accepted):
    jar = CookieJar(b"k" * 16, rotation_ms=60_000.0)
    cookie = jar.challenge("a", b"h", 1_000.0)
    assert jar.verify(cookie, "a", b"h", later) is accepted


def _listener(cookie_enabled=True):
    rng = np.random.default_rng(0)
    return HandshakeListener("host", CookieJar(b"k" * 16), {PSK.identity: PSK}.get, rng.bytes, cookie_enabled)


def test_full_handshake_yields_matching_channels():
    listener = _listener()
    init = HandshakeInitiator("req", "host", PSK, b"r" * 16)
    verify, ch = listener.on_hello("req", init.first_flight(), 0.0)
    assert ch is None and listener.state_count == 0
    third = init.on_message(verify)
    finished, host_ch = listener.on_hello("req", third, 0.0)
    assert init.on_message(finished) is None
    a, b = init.channel, host_ch
    assert open_record(b, *seal_request(a, b"hi", TOKEN)).plaintext == b"hi"
    # a retransmitted third flight gets the same answer and no new session
    again, same = listener.on_hello("req", third, 0.0)
    assert again == finished and same is host_ch


def test_flood_without_cookie_keeps_no_state():
    listener = _listener()
    for i in range(100):
        init = HandshakeInitiator(f"spoof{i}", "host", PSK, bytes([i]) * 16)
        listener.on_hello(f"spoof{i}", init.first_flight(), 0.0)
    assert listener.state_count == 0


def test_flood_with_cookie_disabled_grows_state():
    listener = _listener(cookie_enabled=False)
    for i in range(10):
        listener.on_hello(f"spoof{i}", HandshakeInitiator("x", "host", PSK, bytes([i]) * 16).first_flight(), 0.0)
    assert listener.state_count == 10


# accounts and lifetime

@pytest.mark.parametrize("lifetime, now_s, expired", [
    (30, 31, True),
    (30, 29, False),
    (0, 1e6, False),
])
def test_expiry(lifetime, now_s, expired):
    store = AccountStore()
    store.add_client(ClientAccount(3, "req", lifetime_s=lifetime, created_at=0.0))
    closed = []
    ids = expire_accounts(store, now_s * 1000.0, on_expire=closed.append)
    assert (ids == [3]) is expired
    assert len(closed) == int(expired)
    assert store.clients[3].expired is expired


def test_refresh_moves_deadline():
    account = ClientAccount(3, "req", lifetime_s=30, created_at=0.0)
    account.refresh(20_000.0)
    assert not account.is_due(31_000.0)
    assert account.is_due(50_000.0)


def test_expiry_reported_once():
    store = AccountStore()
    store.add_client(ClientAccount(3, "req", lifetime_s=1))
    assert expire_accounts(store, 5000.0) == [3]
    assert expire_accounts(store, 6000.0) == []


def test_mode_enum_values():
    assert {m.value for m in SecurityMode} == {"handshake", "context"}
