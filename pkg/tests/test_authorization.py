import json

import pytest
from hypothesis import given, settings, strategies as st

from lwm2m_c2c import cbor, coap
from lwm2m_c2c.acl import AccessFlags as F, ClientAclInstance
from lwm2m_c2c.authorization import (
    AccessItem,
    AccessRequest,
    OwnerServerHints,
    PeerInfo,
    PolicyTable,
    decode_access_request,
    encode_access_request,
    hints_for,
    plan_access_request,
    validate_hints,
)
from lwm2m_c2c.coap import Code, Kind, Option
from lwm2m_c2c.errors import Malformed, MissingEp, NoTrustedServer, PolicyRefused
from lwm2m_c2c.model import GENERIC_SENSOR, LIGHT_CONTROL, Path
from lwm2m_c2c.objects import uri_address
from lwm2m_c2c.scenario import SENSOR_VALUE, ScenarioConfig, build_world, provisioning_operations
from lwm2m_c2c.security import AccountStore, Psk, SecurityMode, ServerAccount
from lwm2m_c2c.threats import register_both, run

from conftest import golden_fields


# hints

def test_hints_round_trip():
    hints = OwnerServerHints(("coaps://a", "coaps://b"))
    assert OwnerServerHints.decode(hints.encode()) == hints


@pytest.mark.parametrize("payload", [cbor.dumps([]), cbor.dumps("coaps://a"), cbor.dumps([1]), b"\xff"])
def test_bad_hints(payload):
    with pytest.raises(Malformed):
        OwnerServerHints.decode(payload)


def _accounts(*registered):
    store = AccountStore()
    for sid, (uri, reg) in enumerate(registered, start=1):
        account = store.add_server(ServerAccount(sid, uri, Psk(b"id", bytes(16))))
        account.registered = reg
    return store


def test_validate_picks_first_registered():
    store = _accounts(("coaps://a", False), ("coaps://b", True))
    assert validate_hints(store, OwnerServerHints(("coaps://x", "coaps://a", "coaps://b"))).uri == "coaps://b"


def test_validate_rejects_strangers():
    with pytest.raises(NoTrustedServer):
        validate_hints(_accounts(("coaps://a", True)), OwnerServerHints(("coaps://rogue",)))


def test_hints_follow_object_owner_only(world):
    """An instance-level ACL owner is never revealed; the object-level one is."""
    host = world.host
    host.accounts.add_server(ServerAccount(2, "coaps://second", Psk(b"s2", bytes(16))))
    host.acl.add(ClientAclInstance(0, LIGHT_CONTROL, 0, {7: F.READ}, 2))
    assert hints_for(host, Path(LIGHT_CONTROL, 0)).server_uris == (world.server.uri,)
    host.acl.add(ClientAclInstance(1, LIGHT_CONTROL, None, {7: F.READ}, 2))
    assert hints_for(host, Path(LIGHT_CONTROL, 0)).server_uris == ("coaps://second", world.server.uri)


# access request wire format

@pytest.mark.parametrize("golden, access", [
    ("ac_read_3311_0.txt", AccessRequest("host", True, (AccessItem(3311, 0, F.READ),))),
    ("ac_rw_3300_nocred.txt", AccessRequest("sensor-7", False, (AccessItem(3300, None, F.READ | F.WRITE),))),
])
def test_access_request_golden(golden, access):
    fields = golden_fields(golden)
    uri_path, query, payload = encode_access_request(access)
    assert uri_path == fields["uri_path"]
    assert query == fields["uri_query"]
    assert payload == bytes.fromhex(fields["payload"][0])
    mid = int(fields["message"][0].split()[2] + fields["message"][0].split()[3], 16)
    msg = coap.Message(Kind.CON, Code.POST, mid, b"",
                       [(Option.URI_PATH, p.encode()) for p in uri_path]
                       + [(Option.URI_QUERY, q.encode()) for q in query], payload)
    assert coap.encode(msg) == bytes.fromhex(fields["message"][0])
    assert decode_access_request(uri_path, query, payload) == access


@pytest.mark.parametrize("path, query, payload, error", [
    (["ac"], [], cbor.dumps([{1: 3300, 3: 1}]), MissingEp),
    (["ac"], ["ep="], cbor.dumps([{1: 3300, 3: 1}]), MissingEp),
    (["rd"], ["ep=h"], cbor.dumps([{1: 3300, 3: 1}]), Malformed),
    (["ac"], ["ep=h", "x=1"], cbor.dumps([{1: 3300, 3: 1}]), Malformed),
    (["ac"], ["ep=h", "c=1"], cbor.dumps([{1: 3300, 3: 1}]), Malformed),
    (["ac"], ["ep=h"], cbor.dumps([]), Malformed),
    (["ac"], ["ep=h"], cbor.dumps([{1: 3300}]), Malformed),
    (["ac"], ["ep=h"], cbor.dumps([{1: 3300, 3: 0x40}]), Malformed),
    (["ac"], ["ep=h"], cbor.dumps([{1: 3300, 2: 0, 3: 16}]), Malformed),    # create on an instance
    (["ac"], ["ep=h"], cbor.dumps([{1: 3300, 3: 1, 9: 0}]), Malformed),
    (["ac"], ["ep=h"], cbor.dumps([{1: True, 3: 1}]), Malformed),
])
def test_access_request_rejects(path, query, payload, error):
    with pytest.raises(error):
        decode_access_request(path, query, payload)


@settings(max_examples=300)
@given(st.text(min_size=1, max_size=30).filter(lambda s: "\x00" not in s), st.booleans(),
       st.lists(st.integers(0, 0xFFFF).flatmap(lambda o: st.tuples(st.just(o), st.none() | st.integers(0, 9),
                                                                   st.integers(1, 0x3F))), min_size=1, max_size=4))
def test_access_request_round_trip(endpoint, creds, raw_items):
    built = []
    for o, i, f in raw_items:
        flags = F(f) if i is None else F(f) & ~F.CREATE
        if flags:
            built.append(AccessItem(o, i, flags))
    if not built:
        return
    req = AccessRequest(endpoint, creds, tuple(built))
    assert decode_access_request(*encode_access_request(req)) == req


# policy and plans

REQ = PeerInfo("req", "requester", "coaps://requester", 2)
HOST = PeerInfo("host", "host", "coaps://host", 1)


def _plan(mode, items=(AccessItem(3311, 0, F.READ),), creds=True, keys=None):
    policy = PolicyTable({("req", "host", 3311): F.READ | F.WRITE})
    keys = keys if keys is not None else iter(bytes([i]) * 16 for i in range(100))
    return plan_access_request(1, REQ, HOST, AccessRequest("host", creds, items), policy, mode,
                               lambda: next(keys))


@pytest.mark.parametrize("mode, names", [
    (SecurityMode.HANDSHAKE, ["client", "client-security", "client-acl-0", "peer-security"]),
    (SecurityMode.CONTEXT, ["client", "oscore", "client-security", "client-acl-0", "peer-security"]),
])
def test_plan_steps(mode, names):
    assert [s.name for s in _plan(mode).steps] == names


def test_plan_without_credentials_only_touches_host():
    plan = _plan(SecurityMode.HANDSHAKE, creds=False)
    assert [s.name for s in plan.steps] == ["client", "client-acl-0"]


@pytest.mark.parametrize("flags", [F.DELETE, F.READ | F.EXECUTE])
def test_policy_refusal_draws_no_key(flags):
    drawn = []

    def key():
        drawn.append(1)
        return bytes(16)

    with pytest.raises(PolicyRefused):
        plan_access_request(1, REQ, HOST, AccessRequest("host", True, (AccessItem(3311, 0, flags),)),
                            PolicyTable({("req", "host", 3311): F.READ | F.WRITE}), SecurityMode.HANDSHAKE, key)
    assert drawn == []


def test_policy_rows():
    table = PolicyTable.from_rows([{"requester": "r", "host": "h", "object": 3300, "flags": "read|write"}])
    assert table.limit("r", "h", 3300) == F.READ | F.WRITE
    assert table.limit("h", "r", 3300) == F.NONE


# the full flow over the simulated network

def _state(node) -> str:
    return json.dumps(node.dump(), sort_keys=True, default=str)


@pytest.mark.parametrize("mode, operations", [("handshake", 5), ("context", 6)])
def test_end_to_end_from_zero_knowledge(mode, operations):
    world = build_world(ScenarioConfig(seed=3, mode=mode))
    world.host.tree.set(SENSOR_VALUE, b"hello")
    run(world, register_both(world))
    assert world.requester.accounts.clients == {}
    resp = run(world, world.requester.access(world.host.name, world.host.endpoint, SENSOR_VALUE, F.READ))
    assert (resp.code, resp.payload) == (Code.CONTENT, b"hello")
    assert provisioning_operations(world) == operations
    assert all(code == "2.01" for *_, code in world.server.provision_log)
    secure_reads = [r for r in world.requester.stats.requests if r[3] == "/3300/0/5700" and r[4]]
    assert len(secure_reads) == 1


def test_policy_refusal_leaves_both_peers_untouched(world):
    before = _state(world.host), _state(world.requester)
    with pytest.raises(PolicyRefused):
        run(world, world.requester.access(world.host.name, world.host.endpoint, SENSOR_VALUE.instance(),
                                          F.WRITE))
    assert (_state(world.host), _state(world.requester)) == before
    assert world.server.provision_log == [] and world.server.issued_keys == set()


def test_unknown_target_endpoint(world):
    path, query, payload = encode_access_request(
        AccessRequest("nobody", True, (AccessItem(GENERIC_SENSOR, 0, F.READ),)))
    msg = coap.request(Code.POST, path, query=query, payload=payload)
    resp = run(world, _wait(world.requester.request(uri_address(world.server.uri), msg)))
    assert resp.code is Code.NOT_FOUND


def _wait(fut):
    return (yield fut)


def test_concurrent_duplicates_coalesced(world):
    path, query, payload = encode_access_request(
        AccessRequest(world.host.endpoint, True, (AccessItem(GENERIC_SENSOR, 0, F.READ),)))
    addr = uri_address(world.server.uri)
    futs = [world.requester.request(addr, coap.request(Code.POST, path, query=query, payload=payload))
            for _ in range(2)]

    def both():
        answers = []
        for f in futs:
            answers.append((yield f))
        return answers

    answers = run(world, both())
    assert [a.code for a in answers] == [Code.CREATED, Code.CREATED]
    assert len(world.server.provision_log) == 4
    assert len(world.server.issued_keys) == 1


def test_fresh_key_per_grant():
    keys = set()
    for seed in range(8):
        world = build_world(ScenarioConfig(seed=seed))
        run(world, register_both(world))
        run(world, world.requester.access(world.host.name, world.host.endpoint, SENSOR_VALUE.instance(), F.READ))
        (key,) = world.server.issued_keys
        keys.add(key)
    assert len(keys) == 8


def test_server_never_repeats_a_key(world):
    issued = [world.server.new_key() for _ in range(500)]
    assert len(set(issued)) == 500
