import json

import pytest

from lwm2m_c2c.errors import UnknownNode
from lwm2m_c2c.ownership import replay_create_ownership
from lwm2m_c2c.threats import (
    check_cookie_flood,
    check_hint_indistinguishability,
    check_lifetime_expiry,
    check_rogue_hints,
    run_threat_checks,
)

from conftest import GOLDEN


def test_all_checks_pass_by_default():
    results = run_threat_checks(seed=0)
    assert [r.threat for r in results] == ["T0", "T1", "T2", "T3"]
    assert all(r.passed for r in results), [r.line() for r in results]


@pytest.mark.parametrize("seed", [1, 2])
def test_checks_hold_across_seeds(seed):
    assert check_hint_indistinguishability(seed).passed
    assert check_rogue_hints(seed).passed


def test_cookie_control_fails_without_cookies():
    result = check_cookie_flood(cookie_enabled=False, hellos=50)
    assert not result.passed and "50 per-peer states" in result.detail


def test_lifetime_control_fails_without_enforcement():
    assert not check_lifetime_expiry(enforce_lifetime=False).passed


def test_result_line_format():
    line = check_cookie_flood(hellos=10).line()
    assert line.startswith("T1 PASS")


# create-ownership replay

def test_ownership_replay_matches_golden():
    replay = replay_create_ownership()
    assert replay.response.code.dotted == "2.01"
    dump = replay.node("c1").dump()
    expected = json.loads((GOLDEN / "ownership_c1_acl.json").read_text())
    got = {k: dump[k] for k in expected}
    assert got == expected


def test_creator_is_not_owner():
    dump = replay_create_ownership().node("c1").dump()
    owners = {row["owner"] for row in dump["client_access_control"] if row["instance_ref"] == 1}
    assert owners == {1}


def test_fresh_node_has_empty_acl_section():
    dump = replay_create_ownership().node("c3").dump()
    assert dump["access_control"] == [] and dump["client_access_control"] == []


def test_unknown_node():
    with pytest.raises(UnknownNode):
        replay_create_ownership().node("c9")
