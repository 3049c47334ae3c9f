from pathlib import Path as FsPath

import pytest

from lwm2m_c2c.scenario import ScenarioConfig, build_world
from lwm2m_c2c.threats import register_both, run

GOLDEN = FsPath(__file__).parent / "golden"


def golden_hex(name: str) -> bytes:
    return bytes.fromhex((GOLDEN / name).read_text())


def golden_fields(name: str) -> dict:
    fields: dict = {}
    for line in (GOLDEN / name).read_text().splitlines():
        key, _, value = line.partition(": ")
        fields.setdefault(key, []).append(value)
    return fields


@pytest.fixture
def world():
    """host, requester and server, both clients registered, nothing provisioned."""
    w = build_world(ScenarioConfig(seed=11))
    run(w, register_both(w))
    return w


@pytest.fixture
def context_world():
    w = build_world(ScenarioConfig(seed=11, mode="context"))
    run(w, register_both(w))
    return w


# acceptance criteria report: one PASS/FAIL line each, repeated in the terminal summary
ACCEPTANCE: dict = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[criterion])
