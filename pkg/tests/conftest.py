import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from bluepatch.core import Session
from bluepatch.sim.controller import Air, Controller
from bluepatch.sim.profile import load_profile

settings.register_profile(
    "bluepatch", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "bluepatch"))

DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"

ATTACKER_MAC = "00:1a:7d:da:71:0a"
VICTIM_MAC = "de:ad:be:ef:00:00"


def read_hex(name: str) -> bytes:
    """Hex-dump fixture: whitespace separated bytes, '#' starts a comment."""
    text = (DATA / name).read_text()
    digits = "".join(line.split("#", 1)[0] for line in text.splitlines())
    return bytes.fromhex("".join(digits.split()))


@pytest.fixture
def air():
    return Air()


@pytest.fixture
def pair(air):
    """Attacker session plus a vulnerable victim chip on the same air."""
    victim = Controller(load_profile("bcm4339"), VICTIM_MAC, air)
    session = Session.simulated("bcm4339", ATTACKER_MAC, air)
    yield session, victim
    session.close()


@pytest.fixture
def linked(pair):
    session, victim = pair
    conn = session.connect(VICTIM_MAC)
    return session, victim, conn.handle


@pytest.fixture
def session():
    s = Session.simulated("bcm4339")
    yield s
    s.close()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
