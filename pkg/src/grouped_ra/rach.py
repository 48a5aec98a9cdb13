"""PRACH contention (slots, preambles, collisions) and the extended
access-class-barring gate used by the benchmark mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SUCCESS = "success"
COLLISION = "collision"


@dataclass(frozen=True)
class RachConfig:
    slot_length: float = 0.005   # seconds
    preambles: int = 54

    def __post_init__(self):
        if self.preambles < 1:
            raise ValueError("preambles must be >= 1")
        if self.slot_length <= 0:
            raise ValueError("slot_length must be positive")


@dataclass(frozen=True)
class EabConfig:
    barring_factor: float = 0.1
    max_backoff: float = 0.5     # seconds
    sib_period: float = 0.32     # seconds
    exempt_acs: frozenset[int] = frozenset(range(11, 16))

    def __post_init__(self):
        if not 0.0 <= self.barring_factor <= 1.0:
            raise ValueError("barring_factor must lie in [0, 1]")
        if self.max_backoff < 0:
            raise ValueError("max_backoff must be >= 0")
        if self.sib_period <= 0:
            raise ValueError("sib_period must be positive")


@dataclass
class RaAttempt:
    """One preamble transmission by a device or a group coordinator."""

    requester: int
    request_epoch: float         # when the access need arose
    attempt_epoch: float         # slot this attempt lands in
    preamble: int | None = None

    def __post_init__(self):
        if self.attempt_epoch < self.request_epoch:
            raise ValueError("attempt cannot precede its request")


def draw_preambles(count: int, config: RachConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, config.preambles, size=count)


def collide(preambles: np.ndarray, config: RachConfig) -> np.ndarray:
    """True where the drawn preamble was chosen by more than one attempt."""
    counts = np.bincount(preambles, minlength=config.preambles)
    return counts[preambles] > 1


def resolve_slot(
    attempts: list[RaAttempt], config: RachConfig, rng: np.random.Generator
) -> list[str]:
    """Draw a preamble per attempt; unique draws succeed, clashes all fail."""
    if not attempts:
        return []
    draws = draw_preambles(len(attempts), config, rng)
    collided = collide(draws, config)
    for attempt, preamble in zip(attempts, draws):
        attempt.preamble = int(preamble)
    return [COLLISION if c else SUCCESS for c in collided]


@dataclass(frozen=True)
class GateOutcome:
    passed: bool
    backoff: float = 0.0         # seconds, only meaningful when barred


def eab_gate(device_ac: int, config: EabConfig, rng: np.random.Generator) -> GateOutcome:
    """Admission check for one access need.

    Exempt classes always pass; the rest pass when a uniform draw falls
    under the barring factor, otherwise they are barred and must wait a
    uniform backoff before re-gating at the following SIB boundary.
    """
    if device_ac in config.exempt_acs:
        return GateOutcome(passed=True)
    if rng.random() < config.barring_factor:
        return GateOutcome(passed=True)
    return GateOutcome(passed=False, backoff=_uniform_backoff(config.max_backoff, rng))


def eab_gate_batch(
    acs: np.ndarray, config: EabConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised gate: (pass mask, per-entry backoff for the barred ones)."""
    acs = np.asarray(acs)
    exempt = np.isin(acs, list(config.exempt_acs))
    passed = exempt.copy()
    backoffs = np.zeros(len(acs))
    rest = np.flatnonzero(~exempt)
    if len(rest):
        draws = rng.random(len(rest))
        admitted = draws < config.barring_factor
        passed[rest[admitted]] = True
        barred = rest[~admitted]
        if len(barred):
            backoffs[barred] = config.max_backoff * (1.0 - rng.random(len(barred)))
    return passed, backoffs


def _uniform_backoff(max_backoff: float, rng: np.random.Generator) -> float:
    # uniform in (0, max_backoff]; 1 - U[0,1) keeps the interval half-open
    return max_backoff * (1.0 - float(rng.random()))


def retry_backoff(max_backoff: float, rng: np.random.Generator) -> float:
    """Delay before a collided attempt contends again."""
    return _uniform_backoff(max_backoff, rng)


def next_sib_epoch(now: float, config: EabConfig) -> float:
    """Smallest SIB broadcast epoch strictly after `now`."""
    if now < 0:
        raise ValueError("now must be >= 0")
    k = math.floor(now / config.sib_period) + 1
    while k * config.sib_period <= now:
        k += 1
    return k * config.sib_period
