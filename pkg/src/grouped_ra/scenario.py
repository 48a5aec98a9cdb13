"""Device population for a single square cell: positions, access classes,
traffic modes and low-speed random-walk mobility.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ACCESS_CLASSES = 16
ULL_CLASSES = frozenset(range(11, 16))

APERIODIC = "aperiodic"
PERIODIC = "periodic"


class ConfigurationError(ValueError):
    """Raised when a configuration violates one of its invariants."""


@dataclass(frozen=True)
class Position:
    x: float
    y: float


@dataclass(frozen=True)
class TrafficMode:
    kind: str                      # APERIODIC or PERIODIC
    period: float | None = None    # seconds, periodic only
    aperiodic_rate: float | None = None  # arrivals/second, aperiodic only
    payload: int = 64              # bytes per uplink report

    def __post_init__(self):
        if self.kind == PERIODIC and (self.period is None or self.period <= 0):
            raise ConfigurationError("periodic traffic needs a positive period")
        if self.kind == APERIODIC and (self.aperiodic_rate is None or self.aperiodic_rate < 0):
            raise ConfigurationError("aperiodic traffic needs a nonnegative rate")


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    access_class: int
    traffic: TrafficMode
    mobile: bool
    position: Position

    @property
    def ull(self) -> bool:
        return self.access_class in ULL_CLASSES


@dataclass(frozen=True)
class ScenarioConfig:
    """Population parameters; defaults follow the evaluation scenario."""

    area_side: float = 200.0
    device_count: int = 10000
    traffic_mix: tuple[float, float, float] = (0.5, 0.25, 0.25)  # aperiodic, 1 s, 10 s
    mobile_fraction: float = 0.5
    speed_variance: float = 2.0    # m^2/s^2, total over both axes
    aperiodic_rate: float = 0.1    # arrivals/second
    payload_bytes: int = 64
    synchronized: bool = False     # align all periodic phases to zero
    rng_seed: int = 0

    def __post_init__(self):
        if self.device_count < 1:
            raise ConfigurationError("device_count must be >= 1")
        if self.area_side <= 0:
            raise ConfigurationError("area_side must be positive")
        if len(self.traffic_mix) != 3 or any(f < 0 or f > 1 for f in self.traffic_mix):
            raise ConfigurationError("traffic_mix must be three fractions in [0, 1]")
        if abs(sum(self.traffic_mix) - 1.0) > 1e-9:
            raise ConfigurationError("traffic_mix fractions must sum to 1")
        if not 0.0 <= self.mobile_fraction <= 1.0:
            raise ConfigurationError("mobile_fraction must lie in [0, 1]")
        if self.speed_variance < 0 or self.aperiodic_rate < 0:
            raise ConfigurationError("speed_variance and aperiodic_rate must be >= 0")
        if self.payload_bytes < 1:
            raise ConfigurationError("payload_bytes must be >= 1")


def build_scenario(config: ScenarioConfig, rng: np.random.Generator) -> list[DeviceProfile]:
    """Draw the device population; AC, traffic and mobility are independent."""
    n = config.device_count
    xy = rng.uniform(0.0, config.area_side, size=(n, 2))
    acs = rng.integers(0, ACCESS_CLASSES, size=n)
    mode_idx = rng.choice(3, size=n, p=list(config.traffic_mix))
    mobile = rng.random(n) < config.mobile_fraction

    modes = (
        TrafficMode(APERIODIC, aperiodic_rate=config.aperiodic_rate, payload=config.payload_bytes),
        TrafficMode(PERIODIC, period=1.0, payload=config.payload_bytes),
        TrafficMode(PERIODIC, period=10.0, payload=config.payload_bytes),
    )
    return [
        DeviceProfile(
            id=i,
            access_class=int(acs[i]),
            traffic=modes[mode_idx[i]],
            mobile=bool(mobile[i]),
            position=Position(float(xy[i, 0]), float(xy[i, 1])),
        )
        for i in range(n)
    ]


def positions_array(devices: list[DeviceProfile]) -> np.ndarray:
    """(N, 2) float array of positions, row index == device id."""
    out = np.empty((len(devices), 2))
    for dev in devices:
        out[dev.id] = (dev.position.x, dev.position.y)
    return out


def reflect(coords: np.ndarray, side: float) -> np.ndarray:
    """Fold coordinates back into [0, side] by reflection at the borders."""
    period = 2.0 * side
    folded = np.mod(coords, period)
    return np.where(folded > side, period - folded, folded)


def step_mobility_array(
    positions: np.ndarray,
    mobile_mask: np.ndarray,
    config: ScenarioConfig,
    dt: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian random-walk step for mobile rows, reflected at the borders.

    Per-axis displacement variance is (speed_variance / 2) * dt^2 so the
    speed vector has total variance speed_variance.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_mobile = int(np.count_nonzero(mobile_mask))
    new = positions.copy()
    if n_mobile == 0:
        return new
    sigma = np.sqrt(config.speed_variance / 2.0) * dt
    steps = rng.normal(0.0, sigma, size=(n_mobile, 2))
    new[mobile_mask] = reflect(positions[mobile_mask] + steps, config.area_side)
    return new


def step_mobility(
    devices: list[DeviceProfile],
    config: ScenarioConfig,
    dt: float,
    rng: np.random.Generator,
) -> list[DeviceProfile]:
    """Profile-level wrapper around `step_mobility_array`."""
    pos = positions_array(devices)
    mask = np.array([d.mobile for d in devices])
    new = step_mobility_array(pos, mask, config, dt, rng)
    return [
        replace(d, position=Position(float(new[d.id, 0]), float(new[d.id, 1])))
        for d in devices
    ]


def draw_arrivals(
    device: DeviceProfile,
    horizon: float,
    rng: np.random.Generator,
    synchronized: bool = False,
) -> np.ndarray:
    """Uplink-need epochs in [0, horizon) for one device.

    Periodic devices report at phase + k * period with the phase drawn once
    uniformly in [0, period); synchronized mode pins every phase to zero.
    Aperiodic devices follow a Poisson process at their configured rate.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    mode = device.traffic
    if mode.kind == PERIODIC:
        phase = 0.0 if synchronized else float(rng.uniform(0.0, mode.period))
        return np.arange(phase, horizon, mode.period)
    count = rng.poisson(mode.aperiodic_rate * horizon)
    return np.sort(rng.uniform(0.0, horizon, size=count))
