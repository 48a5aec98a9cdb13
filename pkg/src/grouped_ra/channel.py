"""Link-level models: log-distance path loss, SNR, packet error rate and
CSI estimation error for both macro (device-BS) and short-range D2D links.

Shadowing and CSI estimation errors are frozen per link: each unordered
device pair maps to a fixed draw through a counter-based hash, so losses are
reproducible and reciprocal no matter in which order links are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)

# hash salts for the independent per-pair draws
_SALT_SHADOWING = _U64(0x5348414457)
_SALT_EST_ERROR = _U64(0x455354)


@dataclass(frozen=True)
class PathLossModel:
    """Log-distance path loss with per-link log-normal shadowing."""

    pl0: float = 40.0          # dB at the reference distance
    d0: float = 1.0            # reference distance, meters
    exponent: float = 3.0
    shadowing_sigma: float = 4.0  # dB

    def __post_init__(self):
        if self.exponent < 2.0:
            raise ValueError(f"path loss exponent must be >= 2, got {self.exponent}")
        if self.shadowing_sigma < 0.0:
            raise ValueError("shadowing sigma must be >= 0")
        if self.d0 <= 0.0:
            raise ValueError("reference distance must be positive")


@dataclass(frozen=True)
class LinkBudget:
    """Transmit side gain and receiver noise floor, both in dBm."""

    tx_gain: float = 20.0
    noise_floor: float = -90.0

    def __post_init__(self):
        if self.tx_gain <= self.noise_floor:
            raise ValueError("tx_gain must exceed the noise floor")


@dataclass(frozen=True)
class CsiRecord:
    """True vs estimated loss of one link, with the injected error scale."""

    true_loss: float
    estimated_loss: float
    mae: float


@dataclass(frozen=True)
class D2dSlotBudget:
    """Radio resources available per aggregation/distribution slot."""

    slot_duration: float       # seconds available to serve the whole group
    packet_airtime: float = 0.0006  # seconds per transmission attempt

    def __post_init__(self):
        if self.slot_duration <= 0.0 or self.packet_airtime <= 0.0:
            raise ValueError("slot duration and packet airtime must be positive")


def path_loss(model: PathLossModel, distance, shadowing_db=0.0):
    """Loss in dB at `distance` meters; distances below d0 clamp to d0."""
    d = np.maximum(distance, model.d0)
    return model.pl0 + 10.0 * model.exponent * np.log10(d / model.d0) + shadowing_db


def snr(budget: LinkBudget, loss_db):
    """Received SNR in dB for a link with the given total loss."""
    return budget.tx_gain - loss_db - budget.noise_floor


def bit_error_rate(snr_db):
    """Noncoherent binary GFSK approximation: BER = 0.5 * exp(-gamma/2)."""
    gamma = np.power(10.0, np.asarray(snr_db, dtype=float) / 10.0)
    return 0.5 * np.exp(-gamma / 2.0)


def packet_error_rate(snr_db, payload_bytes):
    """Probability that a packet of `payload_bytes` fails at the given SNR."""
    if np.any(np.asarray(payload_bytes) < 1):
        raise ValueError("payload must be at least one byte")
    ber = bit_error_rate(snr_db)
    bits = 8.0 * np.asarray(payload_bytes, dtype=float)
    # 1 - (1 - ber)^bits, computed in log space so tiny BERs do not underflow
    per = -np.expm1(bits * np.log1p(-ber))
    if np.ndim(per) == 0:
        return float(per)
    return per


def estimate_csi(true_loss: float, mae: float, rng: np.random.Generator) -> CsiRecord:
    """Estimate of a link loss with Laplace error of mean absolute value `mae`."""
    if mae < 0.0:
        raise ValueError("mae must be >= 0")
    err = float(rng.laplace(0.0, mae)) if mae > 0.0 else 0.0
    return CsiRecord(true_loss=true_loss, estimated_loss=true_loss + err, mae=mae)


def transmission_attempts(budget: D2dSlotBudget, group_size: int) -> int:
    """Attempts the slot budget affords each of the group_size - 1 members."""
    if group_size < 2:
        raise ValueError("a group needs a coordinator plus at least one member")
    return int(budget.slot_duration // ((group_size - 1) * budget.packet_airtime))


def d2d_link_reliability(per, budget: D2dSlotBudget, group_size: int):
    """Probability a member delivers within its share of the slot budget."""
    attempts = transmission_attempts(budget, group_size)
    if attempts == 0:
        return np.zeros_like(np.asarray(per, dtype=float)) if np.ndim(per) else 0.0
    rel = 1.0 - np.power(np.asarray(per, dtype=float), attempts)
    if np.ndim(rel) == 0:
        return float(rel)
    return rel


def _splitmix64(x):
    x = (x + _GOLDEN).astype(_U64)
    x = ((x ^ (x >> _U64(30))) * _MIX1).astype(_U64)
    x = ((x ^ (x >> _U64(27))) * _MIX2).astype(_U64)
    return x ^ (x >> _U64(31))


def _pair_uniform(key: int, ids_a, ids_b, salt) -> np.ndarray:
    """Deterministic uniform in (0,1) per unordered id pair and stream salt."""
    a = np.asarray(ids_a, dtype=np.int64)
    b = np.asarray(ids_b, dtype=np.int64)
    lo = np.minimum(a, b).astype(_U64)
    hi = np.maximum(a, b).astype(_U64)
    with np.errstate(over="ignore"):  # wraparound is the point of the mix
        h = _splitmix64(_U64(key & 0xFFFFFFFFFFFFFFFF) ^ salt)
        h = _splitmix64(h ^ (lo + _U64(1)))
        h = _splitmix64(h ^ ((hi + _U64(1)) * _GOLDEN).astype(_U64))
    return ((h >> _U64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def _laplace_from_uniform(u: np.ndarray, scale: float) -> np.ndarray:
    if scale == 0.0:
        return np.zeros_like(u)
    centered = u - 0.5
    return -scale * np.sign(centered) * np.log1p(-2.0 * np.abs(centered))


class CsiTable:
    """Pairwise link state over a live position array.

    True losses follow the path loss model at the *current* positions plus a
    per-pair frozen shadowing draw; estimated losses add a per-pair Laplace
    error of scale ``mae``. All lookups are pure functions of (key, id pair,
    positions), so they are reproducible and symmetric in the pair order.
    """

    def __init__(
        self,
        positions: np.ndarray,
        model: PathLossModel,
        budget: LinkBudget,
        mae: float,
        key: int,
    ):
        if mae < 0.0:
            raise ValueError("mae must be >= 0")
        self.positions = positions
        self.model = model
        self.budget = budget
        self.mae = mae
        self.key = key

    def distance(self, ids_a, ids_b) -> np.ndarray:
        delta = self.positions[np.asarray(ids_a)] - self.positions[np.asarray(ids_b)]
        return np.hypot(delta[..., 0], delta[..., 1])

    def shadowing(self, ids_a, ids_b) -> np.ndarray:
        if self.model.shadowing_sigma == 0.0:
            return np.zeros(np.broadcast(np.asarray(ids_a), np.asarray(ids_b)).shape)
        u = _pair_uniform(self.key, ids_a, ids_b, _SALT_SHADOWING)
        return ndtri(u) * self.model.shadowing_sigma

    def true_loss(self, ids_a, ids_b) -> np.ndarray:
        return path_loss(self.model, self.distance(ids_a, ids_b), self.shadowing(ids_a, ids_b))

    def estimated_loss(self, ids_a, ids_b) -> np.ndarray:
        u = _pair_uniform(self.key, ids_a, ids_b, _SALT_EST_ERROR)
        return self.true_loss(ids_a, ids_b) + _laplace_from_uniform(u, self.mae)

    def true_snr(self, ids_a, ids_b) -> np.ndarray:
        return snr(self.budget, self.true_loss(ids_a, ids_b))

    def estimated_snr(self, ids_a, ids_b) -> np.ndarray:
        return snr(self.budget, self.estimated_loss(ids_a, ids_b))

    def estimated_loss_matrix(self, ids) -> np.ndarray:
        """Symmetric estimated-loss matrix among `ids` (diagonal zero)."""
        ids = np.asarray(ids)
        ii, jj = np.meshgrid(ids, ids, indexing="ij")
        mat = self.estimated_loss(ii.ravel(), jj.ravel()).reshape(len(ids), len(ids))
        np.fill_diagonal(mat, 0.0)
        return mat

    def with_mae(self, mae: float) -> "CsiTable":
        """Same geometry and frozen shadowing, different estimation error."""
        return CsiTable(self.positions, self.model, self.budget, mae, self.key)
