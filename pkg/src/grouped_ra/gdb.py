"""Geolocation database: device registration (direct or through a MASTER
acting for its SLAVE devices), a low-error propagation oracle, and grouping
advice computed from that oracle instead of device-side estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import clustering
from .channel import CsiTable
from .clustering import GcHistory, Partition
from .scenario import Position

ROLE_GC = "GC"
ROLE_GM = "GM"


class RegistrationConflictError(ValueError):
    """A device re-registered with fields that contradict its stored record."""


class AuthorizationError(PermissionError):
    """An operation required a directly registered master."""


@dataclass(frozen=True)
class Capabilities:
    tx_gain: float = 20.0
    supported_roles: frozenset[str] = frozenset({ROLE_GC, ROLE_GM})


@dataclass(frozen=True)
class RegistrationRecord:
    device: int
    location: Position
    capabilities: Capabilities = Capabilities()
    registered_via: int | None = None   # master device id, when indirect
    resource_grant: str | None = None


@dataclass(frozen=True)
class PropagationMap:
    """Per-location propagation knowledge with a small residual error."""

    residual_mae: float = 1.0   # dB; well under typical device-side error

    def __post_init__(self):
        if self.residual_mae < 0:
            raise ValueError("residual_mae must be >= 0")


@dataclass
class GeolocationDatabase:
    """In-process registry plus propagation oracle.

    The oracle shares the run's frozen link table (same geometry and
    shadowing the radios actually see) but re-estimates losses with the
    database's residual error, which is how it can advise better grouping
    than the device-side estimates allow.
    """

    area_side: float
    csi: CsiTable                 # device-side table; re-scoped per query
    propagation: PropagationMap = field(default_factory=PropagationMap)
    records: dict[int, RegistrationRecord] = field(default_factory=dict)
    _grant_counter: int = 0

    def _issue_grant(self, device: int) -> str:
        self._grant_counter += 1
        return f"grant-{device}-{self._grant_counter}"

    def _inside_area(self, location: Position) -> bool:
        return 0.0 <= location.x <= self.area_side and 0.0 <= location.y <= self.area_side

    def register(self, record: RegistrationRecord) -> RegistrationRecord:
        """Store a direct registration and issue a resource grant.

        Re-registration with identical fields is idempotent and returns the
        existing grant; conflicting fields raise.
        """
        if record.resource_grant is not None:
            raise ValueError("grants are issued by the database, not the caller")
        if not self._inside_area(record.location):
            raise ValueError(f"location {record.location} outside the service area")
        existing = self.records.get(record.device)
        if existing is not None:
            if replace(existing, resource_grant=None) == record:
                return existing
            raise RegistrationConflictError(
                f"device {record.device} already registered with different fields")
        granted = replace(record, resource_grant=self._issue_grant(record.device))
        self.records[record.device] = granted
        return granted

    def register_on_behalf(
        self, master: int, slaves: list[RegistrationRecord]
    ) -> list[RegistrationRecord]:
        """Register SLAVE devices through a directly registered MASTER."""
        master_record = self.records.get(master)
        if master_record is None or master_record.registered_via is not None:
            raise AuthorizationError(f"device {master} is not registered directly")
        granted = []
        for record in slaves:
            granted.append(self.register(replace(record, registered_via=master)))
        return granted

    def is_registered(self, device: int) -> bool:
        return device in self.records

    def oracle_table(self) -> CsiTable:
        return self.csi.with_mae(self.propagation.residual_mae)

    def query_propagation(
        self, a: int | Position, b: int | Position, rng: np.random.Generator
    ) -> float:
        """Estimated loss between two registered devices (or raw positions).

        The true-loss component is the run's frozen link model, so queries
        are reciprocal; the residual Laplace error uses the caller's stream.
        """
        ia, ib = self._resolve(a), self._resolve(b)
        true = float(self.csi.true_loss(ia, ib))
        err = self.propagation.residual_mae
        noise = float(rng.laplace(0.0, err)) if err > 0 else 0.0
        return true + noise

    def _resolve(self, ref: int | Position) -> int:
        if isinstance(ref, Position):
            for record in self.records.values():
                if record.location == ref:
                    return record.device
            raise KeyError(f"no registration at {ref}")
        if ref not in self.records:
            raise KeyError(f"device {ref} is not registered")
        return ref

    def advise_grouping(
        self,
        max_size: int,
        history: GcHistory,
        rng: np.random.Generator,
        snr_threshold: float = clustering.DEFAULT_SNR_THRESHOLD,
    ) -> Partition:
        """Cluster all registered devices using the database's link oracle."""
        if not self.records:
            raise ValueError("no registered devices to group")
        gc_capable = {
            dev for dev, rec in self.records.items()
            if ROLE_GC in rec.capabilities.supported_roles
        }
        eligible = None if len(gc_capable) == len(self.records) else gc_capable
        return clustering.global_group_update(
            device_ids=sorted(self.records),
            positions=self.csi.positions,
            csi=self.oracle_table(),
            max_size=max_size,
            history=history,
            rng=rng,
            snr_threshold=snr_threshold,
            eligible_gcs=eligible,
        )
