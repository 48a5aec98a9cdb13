"""Deterministic discrete-event core: event queue, the grouped-uplink and
EAB run loops, metrics collection and Monte-Carlo orchestration.

Each run owns a root seed split into named independent substreams, so adding
draws in one module never perturbs another. Events are processed in strict
(epoch, sequence) order; equal seeds give bitwise-equal metrics.
"""

from __future__ import annotations

import heapq
import itertools
import math
import struct
import zlib
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import channel, clustering, protocol, rach, scenario
from .channel import CsiTable, D2dSlotBudget, LinkBudget, PathLossModel
from .clustering import GcHistory, Partition
from .gdb import GeolocationDatabase, PropagationMap, RegistrationRecord
from .protocol import ProtocolConfig
from .rach import EabConfig, RachConfig
from .scenario import ConfigurationError, DeviceProfile, ScenarioConfig

GROUPED_RA = "grouped_ra"
EAB = "eab"
MODES = (GROUPED_RA, EAB)

GROUPING_GDB = "gdb"
GROUPING_BS = "bs"


@dataclass(frozen=True)
class ChannelConfig:
    pl0: float = 40.0
    d0: float = 1.0
    exponent: float = 3.0
    shadowing_sigma: float = 4.0
    tx_gain: float = 20.0
    noise_floor: float = -90.0
    csi_mae: float = 6.0            # device-side estimation error, dB
    packet_airtime: float = 0.0006  # seconds per D2D transmission attempt
    error_free: bool = False        # stub: every D2D link perfectly reliable

    def path_loss_model(self) -> PathLossModel:
        return PathLossModel(self.pl0, self.d0, self.exponent, self.shadowing_sigma)

    def link_budget(self) -> LinkBudget:
        return LinkBudget(self.tx_gain, self.noise_floor)


@dataclass(frozen=True)
class ClusteringConfig:
    max_group_size: int = 50
    snr_threshold: float = 10.0

    def __post_init__(self):
        if self.max_group_size < 1:
            raise ConfigurationError("max_group_size must be >= 1")


@dataclass(frozen=True)
class GdbConfig:
    residual_mae: float = 1.0

    def __post_init__(self):
        if self.residual_mae < 0:
            raise ConfigurationError("residual_mae must be >= 0")


@dataclass(frozen=True)
class EngineConfig:
    horizon: float = 30.0
    update_interval: float = 10.0   # seconds between global group updates
    grouping: str = GROUPING_GDB    # initial clustering advice source
    mobility_tick: float = 1.0
    ull_delay_budget: float = 0.5   # seconds, budget for ULL-class arrivals

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigurationError("horizon must be >= 0")
        if self.update_interval <= 0 or self.mobility_tick <= 0:
            raise ConfigurationError("update_interval and mobility_tick must be positive")
        if self.grouping not in (GROUPING_GDB, GROUPING_BS):
            raise ConfigurationError(f"unknown grouping source {self.grouping!r}")
        if self.ull_delay_budget <= 0:
            raise ConfigurationError("ull_delay_budget must be positive")


@dataclass(frozen=True)
class SimConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    channel: ChannelConfig = ChannelConfig()
    clustering: ClusteringConfig = ClusteringConfig()
    rach: RachConfig = RachConfig()
    eab: EabConfig = EabConfig()
    protocol: ProtocolConfig = ProtocolConfig()
    gdb: GdbConfig = GdbConfig()
    engine: EngineConfig = EngineConfig()

    def validate(self) -> None:
        if abs(self.protocol.ra_slot - self.rach.slot_length) > 1e-12:
            raise ConfigurationError(
                "protocol.ra_slot must equal rach.slot_length "
                f"({self.protocol.ra_slot} vs {self.rach.slot_length})")


def stream(seed: int, name: str) -> np.random.Generator:
    """Named independent substream of a run's root seed."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((seed, zlib.crc32(name.encode())))))


def _csi_key(seed: int) -> int:
    ss = np.random.SeedSequence((seed, zlib.crc32(b"csi-pair-key")))
    return int(ss.generate_state(1, np.uint64)[0])


# --- metrics ------------------------------------------------------------------


@dataclass
class MetricsReport:
    mode: str
    seed: int
    device_count: int
    horizon: float
    arrivals: int = 0
    delays: np.ndarray = field(default_factory=lambda: np.empty(0))
    delay_acs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    pending: int = 0
    failed: int = 0
    censored_age_sum: float = 0.0
    ull_pending: int = 0
    ull_censored_age_sum: float = 0.0
    preamble_transmissions: int = 0
    preamble_collisions: int = 0
    ra_requests: int = 0
    direct_requests: int = 0
    completed_cycles: int = 0
    cycles_per_group: dict[int, int] = field(default_factory=dict)
    d2d_success: int = 0
    d2d_failure: int = 0
    link_per_mean: float = float("nan")
    link_per_worst: float = float("nan")
    link_reliability_mean: float = float("nan")
    per_device_worst_per: np.ndarray = field(default_factory=lambda: np.empty(0))
    uplink_data_bytes: int = 0
    uplink_signaling_bytes: int = 0
    uplink_frame_bytes: int = 0
    downlink_signaling_bytes: int = 0
    downlink_frame_bytes: int = 0
    group_count_trajectory: list[tuple[float, int]] = field(default_factory=list)

    @property
    def delivered(self) -> int:
        return len(self.delays)

    @property
    def collision_rate(self) -> float:
        if self.preamble_transmissions == 0:
            return 0.0
        return self.preamble_collisions / self.preamble_transmissions

    def mean_delay(self) -> float:
        return float(np.mean(self.delays)) if len(self.delays) else float("nan")

    def censored_mean_delay(self) -> float:
        """Mean with still-pending arrivals contributing their censored age."""
        total = float(np.sum(self.delays)) + self.censored_age_sum
        count = len(self.delays) + self.pending
        return total / count if count else float("nan")

    def ac_delays(self, classes) -> np.ndarray:
        mask = np.isin(self.delay_acs, list(classes))
        return self.delays[mask]

    def ull_mean_delay(self) -> float:
        samples = self.ac_delays(scenario.ULL_CLASSES)
        return float(np.mean(samples)) if len(samples) else float("nan")

    def ull_censored_mean_delay(self) -> float:
        samples = self.ac_delays(scenario.ULL_CLASSES)
        total = float(np.sum(samples)) + self.ull_censored_age_sum
        count = len(samples) + self.ull_pending
        return total / count if count else float("nan")

    def per_ac_mean_delay(self) -> dict[int, float]:
        out = {}
        for ac in range(scenario.ACCESS_CLASSES):
            samples = self.delays[self.delay_acs == ac]
            if len(samples):
                out[ac] = float(np.mean(samples))
        return out

    def conserved(self) -> bool:
        return self.delivered + self.failed + self.pending == self.arrivals

    def scalars(self) -> dict[str, float]:
        return {
            "mean_delay": self.mean_delay(),
            "censored_mean_delay": self.censored_mean_delay(),
            "ull_mean_delay": self.ull_mean_delay(),
            "ull_censored_mean_delay": self.ull_censored_mean_delay(),
            "arrivals": float(self.arrivals),
            "delivered": float(self.delivered),
            "pending": float(self.pending),
            "collision_rate": self.collision_rate,
            "preamble_transmissions": float(self.preamble_transmissions),
            "ra_requests": float(self.ra_requests),
            "direct_requests": float(self.direct_requests),
            "completed_cycles": float(self.completed_cycles),
            "d2d_failure_rate": (
                self.d2d_failure / (self.d2d_success + self.d2d_failure)
                if (self.d2d_success + self.d2d_failure) else 0.0),
            "link_per_mean": self.link_per_mean,
            "link_per_worst": self.link_per_worst,
            "link_reliability_mean": self.link_reliability_mean,
            "uplink_frame_bytes": float(self.uplink_frame_bytes),
            "uplink_signaling_bytes": float(self.uplink_signaling_bytes),
        }


# weights used when averaging a scalar across Monte-Carlo runs
_SAMPLE_WEIGHTED = {"mean_delay": "delivered", "ull_mean_delay": "ull_samples",
                    "censored_mean_delay": "censored_count"}


@dataclass
class MonteCarloReport:
    runs: list[MetricsReport]
    seeds: list[int]

    def _weight(self, report: MetricsReport, metric: str) -> float:
        kind = _SAMPLE_WEIGHTED.get(metric)
        if kind == "delivered":
            return float(report.delivered)
        if kind == "ull_samples":
            return float(len(report.ac_delays(scenario.ULL_CLASSES)))
        if kind == "censored_count":
            return float(report.delivered + report.pending)
        return 1.0

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Cross-run (mean, std) per scalar; delay means sample-weighted."""
        out = {}
        keys = self.runs[0].scalars().keys()
        per_run = [r.scalars() for r in self.runs]
        for key in keys:
            values = np.array([s[key] for s in per_run])
            weights = np.array([self._weight(r, key) for r in self.runs])
            good = ~np.isnan(values)
            if not good.any() or weights[good].sum() == 0:
                out[key] = (float("nan"), float("nan"))
                continue
            mean = float(np.average(values[good], weights=weights[good]))
            std = float(np.std(values[good]))
            out[key] = (mean, std)
        return out

    def mean(self, key: str) -> float:
        return self.aggregate()[key][0]


# --- shared machinery -----------------------------------------------------------


class _EventQueue:
    def __init__(self):
        self._heap: list[tuple[float, int, str, object]] = []
        self._seq = itertools.count()

    def push(self, epoch: float, kind: str, payload: object = None) -> None:
        heapq.heappush(self._heap, (epoch, next(self._seq), kind, payload))

    def pop(self):
        return heapq.heappop(self._heap)

    def __len__(self):
        return len(self._heap)


@dataclass
class _PendingRequest:
    """One admitted uplink need contending on the RACH (EAB or direct)."""
    requester: int
    ac: int
    request_epoch: float


def _slot_index(epoch: float, slot_length: float) -> int:
    """First RACH slot whose start is not before `epoch`."""
    return max(0, math.ceil(epoch / slot_length - 1e-9))


def _draw_arrival_table(
    devices: list[DeviceProfile], horizon: float, synchronized: bool,
    rng: np.random.Generator,
) -> list[tuple[float, int]]:
    """(epoch, device id) pairs for every uplink need in [0, horizon)."""
    out: list[tuple[float, int]] = []
    for dev in devices:
        for epoch in scenario.draw_arrivals(dev, horizon, rng, synchronized):
            out.append((float(epoch), dev.id))
    out.sort()
    return out


def run(
    config: SimConfig,
    mode: str,
    seed: int,
    devices: list[DeviceProfile] | None = None,
) -> MetricsReport:
    """Simulate one seeded run of `horizon` seconds in the given mode."""
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    config.validate()
    n = config.scenario.device_count if devices is None else len(devices)
    report = MetricsReport(mode=mode, seed=seed, device_count=n,
                           horizon=config.engine.horizon)
    if config.engine.horizon == 0:
        return report

    if devices is None:
        devices = scenario.build_scenario(config.scenario, stream(seed, "scenario"))
    if mode == GROUPED_RA:
        _GroupedRun(config, seed, devices, report).execute()
    else:
        _EabRun(config, seed, devices, report).execute()
    return report


# --- EAB benchmark mode ---------------------------------------------------------


class _EabRun:
    """Every uplink need gates through EAB individually, then contends."""

    def __init__(self, config: SimConfig, seed: int, devices, report: MetricsReport):
        self.config = config
        self.report = report
        self.devices = devices
        self.horizon = config.engine.horizon
        self.rach_rng = stream(seed, "rach")
        self.scen_rng = stream(seed, "scenario-mobility")
        self.arrival_rng = stream(seed, "scenario-arrivals")
        self.queue = _EventQueue()
        self.slot_buckets: dict[int, list[_PendingRequest]] = defaultdict(list)
        self.scheduled_slots: set[int] = set()
        self.regate_buckets: dict[int, list[_PendingRequest]] = defaultdict(list)
        self.scheduled_sibs: set[int] = set()
        self.positions = scenario.positions_array(devices)
        self.mobile_mask = np.array([d.mobile for d in devices])
        self.acs = np.array([d.access_class for d in devices])
        self.delays: list[float] = []
        self.delay_acs: list[int] = []
        self.parked: list[_PendingRequest] = []   # pending past the horizon

    def execute(self) -> None:
        cfg = self.config
        arrivals = _draw_arrival_table(
            self.devices, self.horizon, cfg.scenario.synchronized, self.arrival_rng)
        self.report.arrivals = len(arrivals)
        for epoch, device in arrivals:
            self.queue.push(epoch, "arrival", device)
        tick = cfg.engine.mobility_tick
        if tick < self.horizon:
            self.queue.push(tick, "mobility_tick", None)

        while len(self.queue):
            epoch, _, kind, payload = self.queue.pop()
            if kind == "arrival":
                self._on_arrival(epoch, payload)
            elif kind == "rach_slot":
                self._on_slot(payload)
            elif kind == "sib_broadcast":
                self._on_sib(epoch, payload)
            elif kind == "mobility_tick":
                self._on_mobility(epoch)
        self._finish()

    def _gate(self, req: _PendingRequest, now: float) -> None:
        outcome = rach.eab_gate(req.ac, self.config.eab, self.rach_rng)
        if outcome.passed:
            self._enqueue_attempt(req, now)
            return
        regate = rach.next_sib_epoch(now + outcome.backoff, self.config.eab)
        if regate >= self.horizon:
            self.parked.append(req)
            return
        sib_idx = round(regate / self.config.eab.sib_period)
        self.regate_buckets[sib_idx].append(req)
        if sib_idx not in self.scheduled_sibs:
            self.scheduled_sibs.add(sib_idx)
            self.queue.push(regate, "sib_broadcast", sib_idx)

    def _enqueue_attempt(self, req: _PendingRequest, epoch: float) -> None:
        slot = _slot_index(epoch, self.config.rach.slot_length)
        if slot * self.config.rach.slot_length >= self.horizon:
            self.parked.append(req)
            return
        self.slot_buckets[slot].append(req)
        if slot not in self.scheduled_slots:
            self.scheduled_slots.add(slot)
            self.queue.push(slot * self.config.rach.slot_length, "rach_slot", slot)

    def _on_arrival(self, epoch: float, device: int) -> None:
        req = _PendingRequest(device, int(self.acs[device]), epoch)
        self.report.ra_requests += 1
        self._gate(req, epoch)

    def _on_sib(self, epoch: float, sib_idx: int) -> None:
        for req in self.regate_buckets.pop(sib_idx, []):
            self._gate(req, epoch)
        self.scheduled_sibs.discard(sib_idx)

    def _on_slot(self, slot: int) -> None:
        bucket = self.slot_buckets.pop(slot, [])
        self.scheduled_slots.discard(slot)
        if not bucket:
            return
        slot_start = slot * self.config.rach.slot_length
        grant = slot_start + self.config.rach.slot_length
        draws = rach.draw_preambles(len(bucket), self.config.rach, self.rach_rng)
        collided = rach.collide(draws, self.config.rach)
        self.report.preamble_transmissions += len(bucket)
        self.report.preamble_collisions += int(collided.sum())
        retries = []
        for req, failed in zip(bucket, collided):
            if failed:
                retries.append(req)
            else:
                self.delays.append(grant - req.request_epoch)
                self.delay_acs.append(req.ac)
        if retries:
            backoffs = self.config.eab.max_backoff * (1.0 - self.rach_rng.random(len(retries)))
            for req, wait in zip(retries, backoffs):
                self._enqueue_attempt(req, grant + float(wait))

    def _on_mobility(self, epoch: float) -> None:
        self.positions[:] = scenario.step_mobility_array(
            self.positions, self.mobile_mask, self.config.scenario,
            self.config.engine.mobility_tick, self.scen_rng)
        nxt = epoch + self.config.engine.mobility_tick
        if nxt < self.horizon:
            self.queue.push(nxt, "mobility_tick", None)

    def _finish(self) -> None:
        report = self.report
        report.delays = np.array(self.delays)
        report.delay_acs = np.array(self.delay_acs, dtype=int)
        report.pending = report.arrivals - report.delivered
        leftovers = itertools.chain(
            self.parked,
            (req for bucket in self.slot_buckets.values() for req in bucket),
            (req for bucket in self.regate_buckets.values() for req in bucket))
        report.censored_age_sum = float(
            sum(self.horizon - req.request_epoch for req in leftovers))


# --- grouped random access mode ---------------------------------------------------


@dataclass
class _LiveGroup:
    state: protocol.GroupCycleState
    offset: float            # stagger offset of this group's cycle grid
    generation: int
    retired: bool = False
    cycle_open: bool = False
    inflight_uplink: protocol.AggregatedFrame | None = None
    inflight_downlink: protocol.AggregatedFrame | None = None
    downlink_queue: list[protocol.SignalingMessage] = field(default_factory=list)


class _GroupedRun:
    """Six-phase aggregated cycles per group; only coordinators touch the RACH."""

    def __init__(self, config: SimConfig, seed: int, devices, report: MetricsReport):
        self.config = config
        self.report = report
        self.devices = devices
        self.horizon = config.engine.horizon
        self.rach_rng = stream(seed, "rach")
        self.proto_rng = stream(seed, "protocol")
        self.cluster_rng = stream(seed, "clustering")
        self.scen_rng = stream(seed, "scenario-mobility")
        self.arrival_rng = stream(seed, "scenario-arrivals")

        self.positions = scenario.positions_array(devices)
        self.mobile_mask = np.array([d.mobile for d in devices])
        self.acs = np.array([d.access_class for d in devices])
        self.payload_sizes = np.array([d.traffic.payload for d in devices])
        self.payloads = {d.id: bytes(d.traffic.payload) for d in devices}

        ch = config.channel
        self.csi = CsiTable(self.positions, ch.path_loss_model(), ch.link_budget(),
                            ch.csi_mae, _csi_key(seed))
        self.gdb = GeolocationDatabase(
            area_side=config.scenario.area_side, csi=self.csi,
            propagation=PropagationMap(config.gdb.residual_mae))
        self.history = GcHistory()
        self.partition = Partition()
        self.queue = _EventQueue()

        self.pending: dict[int, deque] = {d.id: deque() for d in devices}
        self.unserved: dict[int, int] = defaultdict(int)
        self.direct_mode: set[int] = set()
        self.live: dict[int, _LiveGroup] = {}
        self.device_group: dict[int, int] = {}
        self.gc_since: dict[int, float] = {}
        self.rel = np.ones(len(devices))
        self.link_per = np.zeros(len(devices))
        self.slot_buckets: dict[int, list] = defaultdict(list)
        self.scheduled_slots: set[int] = set()
        self.delays: list[float] = []
        self.delay_acs: list[int] = []
        self.generation = 0

    # -- setup ----------------------------------------------------------------

    def execute(self) -> None:
        cfg = self.config
        for dev in self.devices:
            self.gdb.register(RegistrationRecord(device=dev.id, location=dev.position))
        self._recluster(0.0, initial=True)
        arrivals = _draw_arrival_table(
            self.devices, self.horizon, cfg.scenario.synchronized, self.arrival_rng)
        self.report.arrivals = len(arrivals)
        for epoch, device in arrivals:
            self.queue.push(epoch, "arrival", device)
        if cfg.engine.mobility_tick < self.horizon:
            self.queue.push(cfg.engine.mobility_tick, "mobility_tick", None)
        t = cfg.engine.update_interval
        while t < self.horizon:
            self.queue.push(t, "global_update_tick", None)
            t += cfg.engine.update_interval

        while len(self.queue):
            epoch, _, kind, payload = self.queue.pop()
            if kind == "arrival":
                self.pending[payload].append(epoch)
                if payload in self.direct_mode:
                    self._enqueue_direct(payload, epoch, epoch)
            elif kind == "phase_deadline":
                self._on_phase(epoch, payload)
            elif kind == "rach_slot":
                self._on_slot(payload)
            elif kind == "mobility_tick":
                self._on_mobility(epoch)
            elif kind == "global_update_tick":
                self._recluster(epoch, initial=False)
        self._finish()

    def _recluster(self, now: float, initial: bool) -> None:
        cfg = self.config
        self._credit_all_duty(now)
        if cfg.engine.grouping == GROUPING_GDB:
            partition = self.gdb.advise_grouping(
                cfg.clustering.max_group_size, self.history, self.cluster_rng,
                cfg.clustering.snr_threshold)
        else:
            partition = clustering.global_group_update(
                sorted(self.pending), self.positions, self.csi,
                cfg.clustering.max_group_size, self.history, self.cluster_rng,
                cfg.clustering.snr_threshold)
        # retire old groups: in-flight cycles finish, no new ones start
        for live in self.live.values():
            live.retired = True
        self.live = {gid: live for gid, live in self.live.items() if live.cycle_open}
        self.generation += 1
        base = self.generation * 1_000_000  # group ids unique across generations
        renumbered = {}
        for gid in sorted(partition.groups):
            group = partition.groups[gid]
            group.group_id = base + gid
            renumbered[group.group_id] = group
        partition.groups = renumbered
        self.partition = partition
        self.device_group = partition.device_to_group()
        self.gc_since = {}
        n_groups = len(partition.groups)
        for rank, gid in enumerate(sorted(partition.groups)):
            group = partition.groups[gid]
            offset = (rank / max(n_groups, 1)) * cfg.protocol.cycle_interval
            state = protocol.GroupCycleState(
                group_id=gid, gc=group.gc, members=tuple(sorted(group.members)))
            self.live[gid] = _LiveGroup(state=state, offset=offset,
                                        generation=self.generation)
            self.gc_since[gid] = now
            start = now + offset
            if start < self.horizon:
                self.queue.push(start, "phase_deadline",
                                ("cycle_start", gid, self.generation))
        self.direct_mode.clear()
        self.unserved.clear()
        self._refresh_link_stats()
        self.report.group_count_trajectory.append((now, n_groups))
        if initial:
            self._record_initial_link_metrics()

    def _credit_all_duty(self, now: float) -> None:
        for gid, group in self.partition.groups.items():
            since = self.gc_since.get(gid)
            if since is not None:
                self.history.credit(group.gc, max(0.0, now - since))
                self.gc_since[gid] = now

    def _refresh_link_stats(self) -> None:
        """Per-device PER and per-cycle delivery probability toward its GC."""
        cfg = self.config
        gms, gcs, sizes = [], [], []
        for gid in sorted(self.partition.groups):
            group = self.partition.groups[gid]
            members = sorted(group.members - {group.gc})
            gms.extend(members)
            gcs.extend([group.gc] * len(members))
            sizes.extend([len(group.members)] * len(members))
        self.rel = np.ones(len(self.devices))
        self.link_per = np.zeros(len(self.devices))
        if not gms:
            return
        gms_arr = np.array(gms)
        if cfg.channel.error_free:
            per = np.zeros(len(gms_arr))
            rel = np.ones(len(gms_arr))
        else:
            loss = self.csi.true_loss(gms_arr, np.array(gcs))
            snr_db = channel.snr(self.csi.budget, loss)
            per = channel.packet_error_rate(snr_db, self.payload_sizes[gms_arr])
            sizes_arr = np.array(sizes)
            airtime = cfg.channel.packet_airtime
            attempts = np.floor(
                cfg.protocol.da_duration / ((sizes_arr - 1) * airtime)).astype(int)
            rel = np.where(attempts >= 1,
                           1.0 - np.power(per, np.maximum(attempts, 1)), 0.0)
        self.link_per[gms_arr] = per
        self.rel[gms_arr] = rel
        worst = self.report.per_device_worst_per
        if len(worst) != len(self.devices):
            worst = np.zeros(len(self.devices))
        worst[gms_arr] = np.maximum(worst[gms_arr], per)
        self.report.per_device_worst_per = worst

    def _record_initial_link_metrics(self) -> None:
        gm_mask = np.ones(len(self.devices), dtype=bool)
        for group in self.partition.groups.values():
            gm_mask[group.gc] = False
        pers = self.link_per[gm_mask]
        rels = self.rel[gm_mask]
        if len(pers):
            self.report.link_per_mean = float(pers.mean())
            self.report.link_per_worst = float(pers.max())
            self.report.link_reliability_mean = float(rels.mean())

    # -- event handlers ---------------------------------------------------------

    def _on_mobility(self, epoch: float) -> None:
        self.positions[:] = scenario.step_mobility_array(
            self.positions, self.mobile_mask, self.config.scenario,
            self.config.engine.mobility_tick, self.scen_rng)
        self._refresh_link_stats()
        nxt = epoch + self.config.engine.mobility_tick
        if nxt < self.horizon:
            self.queue.push(nxt, "mobility_tick", None)

    def _live_group(self, gid: int, generation: int) -> _LiveGroup | None:
        live = self.live.get(gid)
        if live is None or live.generation != generation:
            return None
        return live

    def _on_phase(self, epoch: float, payload) -> None:
        stage, gid, generation = payload
        live = self._live_group(gid, generation)
        if live is None:
            return
        if stage == "cycle_start":
            self._start_cycle(live, epoch)
        else:
            self._close_phase(live, epoch)

    def _start_cycle(self, live: _LiveGroup, epoch: float) -> None:
        if live.retired or epoch >= self.horizon:
            return
        group = self.partition.groups.get(live.state.group_id)
        if group is None or not group.members:
            return
        protocol.start_cycle(live.state, epoch, self.config.protocol,
                             gc=group.gc, members=tuple(sorted(group.members)))
        live.cycle_open = True
        self.queue.push(live.state.phase_deadline, "phase_deadline",
                        ("phase", live.state.group_id, live.generation))

    def _close_phase(self, live: _LiveGroup, epoch: float) -> None:
        state = live.state
        cfg = self.config
        if state.phase == protocol.DA:
            events = self._collect_da(live, epoch)
            _, actions = protocol.advance_cycle(state, epoch, events, cfg.protocol)
            for action in actions:
                if isinstance(action, protocol.EnqueueRaAttempt):
                    self.report.ra_requests += 1
                    self._enqueue_gc_attempt(live, epoch)
        elif state.phase == protocol.RA:
            # deadline hit while stalled: slot outcomes drive this phase
            return
        elif state.phase == protocol.AUT:
            protocol.advance_cycle(state, epoch, [], cfg.protocol)
            self.queue.push(state.phase_deadline, "phase_deadline",
                            ("phase", state.group_id, live.generation))
        elif state.phase == protocol.G:
            self._bs_process(live, epoch)
            protocol.advance_cycle(state, epoch, [], cfg.protocol)
            self.queue.push(state.phase_deadline, "phase_deadline",
                            ("phase", state.group_id, live.generation))
        elif state.phase == protocol.ADT:
            frame = self._build_downlink(live)
            events = [protocol.DownlinkReceived(frame)] if frame else []
            _, actions = protocol.advance_cycle(state, epoch, events, cfg.protocol)
            for action in actions:
                if isinstance(action, protocol.DistributeDownlink):
                    live.inflight_downlink = action.frame
            self.queue.push(state.phase_deadline, "phase_deadline",
                            ("phase", state.group_id, live.generation))
        elif state.phase == protocol.DD:
            self._distribute_downlink(live, epoch)
            _, actions = protocol.advance_cycle(state, epoch, [], cfg.protocol)
            for action in actions:
                if isinstance(action, protocol.CycleComplete):
                    self._cycle_complete(live, epoch)

    def _collect_da(self, live: _LiveGroup, epoch: float) -> list[protocol.GmDelivery]:
        """Reliability-draw every member that has pending uplink reports."""
        state = live.state
        events: list[protocol.GmDelivery] = []
        senders = [d for d in state.members
                   if d != state.gc and self.pending[d] and d not in self.direct_mode]
        if senders:
            draws = self.proto_rng.random(len(senders))
            for device, draw in zip(senders, draws):
                if draw < self.rel[device]:
                    self.report.d2d_success += 1
                    self.unserved[device] = 0
                    for request_epoch in self.pending[device]:
                        events.append(protocol.GmDelivery(
                            device, self.payloads[device], request_epoch, True))
                    self.pending[device].clear()
                else:
                    self.report.d2d_failure += 1
                    events.append(protocol.GmDelivery(
                        device, self.payloads[device], self.pending[device][0], False))
                    self.unserved[device] += 1
                    if self.unserved[device] >= self.config.protocol.fallback_cycles:
                        self._orphan_fallback(device, epoch)
        # the coordinator's own traffic rides its aggregate for free
        gc = state.gc
        if self.pending[gc]:
            for request_epoch in self.pending[gc]:
                events.append(protocol.GmDelivery(gc, self.payloads[gc], request_epoch, True))
            self.pending[gc].clear()
        return events

    def _orphan_fallback(self, device: int, epoch: float) -> None:
        """Unserved too long: leave the group and contend directly."""
        clustering.group_leave(device, self.partition, self.csi, self.history,
                               self.config.clustering.snr_threshold)
        self.device_group.pop(device, None)
        self.direct_mode.add(device)
        self.unserved[device] = 0
        for request_epoch in self.pending[device]:
            self._enqueue_direct(device, request_epoch, epoch)
        self._refresh_link_stats()

    def _enqueue_direct(self, device: int, request_epoch: float, now: float) -> None:
        req = _PendingRequest(device, int(self.acs[device]), request_epoch)
        self.report.ra_requests += 1
        self.report.direct_requests += 1
        slot = _slot_index(now, self.config.rach.slot_length)
        if slot * self.config.rach.slot_length >= self.horizon:
            return  # remains pending at the horizon
        self._bucket_attempt(("direct", req), slot)

    def _enqueue_gc_attempt(self, live: _LiveGroup, now: float) -> None:
        slot = _slot_index(now, self.config.rach.slot_length)
        self._bucket_attempt(("gc", live.state.group_id, live.generation), slot)

    def _bucket_attempt(self, item, slot: int) -> None:
        self.slot_buckets[slot].append(item)
        if slot not in self.scheduled_slots:
            self.scheduled_slots.add(slot)
            self.queue.push(slot * self.config.rach.slot_length, "rach_slot", slot)

    def _on_slot(self, slot: int) -> None:
        bucket = self.slot_buckets.pop(slot, [])
        self.scheduled_slots.discard(slot)
        if not bucket:
            return
        slot_start = slot * self.config.rach.slot_length
        grant = slot_start + self.config.rach.slot_length
        draws = rach.draw_preambles(len(bucket), self.config.rach, self.rach_rng)
        collided = rach.collide(draws, self.config.rach)
        self.report.preamble_transmissions += len(bucket)
        self.report.preamble_collisions += int(collided.sum())
        for item, failed in zip(bucket, collided):
            if item[0] == "gc":
                self._gc_slot_outcome(item[1], item[2], grant, slot, bool(failed))
            else:
                self._direct_slot_outcome(item[1], grant, bool(failed))

    def _gc_slot_outcome(self, gid: int, generation: int, grant: float,
                         slot: int, failed: bool) -> None:
        live = self._live_group(gid, generation)
        if live is None:
            return
        state = live.state
        if failed:
            # the RA phase repeats its slot until granted
            protocol.advance_cycle(state, grant, [], self.config.protocol)
            self._bucket_attempt(("gc", gid, generation), slot + 1)
            return
        _, actions = protocol.advance_cycle(
            state, grant, [protocol.RaGranted(grant)], self.config.protocol)
        for action in actions:
            if isinstance(action, protocol.UplinkFrameSent):
                live.inflight_uplink = action.frame
                for item in state.aggregated_uplink:
                    self.delays.append(grant - item.request_epoch)
                    self.delay_acs.append(int(self.acs[item.device]))
                self._account_uplink(action.frame)
        self.queue.push(state.phase_deadline, "phase_deadline",
                        ("phase", gid, generation))

    def _direct_slot_outcome(self, req: _PendingRequest, grant: float,
                             failed: bool) -> None:
        if failed:
            wait = self.config.eab.max_backoff * (1.0 - float(self.rach_rng.random()))
            retry_slot = _slot_index(grant + wait, self.config.rach.slot_length)
            self._bucket_attempt(("direct", req), retry_slot)
            return
        self.delays.append(grant - req.request_epoch)
        self.delay_acs.append(req.ac)
        device = req.requester
        queue = self.pending[device]
        try:
            queue.remove(req.request_epoch)
        except ValueError:
            pass
        if device in self.direct_mode and not queue:
            self._rejoin(device, grant)

    def _rejoin(self, device: int, now: float) -> None:
        """Drained orphan rejoins the nearest group; command rides the downlink."""
        self.direct_mode.discard(device)
        if device not in self.partition.unclustered:
            return
        table = (self.gdb.oracle_table()
                 if self.config.engine.grouping == GROUPING_GDB else self.csi)
        target = clustering.group_join(
            device, self.partition, table, self.history,
            self.config.clustering.max_group_size, self.config.clustering.snr_threshold)
        self.device_group[device] = target.group_id
        live = self.live.get(target.group_id)
        if live is not None:
            live.downlink_queue.append(protocol.SignalingMessage(
                protocol.JOIN_COMMAND, device, struct.pack(">I", target.group_id)))
        self._refresh_link_stats()

    def _account_uplink(self, frame: protocol.AggregatedFrame) -> None:
        encoded = protocol.encode_frame(frame)
        self.report.uplink_frame_bytes += len(encoded)
        self.report.uplink_data_bytes += frame.data_bytes()
        self.report.uplink_signaling_bytes += frame.signaling_bytes()

    def _bs_process(self, live: _LiveGroup, epoch: float) -> None:
        """Guard phase: the BS reacts to the frame's embedded signaling."""
        frame = live.inflight_uplink
        live.inflight_uplink = None
        if frame is None:
            return
        changed = False
        for msg in frame.signaling:
            if msg.kind != protocol.LINK_REPORT:
                continue
            subject = msg.subject
            if subject in self.direct_mode:
                continue  # already on the fallback path
            if self.partition.group_of(subject) is None:
                continue
            table = (self.gdb.oracle_table()
                     if self.config.engine.grouping == GROUPING_GDB else self.csi)
            commands = protocol.handle_exception_command(
                self.partition, msg, table, self.history,
                self.config.clustering.max_group_size,
                self.config.clustering.snr_threshold)
            self.device_group = self.partition.device_to_group()
            for command in commands:
                if command.kind == protocol.ACK:
                    live.downlink_queue.append(command)
                else:
                    target_live = self.live.get(self.device_group.get(command.subject, -1))
                    (target_live or live).downlink_queue.append(command)
            self.unserved[subject] = 0
            changed = True
        if changed:
            self._refresh_link_stats()
            self.report.group_count_trajectory.append((epoch, len(self.partition.groups)))

    def _build_downlink(self, live: _LiveGroup) -> protocol.AggregatedFrame:
        state = live.state
        pending = live.downlink_queue
        live.downlink_queue = []
        acks = [m for m in pending if m.kind == protocol.ACK]
        commands = [m for m in pending if m.kind != protocol.ACK]
        frame = protocol.build_downlink_frame(
            state.group_id, state.cycle_seq, acks, commands, [])
        encoded = protocol.encode_frame(frame)
        self.report.downlink_frame_bytes += len(encoded)
        self.report.downlink_signaling_bytes += frame.signaling_bytes()
        return frame

    def _distribute_downlink(self, live: _LiveGroup, epoch: float) -> None:
        frame = live.inflight_downlink
        live.inflight_downlink = None
        if frame is None:
            return
        for msg in frame.signaling:
            if msg.kind != protocol.JOIN_COMMAND:
                continue
            target = msg.subject
            if target == live.state.gc:
                continue
            if float(self.proto_rng.random()) < self.rel[target]:
                self.report.d2d_success += 1
                self.unserved[target] = 0
            else:
                self.report.d2d_failure += 1

    def _cycle_complete(self, live: _LiveGroup, epoch: float) -> None:
        state = live.state
        live.cycle_open = False
        self.report.completed_cycles += 1
        self.report.cycles_per_group[state.group_id] = (
            self.report.cycles_per_group.get(state.group_id, 0) + 1)
        if live.retired:
            self.live.pop(state.group_id, None)
            return
        interval = self.config.protocol.cycle_interval
        k = math.floor((epoch - live.offset) / interval) + 1
        nxt = live.offset + k * interval
        while nxt <= epoch:
            nxt += interval
        if nxt < self.horizon:
            self.queue.push(nxt, "phase_deadline",
                            ("cycle_start", state.group_id, live.generation))

    def _finish(self) -> None:
        report = self.report
        self._credit_all_duty(self.horizon)
        report.delays = np.array(self.delays)
        report.delay_acs = np.array(self.delay_acs, dtype=int)
        report.pending = report.arrivals - report.delivered
        report.censored_age_sum = float(sum(
            self.horizon - epoch
            for queue in self.pending.values() for epoch in queue))


# --- Monte-Carlo orchestration ----------------------------------------------------


def _run_star(args) -> MetricsReport:
    config, mode, seed = args
    return run(config, mode, seed)


def monte_carlo(
    config: SimConfig,
    mode: str,
    runs: int,
    base_seed: int,
    workers: int = 1,
) -> MonteCarloReport:
    """Independent seeded runs; parallel execution changes nothing."""
    if runs < 1:
        raise ConfigurationError("runs must be >= 1")
    seeds = [base_seed + i for i in range(runs)]
    jobs = [(config, mode, seed) for seed in seeds]
    if workers > 1 and runs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(min(workers, runs)) as pool:
            reports = pool.map(_run_star, jobs)
    else:
        reports = [_run_star(job) for job in jobs]
    return MonteCarloReport(runs=reports, seeds=seeds)


SWEEP_VARIABLES = ("device_count", "group_size_cap", "csi_mae")


def apply_sweep_value(config: SimConfig, variable: str, value) -> SimConfig:
    if variable == "device_count":
        return replace(config, scenario=replace(config.scenario, device_count=int(value)))
    if variable == "group_size_cap":
        return replace(config, clustering=replace(config.clustering, max_group_size=int(value)))
    if variable == "csi_mae":
        return replace(config, channel=replace(config.channel, csi_mae=float(value)))
    raise ConfigurationError(f"unknown sweep variable {variable!r}")


def sweep(
    config: SimConfig,
    variable: str,
    values: list,
    mode: str,
    runs: int,
    base_seed: int,
    workers: int = 1,
) -> list[tuple[object, MonteCarloReport]]:
    """One Monte-Carlo batch per value of the swept variable."""
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    table = []
    for value in values:
        point = apply_sweep_value(config, variable, value)
        table.append((value, monte_carlo(point, mode, runs, base_seed, workers)))
    return table
