"""Group structure management: cell-wide reclustering, join/leave and
history-fair coordinator selection.

Reclustering is a capacity-constrained k-means on positions (k-means++
seeding, Lloyd iterations, then overflow members pushed to the nearest
non-full centroid). Coordinator choice uses the estimated link table and the
cumulative GC duty history, so better-informed link estimates directly give
better coordinators.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .channel import CsiTable

log = logging.getLogger(__name__)

KMEANS_MAX_ITER = 50
DEFAULT_MAX_GROUP_SIZE = 50
DEFAULT_SNR_THRESHOLD = 10.0  # dB, minimum worst intra-group SNR for GC candidacy


@dataclass
class Group:
    group_id: int
    members: set[int]
    gc: int

    def check(self, max_size: int | None = None) -> None:
        assert self.gc in self.members, f"group {self.group_id}: gc not a member"
        assert len(self.members) >= 1
        if max_size is not None:
            assert len(self.members) <= max_size


@dataclass
class GcHistory:
    """Cumulative seconds each device has served as coordinator."""

    duty: dict[int, float] = field(default_factory=dict)

    def seconds(self, device: int) -> float:
        return self.duty.get(device, 0.0)

    def credit(self, device: int, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("duty credit must be >= 0")
        self.duty[device] = self.duty.get(device, 0.0) + seconds


@dataclass
class Partition:
    groups: dict[int, Group] = field(default_factory=dict)
    unclustered: set[int] = field(default_factory=set)

    def group_of(self, device: int) -> Group | None:
        for group in self.groups.values():
            if device in group.members:
                return group
        return None

    def next_group_id(self) -> int:
        return max(self.groups, default=-1) + 1

    def device_to_group(self) -> dict[int, int]:
        out = {}
        for gid, group in self.groups.items():
            for member in group.members:
                out[member] = gid
        return out

    def check(self, max_size: int | None = None, universe: set[int] | None = None) -> None:
        """Assert disjointness, coverage, capacity and gc membership."""
        seen: set[int] = set()
        for group in self.groups.values():
            group.check(max_size)
            overlap = seen & group.members
            assert not overlap, f"devices {overlap} appear in two groups"
            seen |= group.members
        assert not (seen & self.unclustered), "device both clustered and unclustered"
        if universe is not None:
            assert seen | self.unclustered == universe, "partition does not cover all devices"


def select_gc(
    members: set[int],
    csi: CsiTable,
    history: GcHistory,
    snr_threshold: float = DEFAULT_SNR_THRESHOLD,
    eligible: set[int] | None = None,
) -> int:
    """Pick the coordinator for one group.

    Candidates are the members whose worst estimated SNR toward every other
    member clears `snr_threshold` (restricted to `eligible` when given); an
    empty candidate set falls back to all (eligible) members. Least
    cumulative duty wins, ties broken by higher worst-link SNR then lower id.
    """
    if not members:
        raise ValueError("cannot select a coordinator for an empty group")
    ids = sorted(members)
    if len(ids) == 1:
        return ids[0]
    loss = csi.estimated_loss_matrix(ids)
    snr_mat = csi.budget.tx_gain - loss - csi.budget.noise_floor
    np.fill_diagonal(snr_mat, np.inf)
    worst = snr_mat.min(axis=1)

    pool = ids if eligible is None else [i for i in ids if i in eligible]
    if not pool:
        pool = ids
    worst_of = {dev: float(worst[k]) for k, dev in enumerate(ids)}
    candidates = [dev for dev in pool if worst_of[dev] >= snr_threshold]
    if not candidates:
        candidates = pool
    return min(candidates, key=lambda dev: (history.seconds(dev), -worst_of[dev], dev))


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, 2))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int) -> np.ndarray:
    k = len(centroids)
    assign = np.full(len(points), -1)
    for _ in range(max_iter):
        _, new_assign = cKDTree(centroids).query(points)
        # re-seed empty clusters with the point farthest from its centroid
        counts = np.bincount(new_assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            dist = np.sum((points - centroids[new_assign]) ** 2, axis=1)
            far = int(np.argmax(dist))
            new_assign[far] = empty
            counts = np.bincount(new_assign, minlength=k)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            sel = assign == c
            if sel.any():
                centroids[c] = points[sel].mean(axis=0)
    return assign


def _enforce_capacity(
    points: np.ndarray, centroids: np.ndarray, assign: np.ndarray, max_size: int
) -> np.ndarray:
    k = len(centroids)
    counts = np.bincount(assign, minlength=k)
    excess: list[int] = []
    for c in np.flatnonzero(counts > max_size):
        members = np.flatnonzero(assign == c)
        dist = np.sum((points[members] - centroids[c]) ** 2, axis=1)
        order = members[np.lexsort((members, dist))]  # nearest stay, ties by id
        for idx in order[max_size:]:
            excess.append(int(idx))
            assign[idx] = -1
            counts[c] -= 1
    for idx in sorted(excess):
        d2 = np.sum((centroids - points[idx]) ** 2, axis=1)
        d2[counts >= max_size] = np.inf
        target = int(np.argmin(d2))
        assign[idx] = target
        counts[target] += 1
    return assign


def global_group_update(
    device_ids: list[int],
    positions: np.ndarray,
    csi: CsiTable,
    max_size: int,
    history: GcHistory,
    rng: np.random.Generator,
    snr_threshold: float = DEFAULT_SNR_THRESHOLD,
    eligible_gcs: set[int] | None = None,
) -> Partition:
    """Recluster the whole cell and select a coordinator per group."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    if not device_ids:
        return Partition()
    ids = np.asarray(sorted(device_ids))
    pts = positions[ids]
    k = math.ceil(len(ids) / max_size)
    if k == 1:
        assign = np.zeros(len(ids), dtype=int)
    else:
        centroids = _kmeans_pp_init(pts, k, rng)
        assign = _lloyd(pts, centroids, KMEANS_MAX_ITER)
        assign = _enforce_capacity(pts, centroids, assign, max_size)

    partition = Partition()
    next_gid = 0
    for c in range(int(assign.max()) + 1):
        members = {int(dev) for dev in ids[assign == c]}
        if not members:
            continue
        gc = select_gc(members, csi, history, snr_threshold, eligible_gcs)
        partition.groups[next_gid] = Group(group_id=next_gid, members=members, gc=gc)
        next_gid += 1
    return partition


def group_join(
    device: int,
    partition: Partition,
    csi: CsiTable,
    history: GcHistory,
    max_size: int = DEFAULT_MAX_GROUP_SIZE,
    snr_threshold: float = DEFAULT_SNR_THRESHOLD,
) -> Group:
    """Attach an unclustered device to the closest group with spare capacity.

    Closeness is the estimated loss toward the group's coordinator; when no
    group has room the device forms a new singleton group. Returns the group
    that received the device (its coordinator is re-selected).
    """
    if device not in partition.unclustered:
        raise ValueError(f"device {device} is not unclustered")
    open_groups = [g for g in partition.groups.values() if len(g.members) < max_size]
    partition.unclustered.discard(device)
    if not open_groups:
        gid = partition.next_group_id()
        group = Group(group_id=gid, members={device}, gc=device)
        partition.groups[gid] = group
        return group
    gcs = np.array([g.gc for g in open_groups])
    losses = csi.estimated_loss(np.full(len(gcs), device), gcs)
    best = min(range(len(open_groups)), key=lambda i: (float(losses[i]), open_groups[i].group_id))
    group = open_groups[best]
    group.members.add(device)
    group.gc = select_gc(group.members, csi, history, snr_threshold)
    return group


def group_leave(
    device: int,
    partition: Partition,
    csi: CsiTable,
    history: GcHistory,
    snr_threshold: float = DEFAULT_SNR_THRESHOLD,
) -> Group | None:
    """Detach a device from its group; reselect the coordinator if it led.

    Returns the surviving group (None when the group dissolved or the device
    was not found). An unknown device is a warning-level no-op.
    """
    group = partition.group_of(device)
    if group is None:
        log.warning("group_leave: device %d is not in any group", device)
        return None
    group.members.discard(device)
    partition.unclustered.add(device)
    if not group.members:
        del partition.groups[group.group_id]
        return None
    if group.gc == device:
        group.gc = select_gc(group.members, csi, history, snr_threshold)
    return group
