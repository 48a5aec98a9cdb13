"""Grouped-uplink MAC protocol: the aggregated frame codec, the six-phase
transmission cycle of a sensor group, and D2D exception handling.

A cycle walks DA -> RA -> AUT -> G -> ADT -> DD. Member payloads collected
over D2D during DA ride one aggregated uplink packet sent right after the
coordinator's RACH grant; acknowledgments and group-management commands ride
the aggregated downlink packet and are distributed over D2D during DD. All
group signaling is embedded in those two packets, so a healthy group costs
exactly one RACH request per cycle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

from . import clustering
from .channel import CsiTable
from .clustering import GcHistory, Group, Partition

# --- signaling vocabulary ---------------------------------------------------

LEAVE_REQUEST = "leave_request"
LINK_REPORT = "link_report"
JOIN_REQUEST = "join_request"
ACK = "ack"
UPDATE_COMMAND = "update_command"
JOIN_COMMAND = "join_command"

KIND_CODES = {
    LEAVE_REQUEST: 1,
    LINK_REPORT: 2,
    JOIN_REQUEST: 3,
    ACK: 4,
    UPDATE_COMMAND: 5,
    JOIN_COMMAND: 6,
}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}

UPLINK_KINDS = frozenset({LEAVE_REQUEST, LINK_REPORT, JOIN_REQUEST})
DOWNLINK_KINDS = frozenset({ACK, UPDATE_COMMAND, JOIN_COMMAND})

UPLINK = 0
DOWNLINK = 1

HEADER = struct.Struct(">IIBHH")   # group_id, cycle_seq, direction, n_sig, n_data
SIG_HEAD = struct.Struct(">BIH")   # kind, subject, detail_len
DATA_HEAD = struct.Struct(">IH")   # device, payload_len
HEADER_LEN = HEADER.size           # 13 bytes

_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF


@dataclass(frozen=True)
class SignalingMessage:
    kind: str
    subject: int
    detail: bytes = b""


@dataclass(frozen=True)
class AggregatedFrame:
    group_id: int
    cycle_seq: int
    direction: int
    signaling: tuple[SignalingMessage, ...] = ()
    data: tuple[tuple[int, bytes], ...] = ()  # (device id, payload)

    def byte_length(self) -> int:
        n = HEADER_LEN
        n += sum(SIG_HEAD.size + len(m.detail) for m in self.signaling)
        n += sum(DATA_HEAD.size + len(p) for _, p in self.data)
        return n

    def signaling_bytes(self) -> int:
        return sum(SIG_HEAD.size + len(m.detail) for m in self.signaling)

    def data_bytes(self) -> int:
        return sum(DATA_HEAD.size + len(p) for _, p in self.data)


class ProtocolError(RuntimeError):
    """A state-machine rule was violated (a bug, not a radio condition)."""


class ParseError(ValueError):
    """Frame bytes rejected; `offset` points at the offending position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


def _check_u32(value: int, what: str) -> int:
    if not 0 <= value <= _U32_MAX:
        raise ValueError(f"{what} out of 32-bit range: {value}")
    return value


def encode_frame(frame: AggregatedFrame) -> bytes:
    """Serialize; all multi-byte fields big-endian, segments length-prefixed."""
    if frame.direction not in (UPLINK, DOWNLINK):
        raise ValueError(f"invalid direction {frame.direction}")
    allowed = UPLINK_KINDS if frame.direction == UPLINK else DOWNLINK_KINDS
    out = bytearray(
        HEADER.pack(
            _check_u32(frame.group_id, "group_id"),
            _check_u32(frame.cycle_seq, "cycle_seq"),
            frame.direction,
            len(frame.signaling),
            len(frame.data),
        )
    )
    for msg in frame.signaling:
        if msg.kind not in allowed:
            raise ValueError(f"kind {msg.kind} not allowed on this direction")
        if len(msg.detail) > _U16_MAX:
            raise ValueError("signaling detail too long")
        out += SIG_HEAD.pack(KIND_CODES[msg.kind], _check_u32(msg.subject, "subject"), len(msg.detail))
        out += msg.detail
    for device, payload in frame.data:
        if len(payload) > _U16_MAX:
            raise ValueError("payload too long")
        out += DATA_HEAD.pack(_check_u32(device, "device"), len(payload))
        out += payload
    return bytes(out)


def parse_frame(data: bytes) -> AggregatedFrame:
    """Exact inverse of `encode_frame`; trailing bytes are rejected."""
    if len(data) < HEADER_LEN:
        raise ParseError("header incomplete", len(data))
    group_id, cycle_seq, direction, n_sig, n_data = HEADER.unpack_from(data, 0)
    if direction not in (UPLINK, DOWNLINK):
        raise ParseError(f"unknown direction byte {direction}", 8)
    allowed = UPLINK_KINDS if direction == UPLINK else DOWNLINK_KINDS
    pos = HEADER_LEN
    signaling = []
    for _ in range(n_sig):
        if pos + SIG_HEAD.size > len(data):
            raise ParseError("signaling record truncated", pos)
        code, subject, detail_len = SIG_HEAD.unpack_from(data, pos)
        kind = CODE_KINDS.get(code)
        if kind is None:
            raise ParseError(f"unknown signaling kind byte {code}", pos)
        if kind not in allowed:
            raise ParseError(f"kind {kind} not allowed on this direction", pos)
        pos += SIG_HEAD.size
        if pos + detail_len > len(data):
            raise ParseError("signaling detail truncated", pos)
        signaling.append(SignalingMessage(kind, subject, bytes(data[pos : pos + detail_len])))
        pos += detail_len
    records = []
    for _ in range(n_data):
        if pos + DATA_HEAD.size > len(data):
            raise ParseError("data record truncated", pos)
        device, payload_len = DATA_HEAD.unpack_from(data, pos)
        pos += DATA_HEAD.size
        if pos + payload_len > len(data):
            raise ParseError("payload truncated", pos)
        records.append((device, bytes(data[pos : pos + payload_len])))
        pos += payload_len
    if pos != len(data):
        raise ParseError("trailing bytes beyond declared lengths", pos)
    return AggregatedFrame(group_id, cycle_seq, direction, tuple(signaling), tuple(records))


# --- cycle state machine ----------------------------------------------------

DA, RA, AUT, G, ADT, DD = "DA", "RA", "AUT", "G", "ADT", "DD"
PHASE_ORDER = (DA, RA, AUT, G, ADT, DD)

IDLE, CONTENDING, GRANTED = "idle", "contending", "granted"


@dataclass(frozen=True)
class ProtocolConfig:
    da_duration: float = 0.040
    ra_slot: float = 0.005       # one RACH slot; repeated while the GC stalls
    aut_duration: float = 0.010
    guard_duration: float = 0.005
    adt_duration: float = 0.010
    dd_duration: float = 0.040
    cycle_interval: float = 0.5  # spacing between cycle starts of one group
    miss_threshold: int = 2      # consecutive silent cycles before a report
    fallback_cycles: int = 3     # unserved cycles before direct RA fallback

    def __post_init__(self):
        for name in ("da_duration", "ra_slot", "aut_duration", "guard_duration",
                     "adt_duration", "dd_duration", "cycle_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.miss_threshold < 1 or self.fallback_cycles < 1:
            raise ValueError("miss_threshold and fallback_cycles must be >= 1")
        nominal = (self.da_duration + self.ra_slot + self.aut_duration
                   + self.guard_duration + self.adt_duration + self.dd_duration)
        if nominal > self.cycle_interval:
            raise ValueError("cycle_interval shorter than the six phases")


@dataclass
class StagedPayload:
    device: int
    payload: bytes
    request_epoch: float


@dataclass
class GroupCycleState:
    group_id: int
    gc: int
    members: tuple[int, ...]             # snapshot taken at cycle start
    cycle_seq: int = 0
    phase: str = DA
    phase_deadline: float = 0.0
    ra_state: str = IDLE
    aggregated_uplink: list[StagedPayload] = field(default_factory=list)
    pending_signaling: list[SignalingMessage] = field(default_factory=list)
    miss_counts: dict[int, int] = field(default_factory=dict)


# events handed to advance_cycle
@dataclass(frozen=True)
class GmDelivery:
    """Outcome of one member's D2D uplink transfer during DA."""
    device: int
    payload: bytes
    request_epoch: float
    delivered: bool


@dataclass(frozen=True)
class RaGranted:
    grant_epoch: float


@dataclass(frozen=True)
class DownlinkReceived:
    frame: AggregatedFrame


# actions returned to the engine
@dataclass(frozen=True)
class EnqueueRaAttempt:
    requester: int


@dataclass(frozen=True)
class UplinkFrameSent:
    frame: AggregatedFrame


@dataclass(frozen=True)
class GuardReserved:
    duration: float


@dataclass(frozen=True)
class DistributeDownlink:
    frame: AggregatedFrame


@dataclass(frozen=True)
class CycleComplete:
    cycle_seq: int


def start_cycle(state: GroupCycleState, start_epoch: float, config: ProtocolConfig,
                gc: int, members: tuple[int, ...]) -> GroupCycleState:
    """Open the DA phase of the next cycle with a fresh membership snapshot."""
    state.gc = gc
    state.members = members
    state.phase = DA
    state.phase_deadline = start_epoch + config.da_duration
    state.ra_state = IDLE
    state.aggregated_uplink = []
    return state


def detect_d2d_exception(
    expected: set[int],
    received: set[int],
    miss_counts: dict[int, int],
    threshold: int,
) -> list[SignalingMessage]:
    """Update consecutive-miss counters; report members hitting the threshold.

    A report is emitted exactly once, in the cycle the counter reaches the
    threshold; a successful receipt resets the member's counter.
    """
    unexpected = received - expected
    if unexpected:
        raise ValueError(f"receipts from devices never expected: {sorted(unexpected)}")
    reports = []
    for device in sorted(received):
        miss_counts.pop(device, None)
    for device in sorted(expected - received):
        count = miss_counts.get(device, 0) + 1
        miss_counts[device] = count
        if count == threshold:
            reports.append(SignalingMessage(
                LINK_REPORT, device, struct.pack(">H", count)))
    return reports


def build_uplink_frame(state: GroupCycleState) -> AggregatedFrame:
    """Aggregated uplink packet: data ascending by device id, then signaling."""
    if state.phase != AUT:
        raise ProtocolError(f"uplink frame built outside AUT (phase {state.phase})")
    if state.ra_state != GRANTED:
        raise ProtocolError("uplink frame built without a RACH grant")
    data = tuple(
        (item.device, item.payload)
        for item in sorted(state.aggregated_uplink, key=lambda it: it.device)
    )
    return AggregatedFrame(
        group_id=state.group_id,
        cycle_seq=state.cycle_seq,
        direction=UPLINK,
        signaling=tuple(state.pending_signaling),
        data=data,
    )


def build_downlink_frame(
    group_id: int,
    cycle_seq: int,
    acks: list[SignalingMessage],
    commands: list[SignalingMessage],
    payloads: list[tuple[int, bytes]],
) -> AggregatedFrame:
    """Aggregated downlink packet mirroring the uplink layout."""
    for msg in acks + commands:
        if msg.kind not in DOWNLINK_KINDS:
            raise ValueError(f"{msg.kind} cannot ride a downlink frame")
    return AggregatedFrame(
        group_id=group_id,
        cycle_seq=cycle_seq,
        direction=DOWNLINK,
        signaling=tuple(acks) + tuple(commands),
        data=tuple(sorted(payloads)),
    )


def advance_cycle(
    state: GroupCycleState,
    now: float,
    events: list[object],
    config: ProtocolConfig,
    miss_threshold: int | None = None,
) -> tuple[GroupCycleState, list[object]]:
    """Drive one group's cycle forward; returns follow-up actions.

    The engine calls this at phase deadlines (DA, AUT, G, ADT, DD) and on RA
    events. Phases only ever advance in protocol order; the RA phase is the
    only one allowed to stall, and it stalls by repeating RACH slots.
    """
    threshold = config.miss_threshold if miss_threshold is None else miss_threshold
    actions: list[object] = []
    phase = state.phase

    if phase == DA:
        if now < state.phase_deadline:
            raise ProtocolError("DA closed before its deadline")
        received = set()
        expected = set()
        for ev in events:
            if not isinstance(ev, GmDelivery):
                raise ProtocolError(f"unexpected event in DA: {ev!r}")
            expected.add(ev.device)
            if ev.delivered:
                received.add(ev.device)
                state.aggregated_uplink.append(
                    StagedPayload(ev.device, ev.payload, ev.request_epoch))
        reports = detect_d2d_exception(expected, received, state.miss_counts, threshold)
        state.pending_signaling.extend(reports)
        state.phase = RA
        state.ra_state = CONTENDING
        state.phase_deadline = now + config.ra_slot
        actions.append(EnqueueRaAttempt(requester=state.gc))

    elif phase == RA:
        grant = next((ev for ev in events if isinstance(ev, RaGranted)), None)
        if grant is None:
            # collision: stall in RA for another slot; the engine re-enqueues
            state.phase_deadline = now + config.ra_slot
        else:
            state.ra_state = GRANTED
            state.phase = AUT
            state.phase_deadline = grant.grant_epoch + config.aut_duration
            actions.append(UplinkFrameSent(build_uplink_frame(state)))

    elif phase == AUT:
        if state.ra_state != GRANTED:
            raise ProtocolError("AUT reached without a grant")
        state.aggregated_uplink = []
        state.pending_signaling = []
        state.phase = G
        state.phase_deadline = now + config.guard_duration
        actions.append(GuardReserved(config.guard_duration))

    elif phase == G:
        state.phase = ADT
        state.phase_deadline = now + config.adt_duration

    elif phase == ADT:
        if state.ra_state != GRANTED:
            raise ProtocolError("ADT reached without a grant")
        received = next((ev for ev in events if isinstance(ev, DownlinkReceived)), None)
        state.phase = DD
        state.phase_deadline = now + config.dd_duration
        if received is not None:
            actions.append(DistributeDownlink(received.frame))

    elif phase == DD:
        actions.append(CycleComplete(state.cycle_seq))
        state.cycle_seq += 1
        state.phase = DA
        state.ra_state = IDLE

    else:  # pragma: no cover - phase values are closed
        raise ProtocolError(f"unknown phase {phase}")

    return state, actions


def handle_exception_command(
    partition: Partition,
    command: SignalingMessage,
    csi: CsiTable,
    history: GcHistory,
    max_size: int,
    snr_threshold: float = clustering.DEFAULT_SNR_THRESHOLD,
) -> list[SignalingMessage]:
    """BS-side reaction to a link report: move the subject to a better group.

    The subject leaves its current group (coordinator reselected when it
    led), rejoins the nearest eligible group by estimated loss, and the
    returned join command is due for delivery in the new group's next
    downlink. Unknown subjects are logged upstream and ignored here.
    """
    if command.kind not in (LINK_REPORT, LEAVE_REQUEST, UPDATE_COMMAND):
        raise ValueError(f"not an exception trigger: {command.kind}")
    device = command.subject
    if partition.group_of(device) is None and device not in partition.unclustered:
        return []
    if device not in partition.unclustered:
        clustering.group_leave(device, partition, csi, history, snr_threshold)
    target = clustering.group_join(device, partition, csi, history, max_size, snr_threshold)
    return [
        SignalingMessage(ACK, device),
        SignalingMessage(JOIN_COMMAND, device, struct.pack(">I", target.group_id)),
    ]
