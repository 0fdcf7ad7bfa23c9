"""V2V / V2I message set and a simulated message bus.

Timestamps are integer simulation steps.  A message posted at step ``k`` on a
link with latency ``l`` becomes deliverable at step ``k + l``; the engine
polls :meth:`Bus.deliver` before controllers run, so with the default
engine ordering a latency-0 message is consumed on the following tick.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

log = logging.getLogger(__name__)


class Phase(str, enum.Enum):
    RED = "red"
    YELLOW = "yellow"
    GREEN = "green"


class MessageKind(str, enum.Enum):
    FORECAST = "forecast"   # velocity forecast, leader -> all, each -> successor
    GPS = "gps"             # rear vehicle position -> leader
    RADAR = "radar"         # follower radar -> downstream followers
    STATUS = "status"       # fsm state broadcast
    PLAN = "plan"           # leader proposal / activation / reject -> followers
    ACK = "ack"             # follower answer -> leader


# deterministic delivery order for kinds sent by the same vehicle
_KIND_ORDER = {k: i for i, k in enumerate(MessageKind)}


@dataclass
class V2VPayload:
    velocity_forecast: Optional[List[float]] = None
    radar_headway_m: Optional[float] = None
    gps_position_m: Optional[float] = None
    velocity_m_s: Optional[float] = None
    plan_status: int = 0
    fsm_state: Optional[str] = None
    # coordination extras (plan proposal / ack)
    plan: Optional[dict] = None
    ack: Optional[bool] = None
    activation_step: Optional[int] = None


@dataclass
class V2VMessage:
    sender_id: int          # index in the platoon, 0 = leader
    kind: MessageKind
    timestamp_step: int
    payload: V2VPayload = field(default_factory=V2VPayload)
    platoon_size: int = 1

    @property
    def sender_role(self) -> str:
        if self.sender_id == 0:
            return "leader"
        if self.sender_id == self.platoon_size - 1:
            return "rear"
        return f"follower{self.sender_id}"

    def to_record(self) -> dict:
        return {"sender_id": self.sender_id, "sender_role": self.sender_role,
                "kind": MessageKind(self.kind).value, "timestamp_step": self.timestamp_step,
                "payload": asdict(self.payload)}

    @classmethod
    def from_record(cls, rec: dict, platoon_size: int = 1) -> "V2VMessage":
        return cls(rec["sender_id"], MessageKind(rec["kind"]), rec["timestamp_step"],
                   V2VPayload(**rec["payload"]), platoon_size)


@dataclass
class SpatMessage:
    light_id: int
    phase: Phase
    time_remaining_s: float
    stopbar_position_m: float
    intersection_length_m: float


@dataclass(frozen=True)
class PlatoonTopology:
    size: int

    def recipients(self, sender: int, kind: MessageKind) -> List[int]:
        n = self.size
        kind = MessageKind(kind)
        if kind == MessageKind.FORECAST:
            if sender == 0:
                return list(range(1, n))
            return [sender + 1] if sender + 1 < n else []
        if kind == MessageKind.GPS:
            return [0] if n > 1 and sender == n - 1 else []
        if kind == MessageKind.RADAR:
            return list(range(sender + 1, n)) if sender >= 1 else []
        if kind == MessageKind.STATUS:
            return [j for j in range(n) if j != sender]
        if kind == MessageKind.PLAN:
            return list(range(1, n)) if sender == 0 else []
        if kind == MessageKind.ACK:
            return [0] if sender >= 1 else []
        raise ValueError(f"unknown message kind {kind!r}")


def route(message: V2VMessage, topology: PlatoonTopology) -> List[int]:
    """Recipients of ``message`` under the platoon's V2V flow graph."""
    if not 0 <= message.sender_id < topology.size:
        log.warning("dropping message from unknown sender %r", message.sender_id)
        return []
    return topology.recipients(message.sender_id, message.kind)


@dataclass
class BusConfig:
    latency_steps: int = 0
    # optional per-link overrides: (sender, receiver) -> latency
    link_latency: Dict[Tuple[int, int], int] = field(default_factory=dict)
    # packet-loss hook: return True to drop (sender, receiver, message, tick)
    drop: Optional[Callable[[int, int, V2VMessage, int], bool]] = None

    def __post_init__(self):
        if self.latency_steps < 0 or any(v < 0 for v in self.link_latency.values()):
            raise ValueError("latency must be nonnegative")

    def latency(self, sender: int, receiver: int) -> int:
        return self.link_latency.get((sender, receiver), self.latency_steps)


class Bus:
    """FIFO-per-link message bus owned by the simulation engine."""

    def __init__(self, topology: PlatoonTopology, config: Optional[BusConfig] = None,
                 record: bool = False):
        self.topology = topology
        self.config = config or BusConfig()
        self._links: Dict[Tuple[int, int], deque] = defaultdict(deque)
        self._last_tick = -1
        self.record = record
        self.trace: List[dict] = []
        self.sent = 0
        self.delivered = 0

    def post(self, message: V2VMessage, tick: int) -> List[int]:
        message.platoon_size = self.topology.size
        receivers = route(message, self.topology)
        for r in receivers:
            if self.config.drop is not None and self.config.drop(message.sender_id, r, message, tick):
                continue
            due = tick + self.config.latency(message.sender_id, r)
            self._links[(message.sender_id, r)].append((due, tick, message))
            self.sent += 1
        return receivers

    def deliver(self, tick: int) -> Dict[int, List[V2VMessage]]:
        """Messages due by ``tick``, grouped per receiver, ordered by sender then kind."""
        if tick < self._last_tick:
            raise ValueError("deliver() ticks must be monotone")
        self._last_tick = tick
        out: Dict[int, List[V2VMessage]] = defaultdict(list)
        for (sender, receiver) in sorted(self._links):
            q = self._links[(sender, receiver)]
            while q and q[0][0] <= tick:
                _, sent_at, msg = q.popleft()
                out[receiver].append(msg)
                self.delivered += 1
                if self.record:
                    rec = msg.to_record()
                    rec.update(receiver=receiver, sent_step=sent_at, delivered_step=tick)
                    self.trace.append(rec)
        for msgs in out.values():
            msgs.sort(key=lambda m: (m.sender_id, _KIND_ORDER[MessageKind(m.kind)]))
        return dict(out)

    def pending(self) -> int:
        return sum(len(q) for q in self._links.values())

    def export_ndjson(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_ndjson(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class Mailbox:
    """Latest message per (sender, kind) for one receiving vehicle."""

    def __init__(self, start_tick: int = 0):
        self.latest: Dict[Tuple[int, MessageKind], V2VMessage] = {}
        self.received_at: Dict[Tuple[int, MessageKind], int] = {}
        self.start_tick = start_tick

    def accept(self, messages: Sequence[V2VMessage], tick: int) -> None:
        for m in messages:
            key = (m.sender_id, MessageKind(m.kind))
            self.latest[key] = m
            self.received_at[key] = tick

    def get(self, sender: int, kind: MessageKind) -> Optional[V2VMessage]:
        return self.latest.get((sender, MessageKind(kind)))

    def staleness(self, sender: int, kind: MessageKind, tick: int) -> Optional[int]:
        m = self.get(sender, kind)
        return None if m is None else tick - m.timestamp_step

    def age(self, sender: int, kind: MessageKind, tick: int) -> int:
        """Steps since a message of this kind last arrived (or since ``start_tick``)."""
        last = self.received_at.get((sender, MessageKind(kind)), self.start_tick)
        return tick - max(last, self.start_tick)

    def reset_clock(self, tick: int) -> None:
        self.start_tick = tick


def light_phase(red_s: float, yellow_s: float, green_s: float, offset_s: float,
                t_s: float) -> Tuple[Phase, float]:
    """Phase and time remaining for a red -> green -> yellow cycle.

    A phase includes its start instant, so at an exact boundary the new phase
    is reported with its full duration remaining.
    """
    cycle = red_s + yellow_s + green_s
    local = round((t_s - offset_s) % cycle, 9)
    if local >= cycle:
        local = 0.0
    if local < red_s:
        return Phase.RED, red_s - local
    if local < red_s + green_s:
        return Phase.GREEN, red_s + green_s - local
    return Phase.YELLOW, cycle - local


def spat_from_light(light, ego_position_m: float, tick: int, dt_s: float = 0.1) -> Optional[SpatMessage]:
    """SPaT broadcast received by a vehicle at ``ego_position_m``, or None out of range."""
    if abs(light.position_m - ego_position_m) > light.comm_range_m:
        return None
    t = round(tick * dt_s, 9)
    phase, remaining = light.phase_at(t)
    remaining = max(0.0, remaining + light.prediction_error(t))
    return SpatMessage(light.light_id, phase, remaining, light.position_m, light.intersection_length_m)
