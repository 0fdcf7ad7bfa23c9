"""Platoon management state machine and the plan activation exchange."""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .protocol import Bus, BusConfig, MessageKind, PlatoonTopology, V2VMessage, V2VPayload

log = logging.getLogger(__name__)


class FsmState(str, enum.Enum):
    READY = "Ready"
    PLAN_PROPOSED = "PlanProposed"
    PLAN_ACTIVE = "PlanActive"
    PLAN_CANCEL = "PlanCancel"


class FsmEvent(str, enum.Enum):
    START_REQUEST = "StartRequest"
    PLAN_RECEIVED = "PlanReceived"
    ACK = "Ack"
    ALL_ACKED = "AllAcked"
    TIMEOUT = "Timeout"
    REJECT = "Reject"
    MANUAL_CANCEL = "ManualCancel"
    UNSAFE_CONDITION = "UnsafeCondition"
    CANCEL_WAIT_OVER = "CancelWaitOver"


S, E = FsmState, FsmEvent
TRANSITIONS: Dict[Tuple[FsmState, FsmEvent], FsmState] = {
    (S.READY, E.START_REQUEST): S.PLAN_PROPOSED,
    (S.READY, E.PLAN_RECEIVED): S.PLAN_PROPOSED,
    (S.PLAN_PROPOSED, E.ACK): S.PLAN_PROPOSED,
    (S.PLAN_PROPOSED, E.ALL_ACKED): S.PLAN_ACTIVE,
    (S.PLAN_PROPOSED, E.TIMEOUT): S.READY,
    (S.PLAN_PROPOSED, E.REJECT): S.READY,
    (S.PLAN_PROPOSED, E.MANUAL_CANCEL): S.PLAN_CANCEL,
    (S.PLAN_ACTIVE, E.TIMEOUT): S.PLAN_CANCEL,
    (S.PLAN_ACTIVE, E.UNSAFE_CONDITION): S.PLAN_CANCEL,
    (S.PLAN_CANCEL, E.CANCEL_WAIT_OVER): S.READY,
}
del S, E


def is_defined(state: FsmState, event: FsmEvent) -> bool:
    return (FsmState(state), FsmEvent(event)) in TRANSITIONS


def fsm_transition(state: FsmState, event: FsmEvent) -> FsmState:
    """Next state; pairs without an edge leave the state unchanged."""
    state, event = FsmState(state), FsmEvent(event)
    nxt = TRANSITIONS.get((state, event))
    if nxt is None:
        log.debug("no transition for (%s, %s); ignored", state.value, event.value)
        return state
    return nxt


class UnsafeCondition(enum.IntEnum):
    INCORRECT_ORDERING = 1
    MESSAGE_TIMEOUT = 2
    PEDAL_TAP = 3
    FRONT_OUT_OF_RANGE = 4
    VELOCITY_BOUND = 5


@dataclass
class VehicleView:
    """What one vehicle knows when checking whether the plan is still safe."""

    expected_order: Tuple = ()
    observed_order: Tuple = ()
    message_ages: Dict[str, int] = field(default_factory=dict)
    timeout_steps: int = 5
    pedal_tap: bool = False
    is_leader: bool = False
    radar_headway_m: Optional[float] = None
    radar_range_threshold_m: float = 100.0
    velocity_m_s: float = 0.0
    v_min_m_s: float = 0.0
    v_max_m_s: float = 20.0
    velocity_tol_m_s: float = 0.5


def unsafe_condition_check(view: VehicleView) -> Optional[UnsafeCondition]:
    """First violated plan condition in fixed priority order, or None."""
    if tuple(view.expected_order) != tuple(view.observed_order):
        return UnsafeCondition.INCORRECT_ORDERING
    if any(age > view.timeout_steps for age in view.message_ages.values()):
        return UnsafeCondition.MESSAGE_TIMEOUT
    if view.pedal_tap:
        return UnsafeCondition.PEDAL_TAP
    if not view.is_leader and (view.radar_headway_m is None
                               or view.radar_headway_m > view.radar_range_threshold_m):
        return UnsafeCondition.FRONT_OUT_OF_RANGE
    tol = view.velocity_tol_m_s
    if not view.v_min_m_s - tol <= view.velocity_m_s <= view.v_max_m_s + tol:
        return UnsafeCondition.VELOCITY_BOUND
    return None


@dataclass
class PlatoonPlan:
    plan_id: int
    ordered_vehicle_ids: Tuple
    desired_gap_m: float = 6.0
    desired_speed_m_s: float = 15.0

    def __post_init__(self):
        self.ordered_vehicle_ids = tuple(self.ordered_vehicle_ids)
        if len(set(self.ordered_vehicle_ids)) != len(self.ordered_vehicle_ids):
            raise ValueError("vehicle ids in a plan must be unique")
        if not self.ordered_vehicle_ids:
            raise ValueError("plan needs at least one vehicle")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ordered_vehicle_ids"] = list(self.ordered_vehicle_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlatoonPlan":
        return cls(**d)


@dataclass
class TransitionRecord:
    tick: int
    vehicle: int
    from_state: str
    to_state: str
    event: str


class VehicleFsm:
    """One vehicle's state machine with the cancel-wait timer."""

    def __init__(self, vehicle: int, cancel_wait_ticks: int = 20,
                 state: FsmState = FsmState.READY):
        self.vehicle = vehicle
        self.state = FsmState(state)
        self.cancel_wait_ticks = cancel_wait_ticks
        self._cancel_since: Optional[int] = None
        self.log: List[TransitionRecord] = []

    def handle(self, event: FsmEvent, tick: int) -> FsmState:
        old = self.state
        new = fsm_transition(old, event)
        self.log.append(TransitionRecord(tick, self.vehicle, old.value, new.value,
                                         FsmEvent(event).value))
        self.state = new
        if new == FsmState.PLAN_CANCEL and old != FsmState.PLAN_CANCEL:
            self._cancel_since = tick
        return new

    def tick(self, tick: int) -> None:
        """Advance timers; fires the cancel-wait event when it expires."""
        if (self.state == FsmState.PLAN_CANCEL and self._cancel_since is not None
                and tick - self._cancel_since >= self.cancel_wait_ticks):
            self._cancel_since = None
            self.handle(FsmEvent.CANCEL_WAIT_OVER, tick)

    @property
    def active(self) -> bool:
        return self.state == FsmState.PLAN_ACTIVE


@dataclass(frozen=True)
class AckCriteria:
    min_gap_m: float = 2.0
    max_gap_m: float = 100.0
    max_speed_diff_m_s: float = 3.0

    def accepts(self, gap_m: Optional[float], speed_m_s: float, front_speed_m_s: float) -> bool:
        if gap_m is None or not self.min_gap_m <= gap_m <= self.max_gap_m:
            return False
        return abs(speed_m_s - front_speed_m_s) < self.max_speed_diff_m_s


@dataclass
class SensorView:
    """Follower's own sensing used to validate a proposed plan."""

    gap_m: Optional[float]
    speed_m_s: float
    front_speed_m_s: float


class ActivationRound:
    """Proposal, acknowledgement and joint activation over a message bus.

    Index 0 is the leader.  Timeline with bus delay ``d = max(latency, 1)``:
    the proposal goes out at the start tick, acks come back ``2d`` later, and
    the leader then announces an activation step ``d`` ticks ahead so every
    vehicle switches at the same tick.
    """

    def __init__(self, fsms: Sequence[VehicleFsm], plan: PlatoonPlan,
                 criteria: AckCriteria = AckCriteria(), proposal_timeout_steps: int = 20,
                 latency_steps: int = 0):
        self.fsms = list(fsms)
        self.plan = plan
        self.criteria = criteria
        self.timeout = proposal_timeout_steps
        self.delay = max(latency_steps, 1)
        self.start_tick: Optional[int] = None
        self.activation_tick: Optional[int] = None
        self.acks: Dict[int, bool] = {}
        self.done = False
        self.success = False
        self.rejected_by: List[int] = []

    def start(self, tick: int, post) -> None:
        if any(f.state != FsmState.READY for f in self.fsms):
            raise ValueError("all vehicles must be Ready to start a plan")
        self.start_tick = tick
        self.fsms[0].handle(FsmEvent.START_REQUEST, tick)
        if len(self.fsms) == 1:
            self.activation_tick = tick
            return
        post(V2VMessage(0, MessageKind.PLAN, tick, V2VPayload(plan=self.plan.to_dict())), tick)

    def process(self, tick: int, inboxes: Dict[int, List[V2VMessage]], post,
                sensors: Optional[Dict[int, SensorView]] = None) -> None:
        """Handle coordination messages delivered at ``tick``."""
        if self.start_tick is None:
            return
        n = len(self.fsms)
        leader = self.fsms[0]
        for i in range(1, n):
            fsm = self.fsms[i]
            for m in inboxes.get(i, []):
                if m.kind != MessageKind.PLAN or m.sender_id != 0:
                    continue
                p = m.payload
                if p.ack is False:
                    fsm.handle(FsmEvent.REJECT, tick)
                elif p.plan is not None and p.activation_step is None and not self.done:
                    fsm.handle(FsmEvent.PLAN_RECEIVED, tick)
                    sv = (sensors or {}).get(i)
                    ok = True if sv is None else self.criteria.accepts(
                        sv.gap_m, sv.speed_m_s, sv.front_speed_m_s)
                    post(V2VMessage(i, MessageKind.ACK, tick, V2VPayload(ack=ok)), tick)
                    if ok:
                        fsm.handle(FsmEvent.ACK, tick)
        if self.done:
            return
        for m in inboxes.get(0, []):
            if m.kind == MessageKind.ACK and leader.state == FsmState.PLAN_PROPOSED:
                self.acks[m.sender_id] = bool(m.payload.ack)
                if m.payload.ack:
                    leader.handle(FsmEvent.ACK, tick)
        if leader.state == FsmState.PLAN_PROPOSED and self.activation_tick is None:
            if any(v is False for v in self.acks.values()):
                self.rejected_by = sorted(k for k, v in self.acks.items() if not v)
                leader.handle(FsmEvent.REJECT, tick)
                post(V2VMessage(0, MessageKind.PLAN, tick, V2VPayload(ack=False)), tick)
                self._finish(False, tick)
            elif len(self.acks) == n - 1:
                # followers learn the activation step before it arrives
                self.activation_tick = tick + self.delay
                post(V2VMessage(0, MessageKind.PLAN, tick,
                                V2VPayload(plan=self.plan.to_dict(),
                                           activation_step=self.activation_tick)), tick)
            elif tick - self.start_tick > self.timeout:
                leader.handle(FsmEvent.TIMEOUT, tick)
                for f in self.fsms[1:]:
                    if f.state == FsmState.PLAN_PROPOSED:
                        f.handle(FsmEvent.TIMEOUT, tick)
                self._finish(False, tick)
        if self.activation_tick is not None and tick >= self.activation_tick:
            for f in self.fsms:
                if f.state == FsmState.PLAN_PROPOSED:
                    f.handle(FsmEvent.ALL_ACKED, tick)
            self._finish(all(f.active for f in self.fsms), tick)

    def _finish(self, success: bool, tick: int) -> None:
        self.done = True
        self.success = success
        if not success:
            self.activation_tick = None
            log.info("plan %s not activated at tick %d", self.plan.plan_id, tick)


@dataclass
class ActivationResult:
    success: bool
    activation_tick: Optional[int]
    log: List[TransitionRecord]
    rejected_by: List[int]
    states: List[FsmState]


def platoon_activation_round(fsms: Sequence[VehicleFsm], plan: PlatoonPlan,
                             sensors: Optional[Dict[int, SensorView]] = None,
                             start_tick: int = 0, bus_config: Optional[BusConfig] = None,
                             criteria: AckCriteria = AckCriteria(),
                             proposal_timeout_steps: int = 20,
                             max_ticks: int = 200) -> ActivationResult:
    """Run a standalone proposal/ack/activation exchange on a private bus."""
    bus_config = bus_config or BusConfig()
    bus = Bus(PlatoonTopology(len(fsms)), bus_config)
    rnd = ActivationRound(fsms, plan, criteria, proposal_timeout_steps, bus_config.latency_steps)
    rnd.start(start_tick, bus.post)
    tick = start_tick
    while (not rnd.done or bus.pending()) and tick - start_tick <= max_ticks:
        rnd.process(tick, bus.deliver(tick), bus.post, sensors)
        tick += 1
    records = sorted((r for f in fsms for r in f.log), key=lambda r: (r.tick, r.vehicle))
    return ActivationResult(rnd.success, rnd.activation_tick, records, rnd.rejected_by,
                            [f.state for f in fsms])
