"""Discrete-time multi-hop network environment.

One world holds every node of one network. Time advances in 1 s ticks across
a working day; decision epochs fire at tick boundaries, while transmission
completions and battery depletions are resolved at exact fractional times
inside the tick so energy books stay exact.

Per tick and node the engine:
  * fires a decision epoch when the radio is free, the queue is non-empty,
    and residual energy exceeds the latched threshold fraction (gated nodes
    re-poll on a fixed period so the agent can revise the threshold);
  * integrates energy for the concurrent activities (sensing runs alongside
    the radio; the radio is transmitting, receiving, or asleep);
  * accrues sensed bits and packetizes them at a per-node drawn size.

A node whose store hits zero mid-tick is stunned for the rest of that tick:
its outgoing transmission aborts, ongoing receptions fail, and sensing stops
until the next tick boundary.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import json

import numpy as np

from . import events as ev
from .energy import EnergyState, HarvestTrace, PowerProfile, generate_synthetic_trace
from .events import StepEvent
from .topology import RateModel, Topology, transmission_rate

N_SLOTS = 16               # self + up to 15 peers, fixed encoding width
OBS_DIM = 3 * N_SLOTS + 1  # energies + queue fills + head-source one-hot + time
ENERGY_SLICE = slice(0, N_SLOTS)
QUEUE_SLICE = slice(N_SLOTS, 2 * N_SLOTS)
SOURCE_SLICE = slice(2 * N_SLOTS, 3 * N_SLOTS)
TIME_INDEX = 3 * N_SLOTS

_DUST = 1e-9  # residual-energy snap threshold at depletion events (joules)


class InvalidActionError(ValueError):
    """Raised when a policy picks a masked-out relay slot."""


@dataclass
class SimParams:
    tick_dt: float = 1.0
    day_start: float = 8 * 3600.0
    day_end: float = 17 * 3600.0
    process_rate: float = 80.0           # sensed bits per second
    packet_bits_min: int = 3720
    packet_bits_max: int = 5120
    queue_capacity_bits: int = 15 * 5120
    max_hops: int = 8
    expiry_s: float = 1800.0
    e_max: float = 1.0
    thresholds: tuple[float, ...] = (0.0, 0.3, 0.6, 0.9)
    reeval_period: float = 10.0


@dataclass
class Packet:
    packet_id: int
    source: int
    size_bits: int
    hops: int = 0
    elapsed_s: float = 0.0
    sensed_at: float = 0.0


class TransmitQueue:
    """FIFO packet buffer with a bit-capacity bound."""

    def __init__(self, capacity_bits: int):
        self.capacity_bits = capacity_bits
        self._packets: deque[Packet] = deque()
        self.bits = 0

    def __len__(self):
        return len(self._packets)

    def fits(self, size_bits: int) -> bool:
        return self.bits + size_bits <= self.capacity_bits

    def push(self, packet: Packet) -> None:
        if not self.fits(packet.size_bits):
            raise OverflowError("queue capacity exceeded")
        self._packets.append(packet)
        self.bits += packet.size_bits

    def head(self) -> Packet:
        return self._packets[0]

    def pop_head(self) -> Packet:
        p = self._packets.popleft()
        self.bits -= p.size_bits
        return p

    def clear(self) -> None:
        self._packets.clear()
        self.bits = 0


@dataclass
class AgentAction:
    energy_threshold_index: int
    relay_slot: int


@dataclass
class Observation:
    node: int
    t: float
    vector: np.ndarray  # (OBS_DIM,) float32, all entries in [0, 1]
    mask: np.ndarray    # (N_SLOTS,) bool, valid relay slots


@dataclass
class TransitionRecord:
    """One closed experience step for a single agent."""

    node: int
    obs: Observation
    action: AgentAction | None
    event: StepEvent
    next_obs: Observation | None
    t_action: float
    t_next: float
    terminal: bool


class _ActiveTx:
    __slots__ = ("sender", "receiver", "packet", "start", "end", "rx_active", "rx_failed")

    def __init__(self, sender, receiver, packet, start, end, rx_active):
        self.sender = sender
        self.receiver = receiver
        self.packet = packet
        self.start = start
        self.end = end
        self.rx_active = rx_active
        self.rx_failed = False


class _Node:
    """Mutable per-node simulation context (worker-confined)."""

    __slots__ = (
        "nid", "is_sink", "energy", "queue", "sense_accum", "pending_bits",
        "latch", "last_epoch_t", "tx", "rx_incoming", "stunned", "rng",
        "sensed_bits", "received_bits", "transmitted_ok_bits", "dropped_bits",
        "sense_dropped_packets", "pending_step",
    )

    def __init__(self, nid, is_sink, e_max, queue_capacity):
        self.nid = nid
        self.is_sink = is_sink
        self.energy = None if is_sink else EnergyState(e_max=e_max, e_res=e_max, e_init=e_max)
        self.queue = TransmitQueue(queue_capacity)
        self.sense_accum = 0.0
        self.pending_bits = 0
        self.latch = 0.0
        self.last_epoch_t = -np.inf
        self.tx: _ActiveTx | None = None
        self.rx_incoming: list[_ActiveTx] = []
        self.stunned = False
        self.rng = None
        self.sensed_bits = 0
        self.received_bits = 0
        self.transmitted_ok_bits = 0
        self.dropped_bits = 0
        self.sense_dropped_packets = 0
        self.pending_step = None  # [obs, action, t_epoch, event | None]

    def active_rx_count(self) -> int:
        n = 0
        for tx in self.rx_incoming:
            if tx.rx_active and not tx.rx_failed:
                n += 1
        return n


@dataclass
class EpisodeSimMetrics:
    """Raw data/energy accounting for one simulated day."""

    day: int
    sink: int
    sink_received_bits: int
    total_sensed_bits: int
    delivery_rate: float
    per_node: dict[int, dict[str, float]]
    outcome_counts: dict[str, int]
    epoch_count: int

    def conservation_errors(self) -> list[str]:
        """Per-device identity: every sensed or received bit is transmitted,
        dropped, queued, or in flight. The sink is a pure absorber."""
        errors = []
        for nid, row in self.per_node.items():
            if nid == self.sink:
                continue
            lhs = row["sensed_bits"] + row["received_bits"]
            rhs = (row["transmitted_ok_bits"] + row["dropped_bits"]
                   + row["queued_bits_end"] + row["in_flight_bits"])
            if lhs != rhs:
                errors.append(f"node {nid}: sensed+received={lhs} != out+held={rhs}")
        return errors


class World:
    """One network instance. Confine each world to a single worker."""

    def __init__(self, topology: Topology, rate_model: RateModel | None = None,
                 powers: PowerProfile | None = None, params: SimParams | None = None,
                 trace=None, seed: int = 0):
        if topology.node_count > N_SLOTS:
            raise ValueError(f"observation encoding supports at most {N_SLOTS} nodes, "
                             f"topology has {topology.node_count}")
        self.topology = topology
        self.rate_model = rate_model or RateModel()
        self.powers = powers or PowerProfile()
        self.params = params or SimParams()
        self.seed = seed
        self._trace_arg = trace
        self.sink = topology.sink

        # Fixed slot layout: slot 0 is self, slots 1.. are every other node in
        # ascending id order, so each peer occupies the same slot for a given
        # observer across the whole run.
        self.slot_of: dict[int, dict[int, int]] = {}
        self.node_at_slot: dict[int, dict[int, int]] = {}
        self.masks: dict[int, np.ndarray] = {}
        self.neighbor_slots: dict[int, list[tuple[int, int]]] = {}
        for i in sorted(topology.positions):
            others = [j for j in sorted(topology.positions) if j != i]
            s_of = {j: 1 + k for k, j in enumerate(others)}
            self.slot_of[i] = s_of
            self.node_at_slot[i] = {s: j for j, s in s_of.items()}
            mask = np.zeros(N_SLOTS, dtype=bool)
            pairs = []
            for j in topology.neighbors[i]:
                mask[s_of[j]] = True
                pairs.append((s_of[j], j))
            self.masks[i] = mask
            self.neighbor_slots[i] = sorted(pairs)

        self.rates: dict[tuple[int, int], float] = {}
        for i in sorted(topology.positions):
            for j in topology.neighbors[i]:
                self.rates[(i, j)] = transmission_rate(topology, self.rate_model, i, j)

        self.nodes: dict[int, _Node] = {
            i: _Node(i, i == self.sink, self.params.e_max, self.params.queue_capacity_bits)
            for i in sorted(topology.positions)
        }
        self.devices = [n for n in self.nodes.values() if not n.is_sink]
        self._packet_counter = 0
        self.day_index = -1
        self.trace: HarvestTrace | None = None

    # -- lifecycle ---------------------------------------------------------

    def _resolve_trace(self, day: int) -> HarvestTrace:
        arg = self._trace_arg
        if arg is None:
            return HarvestTrace(samples=generate_synthetic_trace(
                day_start=self.params.day_start, day_end=self.params.day_end))
        if callable(arg):
            return arg(day)
        return arg

    def reset(self, day: int) -> None:
        """Start a fresh day: full stores, empty queues, new RNG streams."""
        self.day_index = day
        self.trace = self._resolve_trace(day)
        for node in self.nodes.values():
            if node.energy is not None:
                node.energy.reset(self.params.e_max)
            node.queue.clear()
            node.sense_accum = 0.0
            node.latch = 0.0
            node.last_epoch_t = -np.inf
            node.tx = None
            node.rx_incoming.clear()
            node.stunned = False
            node.sensed_bits = 0
            node.received_bits = 0
            node.transmitted_ok_bits = 0
            node.dropped_bits = 0
            node.sense_dropped_packets = 0
            node.pending_step = None
            if not node.is_sink:
                node.rng = np.random.default_rng(
                    np.random.SeedSequence([self.seed, day, node.nid]))
                node.pending_bits = int(node.rng.integers(
                    self.params.packet_bits_min, self.params.packet_bits_max + 1))

    # -- observations ------------------------------------------------------

    def observe(self, nid: int, t: float) -> Observation:
        node = self.nodes[nid]
        p = self.params
        vec = np.zeros(OBS_DIM, dtype=np.float32)
        vec[0] = node.energy.e_res / p.e_max
        vec[N_SLOTS] = min(1.0, node.queue.bits / p.queue_capacity_bits)
        for slot, j in self.neighbor_slots[nid]:
            other = self.nodes[j]
            if other.is_sink:
                vec[slot] = 1.0
            else:
                vec[slot] = other.energy.e_res / p.e_max
                vec[N_SLOTS + slot] = min(1.0, other.queue.bits / p.queue_capacity_bits)
        if len(node.queue):
            vec[2 * N_SLOTS + node.queue.head().source] = 1.0
        vec[TIME_INDEX] = (t - p.day_start) / (p.day_end - p.day_start)
        return Observation(node=nid, t=t, vector=vec, mask=self.masks[nid])

    # -- sensing -----------------------------------------------------------

    def _accrue_sensing(self, node: _Node, dt: float, now: float) -> None:
        node.sense_accum += self.params.process_rate * dt
        while node.sense_accum + 1e-9 >= node.pending_bits:
            node.sense_accum -= node.pending_bits
            size = node.pending_bits
            node.pending_bits = int(node.rng.integers(
                self.params.packet_bits_min, self.params.packet_bits_max + 1))
            node.sensed_bits += size
            self._packet_counter += 1
            packet = Packet(packet_id=self._packet_counter, source=node.nid,
                            size_bits=size, hops=0, elapsed_s=0.0, sensed_at=now)
            if node.queue.fits(size):
                node.queue.push(packet)
            else:
                node.dropped_bits += size
                node.sense_dropped_packets += 1

    # -- episode loop ------------------------------------------------------

    def run_episode(self, policy=None, day: int = 0, on_event=None,
                    on_transition=None, event_log_path: str | None = None,
                    reset: bool = True) -> EpisodeSimMetrics:
        """Simulate one day. ``policy(node_id, obs, mask, t)`` returns an
        AgentAction (or None to stay idle this epoch). Hooks receive resolved
        StepEvents and closed TransitionRecords in simulation order. Pass
        reset=False to keep state staged by hand after an explicit reset."""
        if reset:
            self.reset(day)
        p = self.params
        outcome_counts = dict.fromkeys(ev.ALL_OUTCOMES, 0)
        epoch_count = 0
        log_fh = open(event_log_path, "w") if event_log_path else None

        def emit(event: StepEvent, node: _Node):
            outcome_counts[event.outcome] += 1
            if node.pending_step is not None and node.pending_step[3] is None:
                node.pending_step[3] = event
            if on_event is not None:
                on_event(event)
            if log_fh is not None:
                log_fh.write(json.dumps({
                    "t": round(event.t, 6), "node": event.node, "outcome": event.outcome,
                    "packet_id": event.packet_id, "dest": event.dest,
                    "h": event.hops, "tau": round(event.tau, 6)}) + "\n")

        def close_pending(node: _Node, next_obs, t_now: float, terminal: bool):
            step = node.pending_step
            node.pending_step = None
            if step is None:
                return
            obs, action, t_epoch, event = step
            if event is None:
                if not terminal:
                    raise RuntimeError(f"node {node.nid}: epoch fired before the "
                                       f"previous outcome resolved")
                return  # outcome still in flight at day end: discarded
            if on_transition is not None:
                on_transition(TransitionRecord(
                    node=node.nid, obs=obs, action=action, event=event,
                    next_obs=next_obs, t_action=t_epoch, t_next=t_now,
                    terminal=terminal))

        try:
            t = p.day_start
            while t < p.day_end:
                # Phase A: decision epochs at the tick boundary, ascending id.
                for node in self.devices:
                    if node.tx is not None or len(node.queue) == 0:
                        continue
                    above = node.energy.e_res > node.latch * p.e_max
                    if not above and (t - node.last_epoch_t) < p.reeval_period:
                        continue
                    obs = self.observe(node.nid, t)
                    epoch_count += 1
                    node.last_epoch_t = t
                    close_pending(node, obs, t, terminal=False)
                    action = policy(node.nid, obs.vector, obs.mask, t) if policy else None
                    if action is None:
                        node.pending_step = [obs, None, t, None]
                        emit(StepEvent(t=t, node=node.nid, outcome=ev.IDLE), node)
                        continue
                    if not (0 <= action.energy_threshold_index < len(p.thresholds)):
                        raise InvalidActionError(
                            f"threshold index {action.energy_threshold_index} out of range")
                    if not (0 <= action.relay_slot < N_SLOTS) or not obs.mask[action.relay_slot]:
                        raise InvalidActionError(
                            f"node {node.nid}: relay slot {action.relay_slot} is masked out")
                    node.latch = p.thresholds[action.energy_threshold_index]
                    node.pending_step = [obs, action, t, None]
                    if node.energy.e_res > node.latch * p.e_max:
                        self._start_transmission(node, action, t)
                    else:
                        emit(StepEvent(t=t, node=node.nid, outcome=ev.GATED), node)

                # Phase B: integrate to the next tick boundary, resolving
                # transmission completions and depletions at exact times.
                self._integrate(t, t + p.tick_dt, emit)

                for node in self.devices:
                    node.stunned = False
                t += p.tick_dt

            # Day end: close residual experience with a terminal marker.
            for node in self.devices:
                close_pending(node, None, p.day_end, terminal=True)
        finally:
            if log_fh is not None:
                log_fh.close()

        return self._collect_metrics(day, outcome_counts, epoch_count)

    def _start_transmission(self, node: _Node, action: AgentAction, t: float) -> None:
        dest = self.node_at_slot[node.nid][action.relay_slot]
        receiver = self.nodes[dest]
        packet = node.queue.head()
        rate = self.rates[(node.nid, dest)]
        duration = packet.size_bits / rate
        rx_active = receiver.is_sink or (
            not receiver.stunned
            and receiver.energy.e_res > receiver.latch * self.params.e_max)
        tx = _ActiveTx(node.nid, dest, packet, t, t + duration, rx_active)
        node.tx = tx
        receiver.rx_incoming.append(tx)

    def _integrate(self, t0: float, t1: float, emit) -> None:
        shared_harvest = self.trace.is_shared
        now = t0
        while now < t1 - 1e-12:
            h_shared = self.trace.power_at(0, now) if shared_harvest else 0.0
            # Earliest event: the tick boundary, a transmission completion, or
            # a predicted depletion of a node with an active radio. Radio-idle
            # nodes integrate through zero without an event: their draw is
            # simply capped at the harvest inflow.
            t_next = t1
            for node in self.devices:
                radio = node.tx is not None or node.active_rx_count() > 0
                if node.tx is not None and node.tx.end < t_next:
                    t_next = node.tx.end
                if radio and node.energy.e_res > 0.0:
                    h = h_shared if shared_harvest else self.trace.power_at(node.nid, now)
                    drain = self._activity_powers(node)[1] - h
                    if drain > 0.0:
                        t_dep = now + node.energy.e_res / drain
                        if t_dep < t_next:
                            t_next = t_dep
            if t_next <= now:
                t_next = now + 1e-9  # numeric guard; advance a hair
            dt = t_next - now

            depleted: list[_Node] = []
            for node in self.devices:
                h = h_shared if shared_harvest else self.trace.power_at(node.nid, now)
                went_dry, sense_dt = self._advance_node(node, h, dt)
                if went_dry and (node.tx is not None or node.active_rx_count() > 0):
                    depleted.append(node)
                if sense_dt > 0.0:
                    self._accrue_sensing(node, sense_dt, t_next)

            # Completions first: a transfer ending at the same instant its
            # receiver dies is counted as received.
            finishing = sorted((n.tx for n in self.devices
                                if n.tx is not None and n.tx.end <= t_next + 1e-12),
                               key=lambda tx: tx.sender)
            for tx in finishing:
                self._complete_transmission(tx, t_next, emit)

            for node in depleted:
                node.stunned = True
                if node.tx is not None:
                    tx = node.tx
                    node.tx = None
                    self.nodes[tx.receiver].rx_incoming.remove(tx)
                    emit(StepEvent(t=t_next, node=node.nid, outcome=ev.TRANSMITTER_DEPLETED,
                                   dest=tx.receiver, packet_id=tx.packet.packet_id,
                                   size_bits=tx.packet.size_bits, hops=tx.packet.hops,
                                   tau=t_next - tx.packet.sensed_at), node)
                for tx in node.rx_incoming:
                    if tx.rx_active:
                        tx.rx_failed = True
            now = t_next

    def _activity_powers(self, node: _Node):
        """Concurrent activity draws for the node's current state.

        Returns (powers_by_activity, total). Sensing runs alongside the
        radio; the sleep draw applies only when the radio is idle."""
        powers = self.powers
        if node.stunned:
            return {"sleep": powers.sleep}, powers.sleep
        acts = {"sense": powers.sense}
        total = powers.sense
        n_rx = node.active_rx_count()
        if node.tx is not None:
            acts["trans"] = powers.trans
            total += powers.trans
            if n_rx:
                acts["recv"] = powers.recv * n_rx
                total += acts["recv"]
        elif n_rx:
            acts["recv"] = powers.recv * n_rx
            total += acts["recv"]
        else:
            acts["sleep"] = powers.sleep
            total += powers.sleep
        return acts, total

    def _advance_node(self, node: _Node, harvest: float, dt: float):
        """Integrate one constant-power segment.

        Returns (went_dry, effective_sense_seconds). Sensed data accrues in
        proportion to the sensing energy actually spent, so an energy-starved
        node senses at the rate its harvest can power."""
        acts, _total = self._activity_powers(node)
        energy = node.energy
        sensing = "sense" in acts
        pre_sense = energy.consumed["sense"] if sensing else 0.0
        had_energy = energy.e_res > 0.0
        outcome, _ = energy.advance(acts, harvest, dt)
        if 0.0 < energy.e_res <= _DUST:
            # Snap float dust so depletion events land exactly on zero; the
            # dust is booked as consumption to keep the balance identity.
            biggest = max(acts, key=acts.get)
            energy.consumed[biggest] += energy.e_res
            energy.e_res = 0.0
            outcome = "depleted"
        went_dry = outcome == "depleted" and had_energy
        sense_dt = (energy.consumed["sense"] - pre_sense) / self.powers.sense if sensing else 0.0
        return went_dry, sense_dt

    def _complete_transmission(self, tx: _ActiveTx, now: float, emit) -> None:
        sender = self.nodes[tx.sender]
        receiver = self.nodes[tx.receiver]
        packet = tx.packet
        sender.tx = None
        receiver.rx_incoming.remove(tx)
        tau_total = now - packet.sensed_at

        def event(outcome, k_after=0):
            return StepEvent(t=now, node=sender.nid, outcome=outcome, dest=receiver.nid,
                             packet_id=packet.packet_id, size_bits=packet.size_bits,
                             k_after=k_after, to_sink=receiver.is_sink,
                             hops=packet.hops, tau=tau_total)

        if not tx.rx_active or tx.rx_failed:
            emit(event(ev.RECEIVER_OFFLINE), sender)
            return
        if not receiver.is_sink and not receiver.queue.fits(packet.size_bits):
            emit(event(ev.QUEUE_OVERFLOW), sender)
            return
        if receiver.nid == packet.source:
            sender.queue.pop_head()
            sender.dropped_bits += packet.size_bits
            emit(event(ev.LOOP_RETURN), sender)
            return
        if packet.hops + 1 > self.params.max_hops:
            sender.queue.pop_head()
            sender.dropped_bits += packet.size_bits
            emit(event(ev.HOP_EXPIRED), sender)
            return
        if tau_total > self.params.expiry_s:
            sender.queue.pop_head()
            sender.dropped_bits += packet.size_bits
            emit(event(ev.TIME_EXPIRED), sender)
            return

        sender.queue.pop_head()
        sender.transmitted_ok_bits += packet.size_bits
        packet.hops += 1
        packet.elapsed_s = tau_total
        if receiver.is_sink:
            receiver.received_bits += packet.size_bits
            emit(event(ev.DELIVERED, k_after=1), sender)
        else:
            receiver.queue.push(packet)
            receiver.received_bits += packet.size_bits
            emit(event(ev.RELAYED, k_after=len(receiver.queue)), sender)

    # -- metrics -----------------------------------------------------------

    def _collect_metrics(self, day, outcome_counts, epoch_count) -> EpisodeSimMetrics:
        per_node = {}
        total_sensed = 0
        for node in self.nodes.values():
            in_flight = node.tx.packet.size_bits if node.tx is not None else 0
            row = {
                "sensed_bits": node.sensed_bits,
                "received_bits": node.received_bits,
                "transmitted_ok_bits": node.transmitted_ok_bits,
                "dropped_bits": node.dropped_bits,
                "queued_bits_end": node.queue.bits - in_flight,
                "in_flight_bits": in_flight,
            }
            if node.energy is not None:
                row.update({
                    "energy_trans_j": node.energy.consumed["trans"],
                    "energy_recv_j": node.energy.consumed["recv"],
                    "energy_sleep_j": node.energy.consumed["sleep"],
                    "energy_sense_j": node.energy.consumed["sense"],
                    "harvested_j": node.energy.harvested,
                    "clipped_j": node.energy.clipped,
                    "e_res_end_j": node.energy.e_res,
                })
            else:
                row.update(dict.fromkeys(
                    ("energy_trans_j", "energy_recv_j", "energy_sleep_j",
                     "energy_sense_j", "harvested_j", "clipped_j", "e_res_end_j"), 0.0))
            per_node[node.nid] = row
            total_sensed += node.sensed_bits
        sink_bits = self.nodes[self.sink].received_bits
        rate = sink_bits / total_sensed if total_sensed > 0 else 0.0
        return EpisodeSimMetrics(
            day=day, sink=self.sink, sink_received_bits=sink_bits,
            total_sensed_bits=total_sensed, delivery_rate=rate, per_node=per_node,
            outcome_counts=outcome_counts, epoch_count=epoch_count)
