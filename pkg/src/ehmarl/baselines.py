"""Comparison policies: routing-only actor, per-device Q-tables, and an
energy-aware geographic heuristic (labeled ESDSRAA-style; reconstructed from
a two-sentence behavioral description, not the original pseudocode).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import events as ev
from . import nets
from .rewards import RewardConfig, local_reward
from .simulation import N_SLOTS, AgentAction, World


# ---------------------------------------------------------------------------
# routing-only actor (GAPR)
# ---------------------------------------------------------------------------

def gapr_policy(actor: nets.MlpModel, obs_vector, mask) -> AgentAction:
    """Relay chosen by the trained restricted actor; the energy threshold is
    pinned at index 0 so transmission is never gated."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot act with an empty relay mask")
    _, p_r = nets.forward_policy(actor, obs_vector, mask)
    return AgentAction(0, nets.greedy_index(p_r))


# ---------------------------------------------------------------------------
# per-device Q-tables
# ---------------------------------------------------------------------------

@dataclass
class QTableConfig:
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon_start: float = 1.0
    epsilon_final: float = 0.05
    epsilon_decay_episodes: int = 10
    energy_buckets: int = 4
    queue_buckets: int = 4


class QTableAgent:
    """One-step Q-learning over a coarse discretized observation.

    State key: (own-energy bucket, own-queue bucket, head-packet source id),
    4 x 4 x 16 = 256 states; actions are the 4 x 16 threshold/relay grid.
    Unvisited entries read as zero.
    """

    N_ACTIONS = 4 * N_SLOTS

    def __init__(self, node: int, config: QTableConfig, rng: np.random.Generator):
        self.node = node
        self.config = config
        self.rng = rng
        self.table: dict[tuple, np.ndarray] = {}
        self.epsilon = config.epsilon_start

    def set_episode(self, episode: int) -> None:
        c = self.config
        frac = min(1.0, episode / max(1, c.epsilon_decay_episodes))
        self.epsilon = c.epsilon_start + (c.epsilon_final - c.epsilon_start) * frac

    def state_key(self, obs_vector) -> tuple:
        c = self.config
        e_bucket = min(int(obs_vector[0] * c.energy_buckets), c.energy_buckets - 1)
        q_bucket = min(int(obs_vector[N_SLOTS] * c.queue_buckets), c.queue_buckets - 1)
        src = int(np.argmax(obs_vector[2 * N_SLOTS:3 * N_SLOTS]))
        return (e_bucket, q_bucket, src)

    def _q_row(self, key) -> np.ndarray:
        row = self.table.get(key)
        if row is None:
            row = np.zeros(self.N_ACTIONS)
            self.table[key] = row
        return row

    @staticmethod
    def action_index(action: AgentAction) -> int:
        return action.energy_threshold_index * N_SLOTS + action.relay_slot

    def valid_action_indices(self, mask) -> np.ndarray:
        slots = np.flatnonzero(mask)
        return (np.arange(4)[:, None] * N_SLOTS + slots[None, :]).ravel()

    def act(self, obs_vector, mask) -> AgentAction:
        valid = self.valid_action_indices(mask)
        if self.epsilon > 0 and self.rng.random() < self.epsilon:
            idx = int(valid[self.rng.integers(valid.size)])
        else:
            row = self._q_row(self.state_key(obs_vector))
            vals = row[valid]
            idx = int(valid[int(np.argmax(vals))])  # ties to the lowest index
        return AgentAction(idx // N_SLOTS, idx % N_SLOTS)

    def update(self, obs_vector, mask, action: AgentAction, reward: float,
               next_obs_vector, next_mask, terminal: bool) -> None:
        c = self.config
        row = self._q_row(self.state_key(obs_vector))
        a = self.action_index(action)
        if terminal or next_obs_vector is None:
            target = reward
        else:
            next_row = self._q_row(self.state_key(next_obs_vector))
            valid = self.valid_action_indices(next_mask)
            target = reward + c.gamma * float(next_row[valid].max())
        row[a] += c.alpha * (target - row[a])


# ---------------------------------------------------------------------------
# ESDSRAA-style heuristic
# ---------------------------------------------------------------------------

@dataclass
class HeuristicConfig:
    ewma_beta: float = 0.2
    budget_period_s: float = 3600.0


class EsdsraaAgent:
    """Hourly energy budgeting plus delivery-rate/geographic relay choice.

    Threshold: at each budget boundary the node compares its recent harvest
    income against activity power tiers and picks the smallest reserve
    fraction that keeps predicted consumption within that income (scarcer
    income -> larger battery buffer before transmitting). Relay: argmax of
    per-neighbor delivery EWMA times geographic progress toward the sink,
    falling back to the EWMA-only argmax when no neighbor makes progress,
    with ties toward the neighbor closest to the sink. Fully deterministic.
    """

    def __init__(self, node: int, world: World, config: HeuristicConfig | None = None):
        self.node = node
        self.config = config or HeuristicConfig()
        topo = world.topology
        self.sink = topo.sink
        self.d_self = topo.distance(node, self.sink)
        self.neighbor_slots = list(world.neighbor_slots[node])  # (slot, node id)
        self.d_sink = {j: topo.distance(j, self.sink) for _, j in self.neighbor_slots}
        self.progress = {j: self.d_self - self.d_sink[j] for _, j in self.neighbor_slots}
        self.ewma: dict[int, float] = {j: 1.0 for _, j in self.neighbor_slots}
        self.powers = world.powers
        self.threshold_index = 0
        self._budget_until = -np.inf
        self._harvest_acc = 0.0
        self._harvest_t = 0.0

    def observe_harvest(self, watts: float, dt: float) -> None:
        self._harvest_acc += watts * dt
        self._harvest_t += dt

    def _recompute_budget(self, t: float, world: World) -> None:
        if self._harvest_t > 0:
            income = self._harvest_acc / self._harvest_t
        else:
            income = world.trace.power_at(self.node, t)
        self._harvest_acc = 0.0
        self._harvest_t = 0.0
        p = self.powers
        # Income tiers against the power ladder: the weaker the supply, the
        # larger the reserve required before transmitting.
        if income >= p.trans + p.sense:
            self.threshold_index = 0
        elif income >= p.recv + p.sense:
            self.threshold_index = 1
        elif income >= p.sense:
            self.threshold_index = 2
        else:
            self.threshold_index = 3
        self._budget_until = t + self.config.budget_period_s

    def act(self, world: World, obs_vector, mask, t: float) -> AgentAction:
        if t >= self._budget_until:
            self._recompute_budget(t, world)
        best_slot, best_score, best_d = None, -1.0, np.inf
        for slot, j in self.neighbor_slots:
            score = self.ewma[j] * max(0.0, self.progress[j])
            if score > best_score or (score == best_score and self.d_sink[j] < best_d):
                best_slot, best_score, best_d = slot, score, self.d_sink[j]
        if best_score <= 0.0:
            # No neighbor makes geographic progress: trust delivery history,
            # ties toward the neighbor nearest the sink.
            best_slot, best_val, best_d = None, -1.0, np.inf
            for slot, j in self.neighbor_slots:
                val = self.ewma[j]
                if val > best_val or (val == best_val and self.d_sink[j] < best_d):
                    best_slot, best_val, best_d = slot, val, self.d_sink[j]
        return AgentAction(self.threshold_index, best_slot)

    def record_outcome(self, dest: int, success: bool) -> None:
        beta = self.config.ewma_beta
        old = self.ewma.get(dest, 1.0)
        self.ewma[dest] = (1.0 - beta) * old + beta * (1.0 if success else 0.0)


# ---------------------------------------------------------------------------
# episode runners
# ---------------------------------------------------------------------------

@dataclass
class BaselineEpisodeMetrics:
    episode: int
    total_reward: float
    sink_received_bits: int
    total_sensed_bits: int
    delivery_rate: float
    epoch_count: int
    outcome_counts: dict = field(default_factory=dict)
    per_node: dict = field(default_factory=dict)
    sink: int = -1


class QTableRunner:
    """Drives per-device Q-table agents through episodes. Uses the local
    (non-spatial) reward."""

    def __init__(self, world: World, config: QTableConfig | None = None,
                 reward_config: RewardConfig | None = None, seed: int = 0):
        self.world = world
        self.config = config or QTableConfig()
        self.reward_config = reward_config or RewardConfig(
            range_zeta=world.topology.range_zeta)
        self.agents = {
            nid: QTableAgent(nid, self.config, np.random.default_rng(
                np.random.SeedSequence([seed, 0xC0, nid])))
            for nid in world.topology.device_ids
        }

    def run_episode(self, episode: int, on_event=None) -> BaselineEpisodeMetrics:
        for agent in self.agents.values():
            agent.set_episode(episode)
        total_reward = 0.0
        extra_hook = on_event

        def policy(node, obs, mask, t):
            return self.agents[node].act(obs, mask)

        def on_event(event):
            nonlocal total_reward
            total_reward += local_reward(event, self.reward_config)
            if extra_hook is not None:
                extra_hook(event)

        def on_transition(rec):
            if rec.action is None:
                return
            r = local_reward(rec.event, self.reward_config)
            next_vec = rec.next_obs.vector if rec.next_obs is not None else None
            next_mask = rec.next_obs.mask if rec.next_obs is not None else None
            self.agents[rec.node].update(rec.obs.vector, rec.obs.mask, rec.action,
                                         r, next_vec, next_mask, rec.terminal)

        sim = self.world.run_episode(policy, day=episode, on_event=on_event,
                                     on_transition=on_transition)
        return BaselineEpisodeMetrics(
            episode=episode, total_reward=total_reward,
            sink_received_bits=sim.sink_received_bits,
            total_sensed_bits=sim.total_sensed_bits,
            delivery_rate=sim.delivery_rate, epoch_count=sim.epoch_count,
            outcome_counts=dict(sim.outcome_counts),
            per_node=sim.per_node, sink=sim.sink)


class EsdsraaRunner:
    """Drives the deterministic heuristic through episodes."""

    def __init__(self, world: World, config: HeuristicConfig | None = None,
                 reward_config: RewardConfig | None = None):
        self.world = world
        self.config = config or HeuristicConfig()
        self.reward_config = reward_config or RewardConfig(
            range_zeta=world.topology.range_zeta)
        self.agents = {nid: EsdsraaAgent(nid, world, self.config)
                       for nid in world.topology.device_ids}

    def run_episode(self, episode: int, on_event=None) -> BaselineEpisodeMetrics:
        total_reward = 0.0
        last_t = {nid: None for nid in self.agents}
        extra_hook = on_event

        def policy(node, obs_vector, mask, t):
            agent = self.agents[node]
            # Accumulate harvest observations between this node's epochs so
            # the hourly budget uses the recent mean income.
            prev = last_t[node]
            if prev is not None and t > prev:
                watts = self.world.trace.power_at(node, t)
                agent.observe_harvest(watts, t - prev)
            last_t[node] = t
            return agent.act(self.world, obs_vector, mask, t)

        def on_event(event):
            nonlocal total_reward
            r = local_reward(event, self.reward_config)
            total_reward += r
            if event.dest is not None and event.node in self.agents:
                if event.outcome in ev.SUCCESS_OUTCOMES:
                    self.agents[event.node].record_outcome(event.dest, True)
                elif event.outcome in ev.FAILURE_OUTCOMES:
                    self.agents[event.node].record_outcome(event.dest, False)
            if extra_hook is not None:
                extra_hook(event)

        sim = self.world.run_episode(policy, day=episode, on_event=on_event)
        return BaselineEpisodeMetrics(
            episode=episode, total_reward=total_reward,
            sink_received_bits=sim.sink_received_bits,
            total_sensed_bits=sim.total_sensed_bits,
            delivery_rate=sim.delivery_rate, epoch_count=sim.epoch_count,
            outcome_counts=dict(sim.outcome_counts),
            per_node=sim.per_node, sink=sim.sink)
