"""Shared-model multi-agent actor-critic training.

One universal actor/critic pair lives in a global store. Every device runs a
virtual agent inside the shared world: at episode start it downloads the
global snapshot, acts at its decision epochs, collects (state, action,
spatial reward, next state) experience, and every ``max_step`` steps turns
the batch into n-step returns, advantages, and gradients, applies them
locally, and uploads to the store.

Upload semantics default to gradient-push: the store applies the worker's
gradients to the global weights atomically, asynchronous-advantage style.
Whole-model replacement (as a literal reading of the download/upload scheme
would have it) is retained behind ``upload_mode="replace"``; with many
concurrent workers it overwrites their mutual progress and trains poorly.

Scheduling modes: ``lockstep`` runs everything on the caller thread in node
order, which makes runs bit-reproducible; ``async`` offloads gradient
computation to a thread pool, so uploads land in completion order.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .events import StepEvent
from .rewards import RewardConfig, RewardLedger, local_reward, spatial_reward
from .simulation import AgentAction, World


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    max_episodes: int = 50
    gamma: float = 0.9
    lr_actor: float = 1e-4
    lr_critic: float = 3e-4
    max_step: int = 50
    seed: int = 0
    mode: str = "lockstep"            # "lockstep" | "async"
    upload_mode: str = "gradient-push"  # "gradient-push" | "replace"
    optimizer: str = "adam"           # store-side; "sgd" for plain descent
    grad_clip: float = 5.0
    entropy_coef: float = 0.0
    spatial_rewards: bool = True
    include_energy_head: bool = True  # False trains the routing-only variant
    dtype: str = "float32"
    max_workers: int = 0              # async pool size; 0 picks a default
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.max_step < 1:
            raise ValueError("max_step must be at least 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if self.mode not in ("lockstep", "async"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.upload_mode not in ("gradient-push", "replace"):
            raise ValueError(f"unknown upload mode {self.upload_mode!r}")


class GlobalStore:
    """Atomic holder of the universal actor/critic pair.

    Snapshots and updates are serialized under one lock, so a download always
    sees a consistent (actor, critic, version) triple and concurrent uploads
    never interleave within a model.
    """

    def __init__(self, actor: nets.MlpModel, critic: nets.MlpModel,
                 optimizer: str = "sgd", lr_actor: float = 1e-4,
                 lr_critic: float = 3e-4):
        self._lock = threading.Lock()
        self.actor = actor
        self.critic = critic
        self.version = 0
        self.push_count = 0
        self.replace_count = 0
        self.lr_actor = lr_actor
        self.lr_critic = lr_critic
        self._opt_actor = nets.make_optimizer(optimizer, actor)
        self._opt_critic = nets.make_optimizer(optimizer, critic)

    def snapshot(self):
        with self._lock:
            return self.actor.copy(), self.critic.copy(), self.version

    def push_gradients(self, actor_grads, critic_grads) -> int:
        with self._lock:
            if self._opt_actor is not None:
                self._opt_actor.apply(self.actor, actor_grads, self.lr_actor)
                self._opt_critic.apply(self.critic, critic_grads, self.lr_critic)
            else:
                nets.apply_gradients(self.actor, actor_grads, self.lr_actor)
                nets.apply_gradients(self.critic, critic_grads, self.lr_critic)
            self.version += 1
            self.push_count += 1
            return self.version

    def replace(self, actor: nets.MlpModel, critic: nets.MlpModel) -> int:
        with self._lock:
            self.actor.copy_from(actor)
            self.critic.copy_from(critic)
            self.version += 1
            self.replace_count += 1
            return self.version


def upload(store: GlobalStore, local_actor: nets.MlpModel,
           local_critic: nets.MlpModel) -> int:
    """Replace-semantics upload of a worker's local models."""
    for W_local, W_store in zip(local_actor.W, store.actor.W):
        if W_local.shape != W_store.shape:
            raise ValueError("uploaded actor shape does not match the store")
    for W_local, W_store in zip(local_critic.W, store.critic.W):
        if W_local.shape != W_store.shape:
            raise ValueError("uploaded critic shape does not match the store")
    return store.replace(local_actor, local_critic)


def infer_policy(actor: nets.MlpModel, obs_vector, mask,
                 force_energy_index: int | None = None) -> AgentAction:
    """Deterministic greedy action: argmax per head, ties to the lowest
    index, masked slots never chosen."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot act with an empty relay mask")
    p_e, p_r = nets.forward_policy(actor, obs_vector, mask)
    e_idx = force_energy_index if force_energy_index is not None else nets.greedy_index(p_e)
    return AgentAction(int(e_idx), nets.greedy_index(p_r))


class VirtualAgent:
    """Per-node decision context holding local model copies and a batch."""

    def __init__(self, node: int, config: TrainerConfig, rng: np.random.Generator):
        self.node = node
        self.config = config
        self.rng = rng
        self.actor: nets.MlpModel | None = None
        self.critic: nets.MlpModel | None = None
        self.version = -1
        self.buffer: list[tuple] = []
        self.steps_collected = 0
        self.steps_consumed = 0
        self.updates = 0
        self._pending_grads = None  # async mode: grads awaiting local apply
        self._outstanding = None    # async mode: in-flight update future
        self._last_acts = None      # activations of the latest act() call

    def download(self, store: GlobalStore) -> None:
        self.actor, self.critic, self.version = store.snapshot()
        self.buffer.clear()

    def act(self, obs_vector, mask) -> AgentAction:
        if self._pending_grads is not None:
            self._apply_local(self._pending_grads)
            self._pending_grads = None
        p_e, p_r, acts = nets.forward_policy(self.actor, obs_vector, mask,
                                             want_acts=True)
        self._last_acts = acts  # consumed by record() for the same epoch
        if self.config.include_energy_head:
            e_idx = nets.sample_masked(p_e, self.rng)
        else:
            e_idx = 0  # routing-only: transmission is never threshold-gated
        r_idx = nets.sample_masked(p_r, self.rng)
        return AgentAction(e_idx, r_idx)

    def record(self, obs_vector, mask, action: AgentAction, sr: float,
               next_obs_vector, terminal: bool):
        """Buffer one closed step; returns an update task when the batch is
        full (or the episode ended with a partial batch)."""
        self.buffer.append((obs_vector, mask, action.energy_threshold_index,
                            action.relay_slot, sr, self._last_acts))
        self.steps_collected += 1
        if len(self.buffer) >= self.config.max_step or terminal:
            return self._make_update_task(next_obs_vector, terminal)
        return None

    def flush(self):
        """Episode-end partial batch, bootstrapped at zero."""
        if self.buffer:
            return self._make_update_task(None, terminal=True)
        return None

    def _make_update_task(self, next_obs_vector, terminal: bool):
        batch = self.buffer
        self.buffer = []
        self.steps_consumed += len(batch)
        self.updates += 1
        if terminal or next_obs_vector is None:
            bootstrap = 0.0
        else:
            bootstrap = float(nets.forward_value(
                self.critic, next_obs_vector[None, :])[0])
        actor, critic = self.actor, self.critic
        cfg = self.config

        # Cached activations are exact in lockstep mode (the local model is
        # frozen between updates); async applies land mid-batch, so there the
        # update recomputes the forward pass against the current weights.
        use_cached_acts = cfg.mode == "lockstep"

        def compute():
            states = np.stack([b[0] for b in batch])
            masks = np.stack([b[1] for b in batch])
            a_e = [b[2] for b in batch]
            a_r = [b[3] for b in batch]
            srs = [b[4] for b in batch]
            acts = None
            if use_cached_acts:
                acts = [np.stack([b[5][k] for b in batch])
                        for k in range(len(batch[0][5]))]
            returns = nets.n_step_returns(srs, bootstrap, cfg.gamma)
            c_loss, c_grads, values = nets.critic_update(critic, states, returns)
            advantages = returns - values  # critic treated as a constant here
            a_loss, a_grads = nets.actor_loss_and_grads(
                actor, states, masks, a_e, a_r, advantages,
                include_energy_head=cfg.include_energy_head,
                entropy_coef=cfg.entropy_coef, acts=acts)
            nets.clip_global_norm(a_grads, cfg.grad_clip)
            nets.clip_global_norm(c_grads, cfg.grad_clip)
            return a_grads, c_grads, a_loss, c_loss

        return compute

    def _apply_local(self, grads_pair) -> None:
        a_grads, c_grads = grads_pair
        nets.apply_gradients(self.actor, a_grads, self.config.lr_actor)
        nets.apply_gradients(self.critic, c_grads, self.config.lr_critic)

    def finish_update(self, a_grads, c_grads, store: GlobalStore, inline: bool) -> None:
        if self.config.upload_mode == "gradient-push":
            store.push_gradients(a_grads, c_grads)
            if inline:
                self._apply_local((a_grads, c_grads))
            else:
                self._pending_grads = (a_grads, c_grads)
        else:
            self._apply_local((a_grads, c_grads))
            upload(store, self.actor, self.critic)


@dataclass
class TrainEpisodeMetrics:
    episode: int
    total_reward: float
    sink_received_bits: int
    total_sensed_bits: int
    delivery_rate: float
    wallclock_s: float
    epoch_count: int
    update_count: int
    store_version: int
    outcome_counts: dict = field(default_factory=dict)
    per_node: dict = field(default_factory=dict)
    sink: int = -1


class GapTrainer:
    """Runs the training procedure on one shared world."""

    def __init__(self, world: World, config: TrainerConfig,
                 reward_config: RewardConfig | None = None,
                 store: GlobalStore | None = None):
        self.world = world
        self.config = config
        dtype = np.dtype(config.dtype).type
        # The sink-bonus scale constant keeps its default on small worlds; it
        # must stay above 1/lambda for the bonus to be positive.
        self.reward_config = reward_config or RewardConfig(
            range_zeta=world.topology.range_zeta)
        if store is None:
            seq = np.random.SeedSequence([config.seed, 0xA0])
            s_actor, s_critic = seq.spawn(2)
            store = GlobalStore(
                nets.new_actor(seed=s_actor, dtype=dtype),
                nets.new_critic(seed=s_critic, dtype=dtype),
                optimizer=config.optimizer,
                lr_actor=config.lr_actor, lr_critic=config.lr_critic)
        self.store = store
        self.ledger = RewardLedger()
        self.agents = {
            nid: VirtualAgent(nid, config, np.random.default_rng(
                np.random.SeedSequence([config.seed, 0xB0, nid])))
            for nid in world.topology.device_ids
        }
        self._pool = None
        if config.mode == "async":
            workers = config.max_workers or min(4, len(self.agents))
            self._pool = ThreadPoolExecutor(max_workers=workers,
                                            thread_name_prefix="agent-update")

    # -- episode plumbing ---------------------------------------------------

    def _policy(self, node, obs_vector, mask, t):
        return self.agents[node].act(obs_vector, mask)

    def _run_update(self, agent: VirtualAgent, task) -> None:
        if self._pool is None:
            a_grads, c_grads, _, _ = task()
            agent.finish_update(a_grads, c_grads, self.store, inline=True)
        else:
            # One in-flight update per agent: the pool reads the agent's local
            # weights, which only the agent itself mutates between updates.
            if agent._outstanding is not None:
                agent._outstanding.result()

            def job():
                a_grads, c_grads, _, _ = task()
                agent.finish_update(a_grads, c_grads, self.store, inline=False)
            fut = self._pool.submit(job)
            agent._outstanding = fut
            self._futures.append(fut)

    def run_training_episode(self, episode: int, on_event=None) -> TrainEpisodeMetrics:
        start = time.perf_counter()
        self.ledger.reset()
        self._futures = []
        total_reward = 0.0
        extra_hook = on_event
        for agent in self.agents.values():
            agent.download(self.store)

        def on_event(event: StepEvent):
            nonlocal total_reward
            r = local_reward(event, self.reward_config)
            if r != 0.0:
                self.ledger.append(event.node, event.t, r)
                total_reward += r
            if extra_hook is not None:
                extra_hook(event)

        def on_transition(rec):
            if rec.action is None:
                return
            agent = self.agents[rec.node]
            r = local_reward(rec.event, self.reward_config)
            if self.config.spatial_rewards:
                sr = spatial_reward(rec.node, r, rec.t_action, rec.t_next,
                                    self.ledger, self.world.topology,
                                    self.reward_config)
            else:
                sr = r
            next_vec = rec.next_obs.vector if rec.next_obs is not None else None
            task = agent.record(rec.obs.vector, rec.obs.mask, rec.action, sr,
                                next_vec, rec.terminal)
            if task is not None:
                self._run_update(agent, task)

        sim = self.world.run_episode(self._policy, day=episode,
                                     on_event=on_event, on_transition=on_transition)
        for agent in self.agents.values():
            task = agent.flush()
            if task is not None:
                self._run_update(agent, task)
        for fut in self._futures:
            fut.result()  # propagate worker failures

        return TrainEpisodeMetrics(
            episode=episode,
            total_reward=total_reward,
            sink_received_bits=sim.sink_received_bits,
            total_sensed_bits=sim.total_sensed_bits,
            delivery_rate=sim.delivery_rate,
            wallclock_s=time.perf_counter() - start,
            epoch_count=sim.epoch_count,
            update_count=sum(a.updates for a in self.agents.values()),
            store_version=self.store.version,
            outcome_counts=dict(sim.outcome_counts),
            per_node=sim.per_node, sink=sim.sink)

    def train(self, on_episode=None, checkpoint_dir=None) -> list[TrainEpisodeMetrics]:
        """Run max_episodes days. Worker failures abort training after
        preserving a partial checkpoint."""
        history = []
        try:
            for episode in range(self.config.max_episodes):
                metrics = self.run_training_episode(episode)
                history.append(metrics)
                if on_episode is not None:
                    on_episode(metrics)
                if (checkpoint_dir is not None
                        and (episode + 1) % self.config.checkpoint_every == 0):
                    self.save_checkpoint(checkpoint_dir, f"ep{episode + 1:03d}")
        except Exception as exc:
            if checkpoint_dir is not None:
                self.save_checkpoint(checkpoint_dir, "abort")
            raise TrainingError(f"training aborted in episode "
                                f"{len(history)}: {exc}") from exc
        finally:
            if self._pool is not None:
                self._pool.shutdown(wait=True)
        if checkpoint_dir is not None:
            self.save_checkpoint(checkpoint_dir, "final")
        return history

    def save_checkpoint(self, directory, tag: str) -> None:
        import os
        os.makedirs(directory, exist_ok=True)
        actor, critic, version = self.store.snapshot()
        nets.save_model(actor, os.path.join(directory, f"actor-{tag}.npz"))
        nets.save_model(critic, os.path.join(directory, f"critic-{tag}.npz"))

    def audit_step_counters(self) -> list[str]:
        """Every update must consume exactly the steps gathered since the
        previous one: collected == consumed + buffered, per agent."""
        problems = []
        for nid, agent in self.agents.items():
            if agent.steps_collected != agent.steps_consumed + len(agent.buffer):
                problems.append(
                    f"agent {nid}: collected={agent.steps_collected} "
                    f"consumed={agent.steps_consumed} buffered={len(agent.buffer)}")
        return problems
