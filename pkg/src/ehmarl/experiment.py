"""Experiment orchestration: config resolution, runs, output files, summaries.

A run writes one directory per (algorithm, seed) containing:

    episodes.csv          one row per simulated day
    node_detail_<day>.csv per-node data/energy breakdown for requested days
    manifest.json         resolved config + code version (reproducibility)
    checkpoints/          model checkpoints for the neural algorithms

``summarize`` merges run directories into long-format plot data plus a
comparison table with the headline sink-data ratios.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__
from .baselines import EsdsraaRunner, HeuristicConfig, QTableConfig, QTableRunner
from .energy import (HarvestTrace, PowerProfile, generate_synthetic_trace,
                     load_trace_csv)
from .rewards import RewardConfig
from .simulation import SimParams, World
from .topology import RateModel, fifteen_node_fixture, load_topology
from .training import GapTrainer, TrainerConfig

ALGORITHMS = ("gap", "gapr", "qtable", "esdsraa")

ENV_PREFIX = "EHMARL_"

# Default roles for the day-50 node detail: corner node, sink-adjacent node,
# and the sink-adjacent neighbor whose relaying load the analysis tracks.
DEFAULT_DETAIL_NODES = (7, 4, 9)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Resolved experiment parameters. Field defaults reproduce the reference
    network parameter table exactly (range, packet sizes, process speed,
    queue capacity, activity powers, storage, base reward, expiry, hops)."""

    algorithm: str = "gap"
    episodes: int = 50
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    # topology
    topology_path: str | None = None  # None selects the built-in 15-node fixture
    range_m: float = 25.0
    # rate model
    rate_mode: str = "constant"
    constant_rate_bps: float = 2560.0
    bandwidth_hz: float = 1000.0
    noise_floor_w: float = 1e-4
    path_loss_exponent: float = 2.0
    # harvest
    trace_path: str | None = None  # file or directory of trace_<id>.csv
    p_peak_w: float = 0.05         # experiment default; see decisions ledger
    trace_noise_sigma: float = 0.05
    trace_seed: int = 1000
    fresh_trace_per_day: bool = True
    # day window and device parameters
    day_start_s: float = 8 * 3600.0
    day_end_s: float = 17 * 3600.0
    process_rate_bps: float = 80.0
    packet_bits_min: int = 3720
    packet_bits_max: int = 5120
    queue_capacity_bits: int = 15 * 5120
    max_hops: int = 8
    expiry_s: float = 1800.0
    e_max_j: float = 1.0
    power_trans_w: float = 0.1
    power_recv_w: float = 0.05
    power_sleep_w: float = 0.0005
    power_sense_w: float = 0.01
    # rewards
    lambda_base: float = 0.1
    reward_device_count: int = 15
    normalized_distance: bool = False
    # training
    gamma: float = 0.9
    lr_actor: float = 1e-4
    lr_critic: float = 3e-4
    max_step: int = 50
    optimizer: str = "adam"
    mode: str = "async"              # experiments default async; tests lockstep
    entropy_coef: float = 0.0
    spatial_rewards: bool = True
    grad_clip: float = 5.0
    checkpoint_every: int = 10
    # outputs
    detail_days: tuple[int, ...] = ()   # empty selects the final episode
    detail_nodes: str = "roles"         # "roles" | "all" | comma-separated ids
    event_log: bool = False
    jobs: int = 0                       # parallel seed processes; 0 = auto

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; "
                              f"expected one of {ALGORITHMS}")
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.rate_mode not in ("constant", "log-distance"):
            raise ConfigError(f"unknown rate mode {self.rate_mode!r}")
        if self.mode not in ("lockstep", "async"):
            raise ConfigError(f"unknown scheduling mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["detail_days"] = list(self.detail_days)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("seeds", "detail_days"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | None = None, overrides: dict | None = None,
                env: dict | None = None) -> ExperimentConfig:
    """Merge config file, EHMARL_* environment variables, and CLI overrides
    (increasing precedence)."""
    data: dict = {}
    if path:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping")
        data.update(loaded)
    env = os.environ if env is None else env
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for name, f in fields.items():
        env_key = ENV_PREFIX + name.upper()
        if env_key in env:
            data[name] = _parse_env_value(env[env_key], f)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def _parse_env_value(raw: str, f: dataclasses.Field):
    if f.name in ("seeds", "detail_days"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("bool", bool):
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


# ---------------------------------------------------------------------------
# world construction
# ---------------------------------------------------------------------------

def build_world(config: ExperimentConfig, seed: int) -> World:
    if config.topology_path:
        topology = load_topology(config.topology_path)
    else:
        topology = fifteen_node_fixture(config.range_m)
    rate_model = RateModel(
        mode=config.rate_mode, constant_rate=config.constant_rate_bps,
        bandwidth=config.bandwidth_hz, tx_power_w=config.power_trans_w,
        noise_floor=config.noise_floor_w,
        path_loss_exponent=config.path_loss_exponent)
    powers = PowerProfile(trans=config.power_trans_w, recv=config.power_recv_w,
                          sleep=config.power_sleep_w, sense=config.power_sense_w)
    params = SimParams(
        day_start=config.day_start_s, day_end=config.day_end_s,
        process_rate=config.process_rate_bps,
        packet_bits_min=config.packet_bits_min,
        packet_bits_max=config.packet_bits_max,
        queue_capacity_bits=config.queue_capacity_bits,
        max_hops=config.max_hops, expiry_s=config.expiry_s,
        e_max=config.e_max_j)
    trace = _trace_provider(config, topology)
    return World(topology, rate_model=rate_model, powers=powers, params=params,
                 trace=trace, seed=seed)


def _trace_provider(config: ExperimentConfig, topology):
    if config.trace_path:
        path = config.trace_path
        if os.path.isdir(path):
            per_node = {}
            for nid in topology.positions:
                node_file = os.path.join(path, f"trace_{nid}.csv")
                if os.path.exists(node_file):
                    per_node[nid] = load_trace_csv(node_file)
            shared = os.path.join(path, "trace.csv")
            if not per_node:
                if not os.path.exists(shared):
                    raise ConfigError(f"{path}: no trace_<node_id>.csv or trace.csv found")
                return HarvestTrace(samples=load_trace_csv(shared))
            if os.path.exists(shared):
                for nid in topology.positions:
                    per_node.setdefault(nid, load_trace_csv(shared))
            missing = [n for n in topology.positions
                       if n not in per_node and n != topology.sink]
            if missing:
                raise ConfigError(f"{path}: missing traces for nodes {missing} "
                                  f"and no shared trace.csv fallback")
            return HarvestTrace(per_node=per_node)
        return HarvestTrace(samples=load_trace_csv(path))

    def factory(day: int) -> HarvestTrace:
        seed = config.trace_seed + (day if config.fresh_trace_per_day else 0)
        return HarvestTrace(samples=generate_synthetic_trace(
            p_peak=config.p_peak_w, day_start=config.day_start_s,
            day_end=config.day_end_s, noise_sigma=config.trace_noise_sigma,
            seed=seed))
    return factory


def reward_config_from(config: ExperimentConfig) -> RewardConfig:
    return RewardConfig(lambda_base=config.lambda_base,
                        device_count=config.reward_device_count,
                        normalized_distance=config.normalized_distance,
                        range_zeta=config.range_m)


# ---------------------------------------------------------------------------
# single-seed run
# ---------------------------------------------------------------------------

# episodes.csv holds only simulation-determined values so lockstep reruns are
# byte-identical; training_metrics.csv adds the wallclock column.
EPISODE_COLUMNS = ("episode", "total_reward", "sink_bits", "sensed_bits",
                   "delivery_rate")
METRICS_COLUMNS = EPISODE_COLUMNS + ("wallclock_s",)
DETAIL_COLUMNS = ("node", "is_sink", "sensed_bits", "received_bits",
                  "transmitted_ok_bits", "dropped_bits", "queued_bits_end",
                  "in_flight_bits", "energy_trans_j", "energy_recv_j",
                  "energy_sleep_j", "energy_sense_j", "harvested_j",
                  "clipped_j", "e_res_end_j")


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def run_single_seed(config: ExperimentConfig, seed: int) -> str:
    """Run one (algorithm, seed) job and write its output directory."""
    run_dir = os.path.join(config.output_dir, f"{config.algorithm}-seed{seed}")
    os.makedirs(run_dir, exist_ok=True)
    world = build_world(config, seed)
    reward_config = reward_config_from(config)
    detail_days = set(config.detail_days) if config.detail_days else {config.episodes}
    detail_rows: dict[int, dict] = {}
    rows = []

    def want_detail(episode: int) -> bool:
        return (episode + 1) in detail_days

    t_run0 = time.perf_counter()
    if config.algorithm in ("gap", "gapr"):
        trainer_cfg = TrainerConfig(
            max_episodes=config.episodes, gamma=config.gamma,
            lr_actor=config.lr_actor, lr_critic=config.lr_critic,
            max_step=config.max_step, seed=seed, mode=config.mode,
            optimizer=config.optimizer, grad_clip=config.grad_clip,
            entropy_coef=config.entropy_coef,
            spatial_rewards=config.spatial_rewards,
            include_energy_head=(config.algorithm == "gap"),
            checkpoint_every=config.checkpoint_every)
        trainer = GapTrainer(world, trainer_cfg, reward_config=reward_config)

        def on_episode(m):
            rows.append((m.episode + 1, m.total_reward, m.sink_received_bits,
                         m.total_sensed_bits, m.delivery_rate, m.wallclock_s))
            if want_detail(m.episode):
                detail_rows[m.episode + 1] = (m.per_node, m.sink)

        trainer.train(on_episode=on_episode,
                      checkpoint_dir=os.path.join(run_dir, "checkpoints"))
    else:
        if config.algorithm == "qtable":
            runner = QTableRunner(world, QTableConfig(gamma=config.gamma),
                                  reward_config=reward_config, seed=seed)
        else:
            runner = EsdsraaRunner(world, HeuristicConfig(),
                                   reward_config=reward_config)
        for episode in range(config.episodes):
            t0 = time.perf_counter()
            m = runner.run_episode(episode)
            rows.append((episode + 1, m.total_reward, m.sink_received_bits,
                         m.total_sensed_bits, m.delivery_rate,
                         time.perf_counter() - t0))
            if want_detail(episode):
                detail_rows[episode + 1] = (m.per_node, m.sink)
        if config.algorithm == "qtable":
            _save_qtables(runner, os.path.join(run_dir, "checkpoints"))

    _write_episodes_csv(os.path.join(run_dir, "episodes.csv"), rows)
    for day, (per_node, sink) in detail_rows.items():
        _write_detail_csv(os.path.join(run_dir, f"node_detail_{day:03d}.csv"),
                          per_node, sink, config)
    manifest = {
        "package_version": __version__,
        "config": config.to_dict(),
        "seed": seed,
        "wallclock_s": time.perf_counter() - t_run0,
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    problems = validate_run(run_dir)
    if problems:
        raise RuntimeError(f"{run_dir}: output validation failed: {problems}")
    return run_dir


def _save_qtables(runner: QTableRunner, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    arrays = {}
    for nid, agent in runner.agents.items():
        for key, row in agent.table.items():
            arrays[f"n{nid}_e{key[0]}_q{key[1]}_s{key[2]}"] = row
    np.savez(os.path.join(directory, "qtables-final.npz"), **arrays)


def _write_episodes_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPISODE_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(x) for x in row[:-1]])
    metrics_path = os.path.join(os.path.dirname(path), "training_metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _detail_node_ids(config: ExperimentConfig, per_node: dict) -> list[int]:
    if config.detail_nodes == "all":
        return sorted(per_node)
    if config.detail_nodes == "roles":
        return [n for n in DEFAULT_DETAIL_NODES if n in per_node]
    return [int(x) for x in config.detail_nodes.split(",")]


def _write_detail_csv(path: str, per_node: dict, sink: int,
                      config: ExperimentConfig) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETAIL_COLUMNS)
        for nid in _detail_node_ids(config, per_node):
            row = per_node[nid]
            writer.writerow([_fmt(nid), int(nid == sink)]
                            + [_fmt(row[c]) for c in DETAIL_COLUMNS[2:]])


# ---------------------------------------------------------------------------
# validation and summaries
# ---------------------------------------------------------------------------

def validate_run(run_dir: str) -> list[str]:
    """Post-write validation pass over a run directory's CSVs."""
    problems = []
    episodes_path = os.path.join(run_dir, "episodes.csv")
    try:
        with open(episodes_path) as fh:
            reader = csv.DictReader(fh)
            n = 0
            for row in reader:
                n += 1
                rate = float(row["delivery_rate"])
                if not (0.0 <= rate <= 1.0):
                    problems.append(f"episodes.csv row {n}: delivery_rate {rate}")
                if float(row["sink_bits"]) > float(row["sensed_bits"]):
                    problems.append(f"episodes.csv row {n}: sink > sensed")
            if n == 0:
                problems.append("episodes.csv: no rows")
    except OSError as exc:
        problems.append(str(exc))
    for name in sorted(os.listdir(run_dir)):
        if not name.startswith("node_detail_"):
            continue
        with open(os.path.join(run_dir, name)) as fh:
            for row in csv.DictReader(fh):
                if row["is_sink"] == "1":
                    continue  # the sink is a pure absorber
                lhs = int(row["sensed_bits"]) + int(row["received_bits"])
                rhs = (int(row["transmitted_ok_bits"]) + int(row["dropped_bits"])
                       + int(row["queued_bits_end"]) + int(row["in_flight_bits"]))
                if lhs != rhs:
                    problems.append(f"{name}: node {row['node']} conservation "
                                    f"{lhs} != {rhs}")
                e_res = float(row["e_res_end_j"])
                if not (-1e-9 <= e_res <= 1.0 + 1e-9):
                    problems.append(f"{name}: node {row['node']} energy {e_res}")
    return problems


def run_experiment(config: ExperimentConfig) -> list[str]:
    """Run every seed (in parallel processes when configured) and return the
    run directories."""
    os.makedirs(config.output_dir, exist_ok=True)
    seeds = list(config.seeds)
    jobs = config.jobs or min(len(seeds), os.cpu_count() or 1)
    if jobs <= 1 or len(seeds) == 1:
        return [run_single_seed(config, s) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor
    config_dict = config.to_dict()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_seed_job, config_dict, s) for s in seeds]
        return [f.result() for f in futures]


def _run_seed_job(config_dict: dict, seed: int) -> str:
    return run_single_seed(ExperimentConfig.from_dict(config_dict), seed)


_COMPARE_EXCLUDE = {"algorithm", "seeds", "output_dir", "jobs", "detail_days",
                    "detail_nodes", "event_log", "checkpoint_every"}


def summarize(run_dirs: list[str], output_dir: str | None = None) -> dict:
    """Merge runs into plot data and a comparison table.

    Returns {"plot_rows": [...], "table": {...}, "ratios": {...}} and writes
    plot_data.csv / summary.csv when output_dir is given. Runs with differing
    environment-relevant configs are rejected, listing the offending keys.
    """
    if not run_dirs:
        raise ValueError("no run directories given")
    manifests = []
    for d in run_dirs:
        try:
            with open(os.path.join(d, "manifest.json")) as fh:
                manifests.append((d, json.load(fh)))
        except OSError as exc:
            raise ValueError(f"{d}: missing manifest ({exc})") from exc

    base = manifests[0][1]["config"]
    differing = set()
    for _, man in manifests[1:]:
        cfg = man["config"]
        for key in set(base) | set(cfg):
            if key in _COMPARE_EXCLUDE:
                continue
            if base.get(key) != cfg.get(key):
                differing.add(key)
    if differing:
        raise ValueError(f"incompatible run configs; differing keys: "
                         f"{sorted(differing)}")

    plot_rows = []
    final5: dict[str, dict[int, dict[str, float]]] = {}
    for d, man in manifests:
        algorithm = man["config"]["algorithm"]
        seed = man["seed"]
        with open(os.path.join(d, "episodes.csv")) as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            day = int(row["episode"])
            for metric in ("total_reward", "sink_bits", "sensed_bits",
                           "delivery_rate"):
                plot_rows.append((day, algorithm, seed, metric, float(row[metric])))
        tail = rows[-5:]
        final5.setdefault(algorithm, {})[seed] = {
            "sink_bits": float(np.mean([float(r["sink_bits"]) for r in tail])),
            "delivery_rate": float(np.mean([float(r["delivery_rate"]) for r in tail])),
            "total_reward": float(np.mean([float(r["total_reward"]) for r in tail])),
        }

    table = {}
    for algorithm, per_seed in final5.items():
        sink = [v["sink_bits"] for v in per_seed.values()]
        rate = [v["delivery_rate"] for v in per_seed.values()]
        reward = [v["total_reward"] for v in per_seed.values()]
        table[algorithm] = {
            "seeds": len(per_seed),
            "final5_sink_bits_mean": float(np.mean(sink)),
            "final5_sink_bits_std": float(np.std(sink, ddof=1)) if len(sink) > 1 else 0.0,
            "final5_delivery_mean": float(np.mean(rate)),
            "final5_reward_mean": float(np.mean(reward)),
        }

    ratios = {}
    if "gap" in table:
        gap_sink = table["gap"]["final5_sink_bits_mean"]
        for other in ("qtable", "esdsraa", "gapr"):
            if other in table and table[other]["final5_sink_bits_mean"] > 0:
                ratios[f"gap_vs_{other}"] = gap_sink / table[other]["final5_sink_bits_mean"]

    result = {"plot_rows": plot_rows, "table": table, "ratios": ratios,
              "per_seed": final5}
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "plot_data.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("day", "algorithm", "seed", "metric", "value"))
            for row in plot_rows:
                writer.writerow([_fmt(x) for x in row])
        with open(os.path.join(output_dir, "summary.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("algorithm", "seeds", "final5_sink_bits_mean",
                             "final5_sink_bits_std", "final5_delivery_mean",
                             "final5_reward_mean"))
            for algorithm in sorted(table):
                t = table[algorithm]
                writer.writerow([algorithm, t["seeds"],
                                 _fmt(t["final5_sink_bits_mean"]),
                                 _fmt(t["final5_sink_bits_std"]),
                                 _fmt(t["final5_delivery_mean"]),
                                 _fmt(t["final5_reward_mean"])])
            for name, value in sorted(ratios.items()):
                writer.writerow([name, "", _fmt(value), "", "", ""])
    return result


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
