"""Per-node energy accounting: harvesting traces and activity consumption.

Residual energy is clamped to [0, capacity]. Harvest that arrives while the
store is full is discarded but tracked (``clipped``); consumption that would
push the store negative is capped at the harvest inflow from the depletion
instant onward, so the balance identity

    e_res == e_init + harvested - clipped - sum(consumed per activity)

holds exactly at every step.
"""

from __future__ import annotations

import csv
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

ACTIVITIES = ("trans", "recv", "sleep", "sense")

OK = "ok"
DEPLETED = "depleted"
CLIPPED = "clipped"


@dataclass(frozen=True)
class PowerProfile:
    """Activity power draws in watts."""

    trans: float = 0.1
    recv: float = 0.05
    sleep: float = 0.0005
    sense: float = 0.01

    def __post_init__(self):
        for name in ACTIVITIES:
            if getattr(self, name) <= 0:
                raise ValueError(f"power for {name!r} must be strictly positive")

    def power(self, activity: str) -> float:
        if activity not in ACTIVITIES:
            raise ValueError(f"unknown activity {activity!r}")
        return getattr(self, activity)


class HarvestTrace:
    """Time-ordered (t_seconds, watts) samples with step-hold interpolation.

    Holds either one shared sample series or a per-node mapping. Immutable
    after construction; shareable across workers.
    """

    def __init__(self, samples=None, per_node: dict[int, list[tuple[float, float]]] | None = None):
        if (samples is None) == (per_node is None):
            raise ValueError("provide exactly one of samples or per_node")
        self._series: dict[int | None, tuple[list[float], list[float]]] = {}
        if samples is not None:
            self._series[None] = _validate_samples(samples)
        else:
            for node, s in per_node.items():
                self._series[node] = _validate_samples(s)

    @property
    def is_shared(self) -> bool:
        return None in self._series

    def power_at(self, node: int, t: float) -> float:
        times, watts = self._series.get(node, self._series.get(None, (None, None)))
        if times is None:
            raise KeyError(f"no harvest trace for node {node}")
        idx = bisect_right(times, t) - 1
        if idx < 0:
            raise ValueError(f"time {t} precedes first trace sample {times[0]}")
        return watts[idx]

    def samples_for(self, node: int) -> list[tuple[float, float]]:
        times, watts = self._series.get(node, self._series.get(None, (None, None)))
        if times is None:
            raise KeyError(f"no harvest trace for node {node}")
        return list(zip(times, watts))


def _validate_samples(samples) -> tuple[list[float], list[float]]:
    times = [float(t) for t, _ in samples]
    watts = [float(p) for _, p in samples]
    if not times:
        raise ValueError("trace must have at least one sample")
    if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
        raise ValueError("trace timestamps must be strictly increasing")
    if any(p < 0 for p in watts):
        raise ValueError("trace power must be nonnegative")
    return times, watts


def harvest_power_at(trace: HarvestTrace, node: int, t: float) -> float:
    """Step-hold interpolated harvest power for a node at time t."""
    return trace.power_at(node, t)


def generate_synthetic_trace(
    p_peak: float = 0.08,
    day_start: float = 8 * 3600.0,
    day_end: float = 17 * 3600.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
    sample_period: float = 60.0,
) -> list[tuple[float, float]]:
    """Half-sine diurnal profile sampled every ``sample_period`` seconds.

    p(t) = p_peak * max(0, sin(pi * (t - start) / (end - start))), each sample
    multiplied by a clamped-at-zero Gaussian factor (1 + eps). Deterministic
    per seed.
    """
    if p_peak <= 0:
        raise ValueError(f"p_peak must be positive, got {p_peak}")
    if day_start >= day_end:
        raise ValueError("day_start must precede day_end")
    rng = np.random.default_rng(seed)
    span = day_end - day_start
    samples = []
    t = day_start
    while t <= day_end:
        base = p_peak * max(0.0, np.sin(np.pi * (t - day_start) / span))
        factor = max(0.0, 1.0 + rng.normal(0.0, noise_sigma)) if noise_sigma > 0 else 1.0
        samples.append((t, float(base * factor)))
        t += sample_period
    return samples


def load_trace_csv(path: str) -> list[tuple[float, float]]:
    """Read rows of ``t_seconds,power_watts`` (header optional)."""
    samples = []
    with open(path) as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                samples.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if lineno == 1:  # tolerate a header row
                    continue
                raise ValueError(f"{path}: line {lineno}: expected t_seconds,power_watts")
    if not samples:
        raise ValueError(f"{path}: no samples")
    return samples


def save_trace_csv(samples: list[tuple[float, float]], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_seconds", "power_watts"])
        for t, p in samples:
            writer.writerow([f"{t:.10g}", f"{p:.10g}"])


@dataclass
class EnergyState:
    """Residual-energy store for one node, with per-activity bookkeeping."""

    e_max: float = 1.0
    e_res: float = 1.0
    e_init: float = 1.0
    harvested: float = 0.0
    clipped: float = 0.0
    consumed: dict[str, float] = field(default_factory=lambda: dict.fromkeys(ACTIVITIES, 0.0))

    def reset(self, e_res: float | None = None) -> None:
        self.e_res = self.e_max if e_res is None else e_res
        self.e_init = self.e_res
        self.harvested = 0.0
        self.clipped = 0.0
        self.consumed = dict.fromkeys(ACTIVITIES, 0.0)

    def balance_error(self) -> float:
        return self.e_res - (self.e_init + self.harvested - self.clipped
                             - sum(self.consumed.values()))

    def advance(self, powers: dict[str, float], harvest_w: float, dt: float):
        """Integrate constant activity powers and harvest over dt seconds.

        Returns (outcome, t_event): outcome is OK, DEPLETED, or CLIPPED;
        t_event is the within-interval instant the store hit a bound (dt if
        no bound was hit). After depletion, residual activity draw is capped
        at the harvest inflow so e_res stays pinned at zero.
        """
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        total_power = 0.0
        for p in powers.values():
            total_power += p
        net = harvest_w - total_power
        self.harvested += harvest_w * dt

        if net >= 0.0:
            raw = self.e_res + net * dt
            if raw > self.e_max:
                t_clip = dt if net == 0.0 else (self.e_max - self.e_res) / net
                self.e_res = self.e_max
                self.clipped += raw - self.e_max
                for act, p in powers.items():
                    self.consumed[act] += p * dt
                return CLIPPED, min(t_clip, dt)
            self.e_res = raw
            for act, p in powers.items():
                self.consumed[act] += p * dt
            return OK, dt

        t_dep = self.e_res / -net
        if t_dep >= dt:
            self.e_res += net * dt
            if self.e_res < 0.0:  # round-off guard
                self.e_res = 0.0
            for act, p in powers.items():
                self.consumed[act] += p * dt
            return (DEPLETED, dt) if self.e_res == 0.0 else (OK, dt)

        # Depleted mid-interval: full draw until t_dep, then only what the
        # harvest delivers, attributed pro-rata across activities.
        remainder = dt - t_dep
        for act, p in powers.items():
            share = p / total_power if total_power > 0 else 0.0
            self.consumed[act] += p * t_dep + harvest_w * remainder * share
        self.e_res = 0.0
        return DEPLETED, t_dep


def advance_energy(state: EnergyState, profile: PowerProfile, activity: str,
                   harvest_w: float, dt: float):
    """Single-activity convenience wrapper around EnergyState.advance."""
    return state.advance({activity: profile.power(activity)}, harvest_w, dt)
