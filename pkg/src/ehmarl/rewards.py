"""Local and spatial rewards.

A successful relay earns a base reward plus a 1/k congestion term (k counts
the receiver's queued packets including the arriving one) plus a log bonus
when the receiver is the sink. All failure outcomes earn zero. The spatial
reward adds every other node's recent local rewards, discounted by inverse
distance, so a node is credited when its relays enable downstream progress.
The spatial form is a training-time construct; deployed policies never see it.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

from .events import FAILURE_OUTCOMES, SUCCESS_OUTCOMES, DELIVERED, StepEvent
from .topology import Topology


@dataclass(frozen=True)
class RewardConfig:
    lambda_base: float = 0.1
    device_count: int = 15
    normalized_distance: bool = False  # weight by range/d instead of 1/d
    range_zeta: float = 25.0

    def __post_init__(self):
        if self.lambda_base <= 0:
            raise ValueError("lambda_base must be positive")
        if self.device_count * self.lambda_base <= 1.0:
            raise ValueError(
                f"device_count * lambda_base must exceed 1 for a positive sink "
                f"bonus (got {self.device_count} * {self.lambda_base})")

    @property
    def sink_bonus(self) -> float:
        return math.log(self.device_count * self.lambda_base)


def local_reward(event: StepEvent, config: RewardConfig) -> float:
    """Reward for one resolved transmission attempt.

    Zero on every failure outcome (and on gated/idle epochs); on success,
    lambda + 1/k, plus the sink bonus when the receiver is the sink.
    """
    if event.outcome in SUCCESS_OUTCOMES:
        if event.k_after < 1:
            raise RuntimeError("successful transfer must count the arriving packet")
        bonus = config.sink_bonus if event.outcome == DELIVERED else 0.0
        return config.lambda_base + 1.0 / event.k_after + bonus
    return 0.0


class RewardLedger:
    """Per-node time-stamped local rewards for one episode.

    Append-only with per-node monotone timestamps; cleared at episode reset.
    Readers use cumulative sums, so window queries stay O(log n) and tolerate
    appends from a concurrent publisher (append-then-publish ordering).
    """

    def __init__(self):
        self._times: dict[int, list[float]] = {}
        self._cums: dict[int, list[float]] = {}

    def reset(self) -> None:
        self._times.clear()
        self._cums.clear()

    def append(self, node: int, t: float, reward: float) -> None:
        times = self._times.get(node)
        if times is None:
            self._times[node] = [t]
            self._cums[node] = [reward]
            return
        if t < times[-1]:
            raise ValueError(f"node {node}: timestamps must be monotone "
                             f"({t} after {times[-1]})")
        cums = self._cums[node]
        times.append(t)
        cums.append(cums[-1] + reward)

    def _cum_at(self, node: int, t: float) -> float:
        times = self._times.get(node)
        if not times:
            return 0.0
        idx = bisect_right(times, t) - 1
        return self._cums[node][idx] if idx >= 0 else 0.0

    def window_sum(self, node: int, t_start: float, t_end: float) -> float:
        """Sum of node's rewards with timestamps in (t_start, t_end]."""
        return self._cum_at(node, t_end) - self._cum_at(node, t_start)

    def total(self, node: int) -> float:
        cums = self._cums.get(node)
        return cums[-1] if cums else 0.0


def spatial_reward(node: int, own_reward: float, window_start: float,
                   window_end: float, ledger: RewardLedger,
                   topology: Topology, config: RewardConfig) -> float:
    """Own reward plus distance-discounted rewards other nodes earned in the
    window between this agent's consecutive actions (half-open, right
    inclusive)."""
    sr = own_reward
    for j in ledger._times:
        if j == node:
            continue
        contribution = ledger.window_sum(j, window_start, window_end)
        if contribution != 0.0:
            d = topology.distance(node, j)
            w = (config.range_zeta / d) if config.normalized_distance else (1.0 / d)
            sr += w * contribution
    return sr
