import math

import pytest

from ehmarl import events as ev
from ehmarl.events import StepEvent
from ehmarl.rewards import RewardConfig, RewardLedger, local_reward, spatial_reward
from ehmarl.topology import build_topology


def make_event(outcome, k_after=0, to_sink=False):
    return StepEvent(t=0.0, node=0, outcome=outcome, dest=1, packet_id=1,
                     size_bits=4000, k_after=k_after, to_sink=to_sink)


def test_relay_reward_value():
    cfg = RewardConfig()
    r = local_reward(make_event(ev.RELAYED, k_after=2), cfg)
    assert r == pytest.approx(0.6, abs=1e-12)  # 0.1 + 1/2


def test_sink_delivery_reward_value():
    cfg = RewardConfig(lambda_base=0.1, device_count=15)
    r = local_reward(make_event(ev.DELIVERED, k_after=1, to_sink=True), cfg)
    assert r == pytest.approx(0.1 + 1.0 + math.log(1.5), abs=1e-12)
    assert r == pytest.approx(1.5054651081, abs=1e-9)


def test_failures_earn_zero():
    cfg = RewardConfig()
    for outcome in sorted(ev.FAILURE_OUTCOMES):
        assert local_reward(make_event(outcome), cfg) == 0.0
    assert local_reward(make_event(ev.TRANSMITTER_DEPLETED), cfg) == 0.0
    assert local_reward(make_event(ev.GATED), cfg) == 0.0
    assert local_reward(make_event(ev.IDLE), cfg) == 0.0


def test_success_strictly_positive_and_decreasing_in_queue_length():
    cfg = RewardConfig()
    last = float("inf")
    for k in range(1, 20):
        r = local_reward(make_event(ev.RELAYED, k_after=k), cfg)
        assert 0.0 < r < last
        last = r


def test_sink_delivery_dominates_relay_at_equal_k():
    cfg = RewardConfig()
    for k in range(1, 16):
        sink = local_reward(make_event(ev.DELIVERED, k_after=k, to_sink=True), cfg)
        relay = local_reward(make_event(ev.RELAYED, k_after=k), cfg)
        assert sink > relay


def test_zero_k_on_success_is_an_error():
    with pytest.raises(RuntimeError):
        local_reward(make_event(ev.RELAYED, k_after=0), RewardConfig())


def test_config_requires_positive_sink_bonus():
    with pytest.raises(ValueError):
        RewardConfig(lambda_base=0.1, device_count=10)  # 10 * 0.1 = 1 -> log 0
    with pytest.raises(ValueError):
        RewardConfig(lambda_base=-1.0)
    assert RewardConfig(device_count=15).sink_bonus == pytest.approx(math.log(1.5))


def test_ledger_window_sums():
    ledger = RewardLedger()
    ledger.append(3, 10.0, 1.0)
    ledger.append(3, 12.0, 0.5)
    ledger.append(3, 20.0, 2.0)
    assert ledger.window_sum(3, 0.0, 30.0) == pytest.approx(3.5)
    assert ledger.window_sum(3, 10.0, 20.0) == pytest.approx(2.5)  # (10, 20]
    assert ledger.window_sum(3, 9.0, 10.0) == pytest.approx(1.0)   # right inclusive
    assert ledger.window_sum(3, 20.0, 25.0) == 0.0
    assert ledger.window_sum(5, 0.0, 100.0) == 0.0
    assert ledger.total(3) == pytest.approx(3.5)


def test_ledger_rejects_time_travel():
    ledger = RewardLedger()
    ledger.append(1, 5.0, 1.0)
    with pytest.raises(ValueError):
        ledger.append(1, 4.0, 1.0)
    ledger.append(1, 5.0, 1.0)  # equal timestamps allowed


def test_ledger_reset():
    ledger = RewardLedger()
    ledger.append(1, 5.0, 1.0)
    ledger.reset()
    assert ledger.window_sum(1, 0.0, 10.0) == 0.0


def line_topology():
    return build_topology([(0, 0.0, 0.0), (1, 10.0, 0.0), (2, 20.0, 0.0)],
                          sink=2, range_zeta=12.0)


def test_spatial_reward_two_node_example():
    # sr = 0.6 + (1/10) * 2.0 when the peer earned 1.0 twice in the window.
    topo = line_topology()
    cfg = RewardConfig()
    ledger = RewardLedger()
    ledger.append(1, 4.0, 1.0)
    ledger.append(1, 6.0, 1.0)
    sr = spatial_reward(0, 0.6, 2.0, 7.0, ledger, topo, cfg)
    assert sr == pytest.approx(0.8, abs=1e-12)


def test_spatial_reward_empty_window_equals_local():
    topo = line_topology()
    cfg = RewardConfig()
    ledger = RewardLedger()
    ledger.append(1, 100.0, 5.0)  # outside the window
    assert spatial_reward(0, 0.6, 0.0, 50.0, ledger, topo, cfg) == pytest.approx(0.6)
    assert spatial_reward(0, 0.6, 0.0, 50.0, RewardLedger(), topo, cfg) == pytest.approx(0.6)


def test_spatial_reward_excludes_own_entries():
    topo = line_topology()
    cfg = RewardConfig()
    ledger = RewardLedger()
    ledger.append(0, 5.0, 3.0)  # the agent's own reward is not double counted
    assert spatial_reward(0, 0.6, 0.0, 10.0, ledger, topo, cfg) == pytest.approx(0.6)


def test_spatial_reward_normalized_distance_mode():
    topo = line_topology()
    cfg = RewardConfig(normalized_distance=True, range_zeta=25.0)
    ledger = RewardLedger()
    ledger.append(1, 4.0, 1.0)
    sr = spatial_reward(0, 0.0, 0.0, 10.0, ledger, topo, cfg)
    assert sr == pytest.approx(25.0 / 10.0, abs=1e-12)


def test_spatial_reward_ge_local_property():
    # All local rewards are nonnegative, so sr >= r always.
    import numpy as np
    topo = line_topology()
    cfg = RewardConfig()
    rng = np.random.default_rng(2)
    ledger = RewardLedger()
    t = 0.0
    for _ in range(500):
        t += float(rng.uniform(0.0, 2.0))
        ledger.append(int(rng.integers(0, 2)), t, float(rng.uniform(0.0, 1.6)))
    for _ in range(100):
        a = float(rng.uniform(0, t))
        b = a + float(rng.uniform(0, t / 2))
        r = float(rng.uniform(0.0, 1.6))
        assert spatial_reward(0, r, a, b, ledger, topo, cfg) >= r - 1e-12


def test_spatial_reward_brute_force_oracle():
    # Independent O(n) re-summation over raw (t, r) entries.
    import numpy as np
    topo = line_topology()
    cfg = RewardConfig()
    ledger = RewardLedger()
    raw = []
    rng = np.random.default_rng(9)
    t = 0.0
    for _ in range(300):
        t += float(rng.uniform(0.01, 3.0))
        node = int(rng.integers(0, 2))
        r = float(rng.uniform(0.0, 1.5))
        ledger.append(node, t, r)
        raw.append((node, t, r))
    for _ in range(50):
        a = float(rng.uniform(0, t))
        b = a + float(rng.uniform(0, 20.0))
        own = float(rng.uniform(0, 1.5))
        expected = own + sum((1.0 / topo.distance(0, n)) * r
                             for n, ts, r in raw if n != 0 and a < ts <= b)
        got = spatial_reward(0, own, a, b, ledger, topo, cfg)
        assert got == pytest.approx(expected, abs=1e-12)
