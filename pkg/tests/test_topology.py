import math

import numpy as np
import pytest

from ehmarl.topology import (RateModel, TopologyError, build_topology, dump_topology,
                             fifteen_node_fixture, load_topology, transmission_rate,
                             transmission_time)


def two_node_topology(d, zeta=25.0):
    return build_topology([(0, 0.0, 0.0), (1, d, 0.0)], sink=1, range_zeta=zeta)


def test_boundary_distance_counts_as_neighbor():
    topo = two_node_topology(25.0)
    assert topo.are_neighbors(0, 1) and topo.are_neighbors(1, 0)


def test_just_out_of_range_not_neighbors():
    with pytest.warns(UserWarning):
        topo = two_node_topology(25.01)
    assert not topo.are_neighbors(0, 1)


def test_duplicate_ids_rejected():
    with pytest.raises(TopologyError, match="duplicate"):
        build_topology([(0, 0, 0), (0, 1, 1)], sink=0, range_zeta=25)


def test_non_finite_coordinate_rejected():
    with pytest.raises(TopologyError, match="non-finite"):
        build_topology([(0, 0, 0), (1, math.nan, 1)], sink=0, range_zeta=25)


def test_missing_sink_rejected():
    with pytest.raises(TopologyError, match="sink"):
        build_topology([(0, 0, 0), (1, 1, 1)], sink=5, range_zeta=25)


def test_coincident_nodes_rejected():
    with pytest.raises(TopologyError, match="coincident"):
        build_topology([(0, 3.0, 4.0), (1, 3.0, 4.0)], sink=0, range_zeta=25)


def test_isolated_node_warns():
    with pytest.warns(UserWarning, match="no neighbors"):
        build_topology([(0, 0, 0), (1, 10, 0), (2, 500, 500)], sink=0, range_zeta=25)


def test_neighbor_symmetry_random_layouts():
    # Symmetry and the distance-threshold characterization over random layouts.
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        pts = [(i, float(x), float(y))
               for i, (x, y) in enumerate(rng.uniform(0, 80, size=(n, 2)))]
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            topo = build_topology(pts, sink=0, range_zeta=25.0)
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                d = topo.distance(i, j)
                assert (j in topo.neighbors[i]) == (d <= 25.0)
                assert (j in topo.neighbors[i]) == (i in topo.neighbors[j])
        assert np.allclose(topo.dist, topo.dist.T)
        assert np.all(np.diag(topo.dist) == 0.0)


def test_fifteen_node_fixture_structure():
    topo = fifteen_node_fixture()
    assert topo.device_count == 15
    sink = topo.sink
    # Every device is connected; the sink has at least two one-hop neighbors.
    for i in topo.device_ids:
        assert topo.neighbors[i], f"device {i} is isolated"
        assert topo.hop_distance(i, sink) >= 1
    assert len(topo.neighbors[sink]) >= 2
    # Structural roles: 4 sink-adjacent, 9 adjacent to 4 but not the sink,
    # 7 a low-degree corner node at least 3 hops out.
    assert topo.are_neighbors(4, sink)
    assert topo.are_neighbors(9, 4) and not topo.are_neighbors(9, sink)
    assert len(topo.neighbors[7]) <= 2
    assert topo.hop_distance(7, sink) >= 3
    # Field bounds from the layout decision.
    for x, y in topo.positions.values():
        assert 0 <= x <= 100 and 0 <= y <= 60


def test_constant_rate_mode():
    topo = two_node_topology(20.0)
    model = RateModel(mode="constant", constant_rate=2560.0)
    assert transmission_rate(topo, model, 0, 1) == 2560.0


def test_log_distance_monotone_in_distance():
    topo = build_topology([(0, 0, 0), (1, 10, 0), (2, 0, 20)], sink=0, range_zeta=25)
    model = RateModel(mode="log-distance")
    r_near = transmission_rate(topo, model, 0, 1)
    r_far = transmission_rate(topo, model, 0, 2)
    assert r_near > r_far > 0


def test_log_distance_golden_value_at_25m():
    # Independent evaluation of the configured formula at d = 25 m:
    # rate = B * log2(1 + P_tx * d^-alpha / noise).
    expected = 1000.0 * math.log2(1.0 + 0.1 * 25.0 ** -2 / 1e-4)
    topo = two_node_topology(25.0)
    model = RateModel(mode="log-distance")
    rate = transmission_rate(topo, model, 0, 1)
    assert rate == pytest.approx(expected, rel=1e-12)
    # A max-size packet takes between 1 and 10 seconds at this rate.
    assert 1.0 < 5120.0 / rate < 10.0
    assert transmission_time(5120.0, rate) == pytest.approx(5120.0 / expected, rel=1e-12)


def test_non_neighbor_rate_rejected():
    with pytest.warns(UserWarning):
        topo = two_node_topology(30.0)
    with pytest.raises(ValueError, match="not neighbors"):
        transmission_rate(topo, RateModel(), 0, 1)


def test_transmission_time_division():
    assert transmission_time(5120, 2560.0) == 2.0
    assert transmission_time(3720, 3720.0) == 1.0
    with pytest.raises(ValueError):
        transmission_time(5120, 0.0)
    with pytest.raises(ValueError):
        transmission_time(5120, -1.0)


def test_time_rate_roundtrip_property():
    rng = np.random.default_rng(3)
    for _ in range(200):
        bits = float(rng.integers(1, 10_000_000))
        rate = float(rng.uniform(1e-3, 1e6))
        assert transmission_time(bits, rate) * rate == pytest.approx(bits, rel=1e-12)


def test_topology_file_roundtrip(tmp_path):
    topo = fifteen_node_fixture()
    path = tmp_path / "topo.yaml"
    dump_topology(topo, str(path))
    loaded = load_topology(str(path))
    assert loaded.positions == topo.positions
    assert loaded.sink == topo.sink
    assert loaded.neighbors == topo.neighbors


def test_topology_file_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nodes: [{id: 0, x: 1}]\nsink_id: 0\nrange_m: 25\n")
    with pytest.raises(TopologyError, match=r"nodes\[0\]"):
        load_topology(str(bad))
    missing = tmp_path / "missing.yaml"
    missing.write_text("nodes: []\n")
    with pytest.raises(TopologyError, match="missing required key"):
        load_topology(str(missing))
    syntax = tmp_path / "syntax.yaml"
    syntax.write_text("nodes: [{id: 0, x: 1, y: 2}\nsink_id: 0\n")
    with pytest.raises(TopologyError, match="line"):
        load_topology(str(syntax))
