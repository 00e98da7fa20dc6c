"""Static network description: node placement, neighbor discovery, link rates.

Nodes live on a 2-D plane. Two nodes are one-hop neighbors when their
euclidean distance is at most the transmission range (boundary inclusive).
The sink is an ordinary node position-wise but never senses or transmits.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml

NodeId = int


class TopologyError(ValueError):
    """Raised for invalid node placements or malformed topology files."""


@dataclass(frozen=True)
class Topology:
    """Immutable network layout with precomputed neighbor sets and distances.

    Safe to share read-only across concurrent workers.
    """

    positions: dict[NodeId, tuple[float, float]]
    sink: NodeId
    range_zeta: float
    neighbors: dict[NodeId, tuple[NodeId, ...]] = field(repr=False)
    dist: np.ndarray = field(repr=False)  # indexed [i, j], symmetric, zero diagonal

    @property
    def node_count(self) -> int:
        return len(self.positions)

    @property
    def device_count(self) -> int:
        """Number of sensing devices (all nodes except the sink)."""
        return len(self.positions) - 1

    @property
    def device_ids(self) -> list[NodeId]:
        return [i for i in sorted(self.positions) if i != self.sink]

    def distance(self, i: NodeId, j: NodeId) -> float:
        return float(self.dist[i, j])

    def are_neighbors(self, i: NodeId, j: NodeId) -> bool:
        return j in self.neighbors[i]

    def hop_distance(self, i: NodeId, j: NodeId) -> int:
        """BFS hop count from i to j; -1 if unreachable."""
        if i == j:
            return 0
        seen = {i}
        frontier = [i]
        hops = 0
        while frontier:
            hops += 1
            nxt = []
            for u in frontier:
                for v in self.neighbors[u]:
                    if v == j:
                        return hops
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        return -1


def build_topology(
    positions: list[tuple[NodeId, float, float]],
    sink: NodeId,
    range_zeta: float,
) -> Topology:
    """Validate placements and derive neighbor sets plus the distance matrix.

    Boundary rule: distance exactly equal to ``range_zeta`` counts as
    in-range. Nodes with no neighbors are allowed but trigger a warning
    (they can never deliver data).
    """
    if not positions:
        raise TopologyError("no node positions given")
    ids = [nid for nid, _, _ in positions]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise TopologyError(f"duplicate node ids: {dupes}")
    if sorted(ids) != list(range(len(ids))):
        raise TopologyError(f"node ids must be contiguous 0..{len(ids) - 1}, got {sorted(ids)}")
    if sink not in ids:
        raise TopologyError(f"sink id {sink} not among node ids")
    if not (range_zeta > 0 and math.isfinite(range_zeta)):
        raise TopologyError(f"transmission range must be positive and finite, got {range_zeta}")

    pos: dict[NodeId, tuple[float, float]] = {}
    for nid, x, y in positions:
        if not (math.isfinite(x) and math.isfinite(y)):
            raise TopologyError(f"node {nid}: non-finite coordinate ({x}, {y})")
        pos[nid] = (float(x), float(y))

    n = len(pos)
    xy = np.array([pos[i] for i in range(n)], dtype=np.float64)
    diff = xy[:, None, :] - xy[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))

    # Coincident distinct nodes break the 1/d spatial-reward weighting downstream.
    zero_pairs = np.argwhere((dist == 0.0) & ~np.eye(n, dtype=bool))
    if zero_pairs.size:
        i, j = zero_pairs[0]
        raise TopologyError(f"nodes {i} and {j} are coincident")

    neighbors: dict[NodeId, tuple[NodeId, ...]] = {}
    for i in range(n):
        neighbors[i] = tuple(j for j in range(n) if j != i and dist[i, j] <= range_zeta)

    for i in range(n):
        if i != sink and not neighbors[i]:
            warnings.warn(f"node {i} has no neighbors and can never deliver data", stacklevel=2)

    dist.setflags(write=False)
    return Topology(positions=pos, sink=sink, range_zeta=float(range_zeta),
                    neighbors=neighbors, dist=dist)


@dataclass(frozen=True)
class RateModel:
    """Link transmission-rate model.

    ``constant`` mode returns the same rate for every neighbor pair. The
    default 2560 bits/s makes a max-size (5120 bit) packet take 2 s.
    ``log-distance`` mode computes a bandwidth-scaled log2(1 + SNR) rate
    with an inverse-power path loss, so rate strictly decreases with
    distance.
    """

    mode: str = "constant"
    constant_rate: float = 2560.0
    bandwidth: float = 1000.0
    tx_power_w: float = 0.1
    noise_floor: float = 1e-4
    path_loss_exponent: float = 2.0

    def __post_init__(self):
        if self.mode not in ("constant", "log-distance"):
            raise ValueError(f"unknown rate model mode: {self.mode!r}")
        if self.mode == "constant" and self.constant_rate <= 0:
            raise ValueError("constant_rate must be positive")


def transmission_rate(topology: Topology, model: RateModel, i: NodeId, j: NodeId) -> float:
    """Rate in bits/s for the link i -> j. Requires j to be a neighbor of i."""
    if not topology.are_neighbors(i, j):
        raise ValueError(f"nodes {i} and {j} are not neighbors; routing to an "
                         f"out-of-range node is a caller bug")
    if model.mode == "constant":
        return model.constant_rate
    d = topology.distance(i, j)
    snr = model.tx_power_w * d ** (-model.path_loss_exponent) / model.noise_floor
    return model.bandwidth * math.log2(1.0 + snr)


def transmission_time(packet_bits: float, rate: float) -> float:
    """Seconds to push packet_bits over a link at the given rate."""
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    if packet_bits <= 0:
        raise ValueError(f"packet size must be positive, got {packet_bits}")
    return packet_bits / rate


# Hand-placed 15-device layout in a 100 m x 60 m field, range 25 m.
# Structural roles: node 4 is sink-adjacent near the network center,
# node 7 is a degree-1 corner node several hops out, node 9 neighbors
# node 4 but not the sink. Five devices sit within sink range so the
# ingress cut can carry the whole network's sensed load. Sink id 15.
FIFTEEN_NODE_POSITIONS: list[tuple[NodeId, float, float]] = [
    (0, 8.0, 8.0),
    (1, 22.0, 16.0),
    (2, 10.0, 30.0),
    (3, 25.0, 40.0),
    (4, 55.0, 30.0),
    (5, 40.0, 12.0),
    (6, 28.0, 55.0),
    (7, 4.0, 57.0),
    (8, 55.0, 47.0),
    (9, 38.0, 34.0),
    (10, 55.0, 5.0),
    (11, 62.0, 47.0),
    (12, 50.0, 40.0),
    (13, 64.0, 12.0),
    (14, 20.0, 28.0),
    (15, 72.0, 30.0),
]
FIFTEEN_NODE_SINK: NodeId = 15


def fifteen_node_fixture(range_zeta: float = 25.0) -> Topology:
    """The default 15-device experiment topology."""
    return build_topology(FIFTEEN_NODE_POSITIONS, FIFTEEN_NODE_SINK, range_zeta)


def load_topology(path: str) -> Topology:
    """Load a topology from a YAML file.

    Expected shape::

        nodes:
          - {id: 0, x: 8.0, y: 8.0}
          - ...
        sink_id: 15
        range_m: 25.0
    """
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}" if mark is not None else "unknown location"
        raise TopologyError(f"{path}: parse error at {where}: {exc.problem}") from exc
    except OSError as exc:
        raise TopologyError(f"{path}: {exc}") from exc

    if not isinstance(doc, dict):
        raise TopologyError(f"{path}: expected a mapping at top level")
    for key in ("nodes", "sink_id", "range_m"):
        if key not in doc:
            raise TopologyError(f"{path}: missing required key {key!r}")

    positions = []
    for idx, entry in enumerate(doc["nodes"]):
        if not isinstance(entry, dict) or not {"id", "x", "y"} <= set(entry):
            raise TopologyError(f"{path}: nodes[{idx}] must have id, x, y")
        try:
            positions.append((int(entry["id"]), float(entry["x"]), float(entry["y"])))
        except (TypeError, ValueError) as exc:
            raise TopologyError(f"{path}: nodes[{idx}]: {exc}") from exc
    try:
        return build_topology(positions, int(doc["sink_id"]), float(doc["range_m"]))
    except TopologyError as exc:
        raise TopologyError(f"{path}: {exc}") from exc


def dump_topology(topology: Topology, path: str) -> None:
    """Write a topology in the format load_topology reads."""
    doc = {
        "nodes": [{"id": i, "x": x, "y": y} for i, (x, y) in sorted(topology.positions.items())],
        "sink_id": topology.sink,
        "range_m": topology.range_zeta,
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
