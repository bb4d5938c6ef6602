"""Synthetic data: a rectangular street grid and random-walk drives.

Every street carries one edge per direction, so ground truth can name
the directed segment actually traversed.  Walks advance at a jittered
speed along the grid, turning uniformly at intersections (U-turns only
at dead ends), and are sampled on the fine time grid.  The recorded
truth is exact; optional Gaussian noise perturbs only the emitted GPS
fixes.  Positions are nudged a tenth of a millimeter off intersection
nodes so a truth ratio is never exactly 0 or 1, which would make the
owning edge ambiguous.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geo import M_PER_DEG_LAT, offset_latlng
from .roadnet import RoadNetwork, build_edge
from .trajdata import MapMatchedTrajectory, Trajectory, TrajectoryRecord

# keep sampled positions strictly inside their edge
_NODE_CLEARANCE_M = 1e-4


@dataclass(frozen=True)
class SynthConfig:
    grid_nodes: int = 10  # nodes per side
    cell_len_m: float = 200.0
    n_traj: int = 20
    noise_sigma_m: float = 0.0
    epsilon: int = 15
    seed: int = 0
    base_lat: float = 40.0
    base_lng: float = -3.0
    min_slots: int = 24  # shortest walk, in fine intervals
    max_slots: int = 96
    base_time: int = 1_672_617_600  # 2023-01-02 00:00:00 UTC, a Monday

    def __post_init__(self) -> None:
        if self.grid_nodes < 2:
            raise ConfigError("grid needs at least 2 nodes per side")
        if self.cell_len_m <= 0 or self.epsilon <= 0 or self.n_traj < 1:
            raise ConfigError("invalid synthetic data parameters")
        if self.noise_sigma_m < 0:
            raise ConfigError("noise sigma cannot be negative")
        if not 2 <= self.min_slots <= self.max_slots:
            raise ConfigError("slot range must satisfy 2 <= min <= max")


def generate_network(cfg: SynthConfig) -> RoadNetwork:
    """Square grid with both travel directions per street.

    Node (row, col) has id row * grid_nodes + col.  Street k gets edge
    ids 2k (low node to high node) and 2k + 1 (the reverse), so an
    edge's opposite direction is always ``edge_id ^ 1``.
    """
    g = cfg.grid_nodes
    dlat = cfg.cell_len_m / M_PER_DEG_LAT
    dlng = cfg.cell_len_m / (M_PER_DEG_LAT * math.cos(math.radians(cfg.base_lat)))
    nodes = {
        r * g + c: (cfg.base_lat + r * dlat, cfg.base_lng + c * dlng)
        for r in range(g)
        for c in range(g)
    }

    streets: list[tuple[int, int]] = []
    for r in range(g):  # horizontal, row-major
        for c in range(g - 1):
            streets.append((r * g + c, r * g + c + 1))
    for r in range(g - 1):  # vertical
        for c in range(g):
            streets.append((r * g + c, (r + 1) * g + c))

    edges = []
    for k, (a, b) in enumerate(streets):
        poly_ab = np.array([nodes[a], nodes[b]], dtype=np.float64)
        edges.append(build_edge(2 * k, a, b, poly_ab))
        edges.append(build_edge(2 * k + 1, b, a, poly_ab[::-1].copy()))
    return RoadNetwork(nodes, edges)


def write_network_csv(net: RoadNetwork, nodes_path: str, edges_path: str) -> None:
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "lat", "lng"])
        for nid in sorted(net.nodes):
            lat, lng = net.nodes[nid]
            w.writerow([nid, repr(float(lat)), repr(float(lng))])
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge_id", "start_node", "end_node", "polyline"])
        for eid in net.edge_ids:
            e = net.edge(eid)
            poly = ";".join(f"{repr(float(p[0]))} {repr(float(p[1]))}" for p in e.polyline)
            w.writerow([eid, e.start_node, e.end_node, poly])


class _Walker:
    """Moves along directed edges, turning randomly at intersections."""

    def __init__(self, net: RoadNetwork, rng: np.random.Generator) -> None:
        self.net = net
        self.rng = rng
        # outgoing edge ids per node, in id order for determinism
        self.out_edges: dict[int, list[int]] = {n: [] for n in net.nodes}
        for eid in net.edge_ids:
            self.out_edges[net.edge(eid).start_node].append(eid)
        start = int(rng.choice(sorted(net.nodes)))
        self.edge_id = int(rng.choice(self.out_edges[start]))
        self.offset_m = float(rng.uniform(0.1, 0.9)) * net.edge(self.edge_id).length

    def advance(self, meters: float) -> None:
        self.offset_m += meters
        while self.offset_m >= self.net.edge(self.edge_id).length - _NODE_CLEARANCE_M:
            edge = self.net.edge(self.edge_id)
            self.offset_m -= edge.length
            options = self.out_edges[edge.end_node]
            forward = [e for e in options if e != (self.edge_id ^ 1)]
            pool = forward if forward else options
            self.edge_id = int(self.rng.choice(pool))
        if self.offset_m < _NODE_CLEARANCE_M:
            self.offset_m = _NODE_CLEARANCE_M

    def position(self) -> tuple[int, float, float, float]:
        """(edge_id, ratio, lat, lng) of the current location."""
        edge = self.net.edge(self.edge_id)
        ratio = self.offset_m / edge.length
        lat, lng = self.net.point_on_segment(self.edge_id, ratio)
        return self.edge_id, ratio, lat, lng


def generate_trajectories(net: RoadNetwork, cfg: SynthConfig) -> list[TrajectoryRecord]:
    rng = np.random.default_rng(cfg.seed)
    records = []
    for t_idx in range(cfg.n_traj):
        walker = _Walker(net, rng)
        n_slots = int(rng.integers(cfg.min_slots, cfg.max_slots + 1))
        t0 = cfg.base_time + int(rng.integers(0, 7 * 86400))
        mean_speed = float(rng.uniform(6.0, 14.0))

        edge_ids, ratios, lats, lngs, times = [], [], [], [], []
        for k in range(n_slots):
            if k > 0:
                speed = mean_speed * float(rng.normal(1.0, 0.05))
                speed = min(18.0, max(3.0, speed))
                walker.advance(speed * cfg.epsilon)
            eid, ratio, lat, lng = walker.position()
            edge_ids.append(eid)
            ratios.append(ratio)
            lats.append(lat)
            lngs.append(lng)
            times.append(t0 + k * cfg.epsilon)

        lats = np.array(lats)
        lngs = np.array(lngs)
        if cfg.noise_sigma_m > 0:
            for i in range(n_slots):
                north, east = rng.normal(0.0, cfg.noise_sigma_m, size=2)
                lats[i], lngs[i] = offset_latlng(float(lats[i]), float(lngs[i]), north, east)

        traj_id = f"synth-{t_idx:04d}"
        traj = Trajectory(
            traj_id, lats, lngs, np.array(times, dtype=np.int64), cfg.epsilon
        )
        matched = MapMatchedTrajectory(
            traj_id,
            np.array(edge_ids, dtype=np.int64),
            np.array(ratios, dtype=np.float64),
            np.array(times, dtype=np.int64),
            cfg.epsilon,
        )
        records.append(TrajectoryRecord(traj, matched))
    return records
