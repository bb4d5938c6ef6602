"""Directed road network with spatial queries and on-road distances.

Nodes are intersections, edges are road segments with a polyline
geometry.  Edge lengths are always recomputed from the polyline at load
time.  A uniform lat/lng grid over the network bounds serves as the
spatial index; its cell size defaults to the radius of the queries it
answers, so a radius query only has to inspect a handful of cells.

Positions on the network are (edge, ratio) pairs with ratio in [0, 1]
measured as arc length from the edge's start node.  Two distances are
provided:

* ``rn_dist``       shortest on-road distance treating every edge as
                    traversable in both directions (used by evaluation
                    metrics).  Returns ``math.inf`` when the two points
                    are not connected.
* ``route_dist``    shortest driving distance respecting edge direction
                    (used by the map matcher's transition model).
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, ParseError
from .geo import (
    M_PER_DEG_LAT,
    haversine_m,
    haversine_m_arr,
    local_xy,
    point_segment_xy,
)

UNREACHABLE = math.inf

# two node coordinates closer than this (degrees) are considered the same place
_COORD_TOL_DEG = 1e-6
# distance ties below this (meters) are broken by edge id
_DIST_TIE_M = 1e-9


@dataclass(frozen=True)
class Edge:
    edge_id: int
    start_node: int
    end_node: int
    polyline: np.ndarray = field(repr=False)  # [P, 2] (lat, lng)
    length: float  # meters, recomputed from the polyline
    cum_lengths: np.ndarray = field(repr=False)  # [P] cumulative arc length


@dataclass(frozen=True)
class MatchedPoint:
    """A position on the road network at a point in time."""

    edge_id: int
    ratio: float  # fraction of edge length from the start node, in [0, 1]
    time: int  # epoch seconds


class RoadNetwork:
    """Immutable road graph with a uniform-grid spatial index.

    Shortest-path results are cached per source node; the caches are the
    only mutable state and are filled lazily.
    """

    def __init__(
        self,
        nodes: dict[int, tuple[float, float]],
        edges: list[Edge],
        cell_size_m: float = 50.0,
    ) -> None:
        if not nodes or not edges:
            raise IntegrityError("road network must have at least one node and one edge")
        self.nodes = dict(nodes)
        self.edges: dict[int, Edge] = {}
        for e in edges:
            if e.edge_id in self.edges:
                raise IntegrityError(f"duplicate edge id {e.edge_id}")
            if e.start_node not in self.nodes:
                raise IntegrityError(f"edge {e.edge_id} references unknown node {e.start_node}")
            if e.end_node not in self.nodes:
                raise IntegrityError(f"edge {e.edge_id} references unknown node {e.end_node}")
            if e.length <= 0.0:
                raise IntegrityError(f"edge {e.edge_id} has non-positive length")
            self.edges[e.edge_id] = e

        self.edge_ids: list[int] = sorted(self.edges)
        self._edge_index = {eid: i for i, eid in enumerate(self.edge_ids)}

        node_arr = np.array([self.nodes[n] for n in self.nodes], dtype=np.float64)
        poly_lats = np.concatenate([self.edges[e].polyline[:, 0] for e in self.edge_ids])
        poly_lngs = np.concatenate([self.edges[e].polyline[:, 1] for e in self.edge_ids])
        self.lat_min = float(min(node_arr[:, 0].min(), poly_lats.min()))
        self.lat_max = float(max(node_arr[:, 0].max(), poly_lats.max()))
        self.lng_min = float(min(node_arr[:, 1].min(), poly_lngs.min()))
        self.lng_max = float(max(node_arr[:, 1].max(), poly_lngs.max()))

        mid_lat = 0.5 * (self.lat_min + self.lat_max)
        self._cell_dlat = cell_size_m / M_PER_DEG_LAT
        self._cell_dlng = cell_size_m / (M_PER_DEG_LAT * max(0.01, math.cos(math.radians(mid_lat))))
        self._grid: dict[tuple[int, int], list[int]] = {}
        self._build_spatial_index()

        # adjacency: directed for routing, undirected for the evaluation metric
        self._adj_directed: dict[int, list[tuple[int, float]]] = {n: [] for n in self.nodes}
        self._adj_undirected: dict[int, list[tuple[int, float]]] = {n: [] for n in self.nodes}
        for e in self.edges.values():
            self._adj_directed[e.start_node].append((e.end_node, e.length))
            self._adj_undirected[e.start_node].append((e.end_node, e.length))
            self._adj_undirected[e.end_node].append((e.start_node, e.length))

        self._sssp_cache_directed: dict[int, dict[int, float]] = {}
        self._sssp_cache_undirected: dict[int, dict[int, float]] = {}

    # -- basic accessors ---------------------------------------------------

    @property
    def n_edges(self) -> int:
        return len(self.edge_ids)

    def edge(self, edge_id: int) -> Edge:
        return self.edges[edge_id]

    def edge_index(self, edge_id: int) -> int:
        return self._edge_index[edge_id]

    def edge_id_at(self, index: int) -> int:
        return self.edge_ids[index]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(lat_min, lat_max, lng_min, lng_max) over all geometry."""
        return self.lat_min, self.lat_max, self.lng_min, self.lng_max

    # -- spatial index -----------------------------------------------------

    def _cell_of(self, lat: float, lng: float) -> tuple[int, int]:
        return (
            int(math.floor((lat - self.lat_min) / self._cell_dlat)),
            int(math.floor((lng - self.lng_min) / self._cell_dlng)),
        )

    def _build_spatial_index(self) -> None:
        for eid in self.edge_ids:
            poly = self.edges[eid].polyline
            seen: set[tuple[int, int]] = set()
            for k in range(len(poly) - 1):
                la0, lg0 = min(poly[k, 0], poly[k + 1, 0]), min(poly[k, 1], poly[k + 1, 1])
                la1, lg1 = max(poly[k, 0], poly[k + 1, 0]), max(poly[k, 1], poly[k + 1, 1])
                i0, j0 = self._cell_of(la0, lg0)
                i1, j1 = self._cell_of(la1, lg1)
                for i in range(i0, i1 + 1):
                    for j in range(j0, j1 + 1):
                        if (i, j) not in seen:
                            seen.add((i, j))
                            self._grid.setdefault((i, j), []).append(eid)

    def _candidates_in_window(self, lat: float, lng: float, radius_m: float) -> list[int]:
        dlat = radius_m / M_PER_DEG_LAT
        dlng = radius_m / (M_PER_DEG_LAT * max(0.01, math.cos(math.radians(lat))))
        i0, j0 = self._cell_of(lat - dlat, lng - dlng)
        i1, j1 = self._cell_of(lat + dlat, lng + dlng)
        out: set[int] = set()
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                out.update(self._grid.get((i, j), ()))
        return sorted(out)

    # -- projections -------------------------------------------------------

    def point_on_segment(self, edge_id: int, ratio: float) -> tuple[float, float]:
        """Coordinates of the position at `ratio` along an edge.

        The position is linearly interpolated within the polyline piece
        that contains the target arc length.
        """
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"ratio {ratio} outside [0, 1]")
        e = self.edges[edge_id]
        if ratio == 0.0:
            return float(e.polyline[0, 0]), float(e.polyline[0, 1])
        if ratio == 1.0:
            return float(e.polyline[-1, 0]), float(e.polyline[-1, 1])
        target = ratio * e.length
        k = int(np.searchsorted(e.cum_lengths, target, side="right")) - 1
        k = min(k, len(e.polyline) - 2)
        piece = e.cum_lengths[k + 1] - e.cum_lengths[k]
        t = 0.0 if piece <= 0.0 else (target - e.cum_lengths[k]) / piece
        a, b = e.polyline[k], e.polyline[k + 1]
        return float(a[0] + t * (b[0] - a[0])), float(a[1] + t * (b[1] - a[1]))

    def project_to_edge(self, edge_id: int, lat: float, lng: float) -> tuple[float, float]:
        """Nearest position on one edge.  Returns (ratio, distance_m)."""
        e = self.edges[edge_id]
        xs, ys = local_xy(lat, lng, e.polyline[:, 0], e.polyline[:, 1])
        best_d, best_arc = math.inf, 0.0
        for k in range(len(e.polyline) - 1):
            d, t = point_segment_xy(0.0, 0.0, xs[k], ys[k], xs[k + 1], ys[k + 1])
            if d < best_d:
                piece = e.cum_lengths[k + 1] - e.cum_lengths[k]
                best_d, best_arc = d, float(e.cum_lengths[k] + t * piece)
        ratio = min(1.0, max(0.0, best_arc / e.length))
        return ratio, best_d

    def nearby_segments(self, lat: float, lng: float, radius_m: float) -> list[tuple[int, float]]:
        """Edges with distance strictly below `radius_m`, sorted by (distance, id)."""
        found = []
        for eid in self._candidates_in_window(lat, lng, radius_m):
            _, d = self.project_to_edge(eid, lat, lng)
            if d < radius_m:
                found.append((eid, d))
        found.sort(key=lambda x: (x[1], x[0]))
        return found

    def project_point(self, lat: float, lng: float) -> tuple[int, float, float]:
        """Nearest edge over the whole network.

        Returns (edge_id, ratio, distance_m); distance ties within 1e-9 m
        go to the smallest edge id.  The search widens its window until
        no closer edge can exist outside it.
        """
        radius = max(self._cell_dlat * M_PER_DEG_LAT, 25.0)
        max_radius = (
            haversine_m(self.lat_min, self.lng_min, self.lat_max, self.lng_max) + 2 * radius
        )
        while True:
            cands = self._candidates_in_window(lat, lng, radius)
            if cands:
                scored = []
                for eid in cands:
                    r, d = self.project_to_edge(eid, lat, lng)
                    scored.append((d, eid, r))
                best_d = min(s[0] for s in scored)
                if best_d <= radius or radius >= max_radius:
                    d, eid, r = min(
                        (s for s in scored if s[0] <= best_d + _DIST_TIE_M),
                        key=lambda s: s[1],
                    )
                    return eid, r, d
            if radius >= max_radius:
                raise IntegrityError("projection failed: empty spatial index")
            radius *= 2.0

    # -- shortest paths ----------------------------------------------------

    def _sssp(self, source: int, adj: dict[int, list[tuple[int, float]]]) -> dict[int, float]:
        dist = {source: 0.0}
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, math.inf):
                continue
            for v, w in adj[u]:
                nd = d + w
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        return dist

    def node_dist_undirected(self, u: int, v: int) -> float:
        if u not in self._sssp_cache_undirected:
            self._sssp_cache_undirected[u] = self._sssp(u, self._adj_undirected)
        return self._sssp_cache_undirected[u].get(v, UNREACHABLE)

    def node_dist_directed(self, u: int, v: int) -> float:
        if u not in self._sssp_cache_directed:
            self._sssp_cache_directed[u] = self._sssp(u, self._adj_directed)
        return self._sssp_cache_directed[u].get(v, UNREACHABLE)

    def rn_dist(self, a: MatchedPoint, b: MatchedPoint) -> float:
        """Shortest on-road distance between two positions, both directions
        traversable.  ``math.inf`` when disconnected."""
        ea, eb = self.edges[a.edge_id], self.edges[b.edge_id]
        best = math.inf
        if a.edge_id == b.edge_id:
            best = abs(a.ratio - b.ratio) * ea.length
        ends_a = ((ea.start_node, a.ratio * ea.length), (ea.end_node, (1.0 - a.ratio) * ea.length))
        ends_b = ((eb.start_node, b.ratio * eb.length), (eb.end_node, (1.0 - b.ratio) * eb.length))
        for na, wa in ends_a:
            for nb, wb in ends_b:
                d = self.node_dist_undirected(na, nb)
                if wa + d + wb < best:
                    best = wa + d + wb
        return best

    def route_dist(self, a: MatchedPoint, b: MatchedPoint) -> float:
        """Shortest driving distance from a to b respecting edge direction."""
        ea, eb = self.edges[a.edge_id], self.edges[b.edge_id]
        best = math.inf
        if a.edge_id == b.edge_id and b.ratio >= a.ratio:
            best = (b.ratio - a.ratio) * ea.length
        d = self.node_dist_directed(ea.end_node, eb.start_node)
        via = (1.0 - a.ratio) * ea.length + d + b.ratio * eb.length
        return min(best, via)


def _parse_polyline(text: str, line_no: int, path: str) -> np.ndarray:
    pts = []
    for chunk in text.strip().split(";"):
        parts = chunk.split()
        if len(parts) != 2:
            raise ParseError(f"{path}:{line_no}: bad polyline vertex {chunk!r}")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ParseError(f"{path}:{line_no}: non-numeric polyline vertex {chunk!r}") from exc
    if len(pts) < 2:
        raise ParseError(f"{path}:{line_no}: polyline needs at least two vertices")
    return np.array(pts, dtype=np.float64)


def load_road_network(
    nodes_path: str, edges_path: str, cell_size_m: float = 50.0
) -> RoadNetwork:
    """Load a network from the two-file CSV format.

    nodes.csv: ``node_id,lat,lng``
    edges.csv: ``edge_id,start_node,end_node,polyline`` with the polyline
    written as ``lat lng;lat lng;...``.  Edge lengths are recomputed from
    the polyline; polyline endpoints must coincide with their node
    coordinates to within 1e-6 degrees.
    """
    nodes: dict[int, tuple[float, float]] = {}
    with open(nodes_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["node_id", "lat", "lng"]:
            raise ParseError(f"{nodes_path}:1: expected header node_id,lat,lng")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise ParseError(f"{nodes_path}:{line_no}: expected 3 fields, got {len(row)}")
            try:
                nid, lat, lng = int(row[0]), float(row[1]), float(row[2])
            except ValueError as exc:
                raise ParseError(f"{nodes_path}:{line_no}: non-numeric field") from exc
            if nid in nodes:
                raise IntegrityError(f"{nodes_path}:{line_no}: duplicate node id {nid}")
            nodes[nid] = (lat, lng)

    edges: list[Edge] = []
    with open(edges_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expect = ["edge_id", "start_node", "end_node", "polyline"]
        if header is None or [h.strip() for h in header[:4]] != expect:
            raise ParseError(f"{edges_path}:1: expected header {','.join(expect)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise ParseError(f"{edges_path}:{line_no}: expected 4 fields, got {len(row)}")
            try:
                eid, s, t = int(row[0]), int(row[1]), int(row[2])
            except ValueError as exc:
                raise ParseError(f"{edges_path}:{line_no}: non-numeric id field") from exc
            poly = _parse_polyline(row[3], line_no, edges_path)
            for nid, vertex in ((s, poly[0]), (t, poly[-1])):
                if nid not in nodes:
                    raise IntegrityError(
                        f"{edges_path}:{line_no}: edge {eid} references unknown node {nid}"
                    )
                nlat, nlng = nodes[nid]
                if abs(vertex[0] - nlat) > _COORD_TOL_DEG or abs(vertex[1] - nlng) > _COORD_TOL_DEG:
                    raise IntegrityError(
                        f"{edges_path}:{line_no}: edge {eid} polyline endpoint "
                        f"disagrees with node {nid} coordinates"
                    )
            seg = haversine_m_arr(poly[:-1, 0], poly[:-1, 1], poly[1:, 0], poly[1:, 1])
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            length = float(cum[-1])
            if length <= 0.0:
                raise IntegrityError(f"{edges_path}:{line_no}: edge {eid} has zero length")
            edges.append(Edge(eid, s, t, poly, length, cum))

    return RoadNetwork(nodes, edges, cell_size_m=cell_size_m)


def build_edge(edge_id: int, start_node: int, end_node: int, polyline: np.ndarray) -> Edge:
    """Construct an Edge with its length recomputed from the polyline."""
    poly = np.asarray(polyline, dtype=np.float64)
    seg = haversine_m_arr(poly[:-1, 0], poly[:-1, 1], poly[1:, 0], poly[1:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return Edge(edge_id, start_node, end_node, poly, float(cum[-1]), cum)
