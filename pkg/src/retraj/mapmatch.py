"""Hidden-Markov-model map matching.

Each GPS fix gets candidate positions on nearby edges.  Emission
likelihood is Gaussian in the projection distance; transition likelihood
is exponential in the disagreement between on-road route distance and
straight-line distance of consecutive fixes.  Viterbi decoding returns
the jointly most likely candidate sequence, breaking exact score ties
toward the lexicographically smallest candidate-index path.

When every transition between two consecutive fixes is pruned the
trajectory is split there and the longest matched piece is returned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .geo import haversine_m
from .roadnet import MatchedPoint, RoadNetwork
from .trajdata import MapMatchedTrajectory, Trajectory

logger = logging.getLogger(__name__)

NEG_INF = float("-inf")


@dataclass(frozen=True)
class HmmParams:
    sigma_z: float = 4.07  # GPS noise scale, meters
    beta: float = 20.0  # transition tolerance scale, meters
    candidate_radius: float = 50.0  # meters
    max_route_factor: float = 4.0  # prune routes this much longer than the crow flies

    def __post_init__(self) -> None:
        for name in ("sigma_z", "beta", "candidate_radius"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_route_factor <= 1.0:
            raise ConfigError("max_route_factor must exceed 1")


@dataclass(frozen=True)
class Candidate:
    edge_id: int
    ratio: float
    dist: float  # meters from the GPS fix


class MatchGapError(DataError):
    """A GPS fix has no candidate edge within the search radius."""

    def __init__(self, point_index: int, lat: float, lng: float, radius: float) -> None:
        self.point_index = point_index
        super().__init__(
            f"no road segment within {radius:.0f} m of point {point_index} "
            f"({lat:.6f}, {lng:.6f})"
        )


class NoViablePathError(ValueError):
    """No finite-probability path crosses some step boundary."""

    def __init__(self, break_step: int) -> None:
        self.break_step = break_step
        super().__init__(f"no viable transition into step {break_step}")


def viterbi(emissions: list[np.ndarray], transitions: list[np.ndarray]) -> list[int]:
    """Most likely state sequence for per-step log-probability tables.

    ``emissions[t]`` has shape [C_t]; ``transitions[t]`` has shape
    [C_t, C_{t+1}].  Among equal-score optima the lexicographically
    smallest index sequence is returned.  Raises NoViablePathError when
    no finite path exists, carrying the earliest step that cannot be
    reached.

    Works on max-suffix values: beta[t][i] is the best achievable score
    of a path suffix starting in state i at step t.  A forward pass then
    greedily picks the smallest state index consistent with the optimum,
    which is exactly the lexicographically smallest argmax.
    """
    n = len(emissions)
    if n == 0:
        raise ValueError("empty observation sequence")
    if len(transitions) != n - 1:
        raise ValueError("need exactly one transition table per step boundary")

    beta: list[np.ndarray] = [np.empty(0)] * n
    beta[n - 1] = emissions[n - 1].astype(np.float64)
    for t in range(n - 2, -1, -1):
        # vals[i, j] = trans[i, j] + beta[t+1][j]; invalid entries stay -inf
        vals = transitions[t] + beta[t + 1][None, :]
        beta[t] = emissions[t] + vals.max(axis=1)

    if not np.isfinite(beta[0]).any():
        reachable = np.isfinite(emissions[0])
        for t in range(n - 1):
            nxt = (transitions[t][reachable] > NEG_INF).any(axis=0)
            if not nxt.any():
                raise NoViablePathError(t + 1)
            reachable = nxt
        raise NoViablePathError(n - 1)

    best = beta[0].max()
    path = [int(np.flatnonzero(beta[0] == best)[0])]
    for t in range(n - 1):
        vals = transitions[t][path[-1]] + beta[t + 1]
        path.append(int(np.flatnonzero(vals == vals.max())[0]))
    return path


def _candidates(net: RoadNetwork, traj: Trajectory, params: HmmParams) -> list[list[Candidate]]:
    out = []
    for i in range(len(traj)):
        lat, lng = float(traj.lats[i]), float(traj.lngs[i])
        found = net.nearby_segments(lat, lng, params.candidate_radius)
        if not found:
            raise MatchGapError(i, lat, lng, params.candidate_radius)
        cands = []
        for eid, dist in found:
            ratio, _ = net.project_to_edge(eid, lat, lng)
            cands.append(Candidate(eid, ratio, dist))
        out.append(cands)
    return out


def _log_emission(dist: float, sigma: float) -> float:
    return -0.5 * (dist / sigma) ** 2 - math.log(sigma * math.sqrt(2.0 * math.pi))


def _match_block(
    net: RoadNetwork,
    traj: Trajectory,
    cands: list[list[Candidate]],
    lo: int,
    hi: int,
    params: HmmParams,
) -> tuple[int, int, list[Candidate]]:
    """Match fixes [lo, hi); returns (lo, hi, chosen candidates).

    Recursively splits at unviable step boundaries and keeps the longest
    matched block (the earlier one on ties).
    """
    n = hi - lo
    emissions = [
        np.array([_log_emission(c.dist, params.sigma_z) for c in cands[t]]) for t in range(lo, hi)
    ]
    transitions = []
    log_beta = math.log(params.beta)
    for t in range(lo, hi - 1):
        gc = haversine_m(
            float(traj.lats[t]), float(traj.lngs[t]), float(traj.lats[t + 1]), float(traj.lngs[t + 1])
        )
        allowed = params.max_route_factor * max(gc, params.candidate_radius)
        cur, nxt = cands[t], cands[t + 1]
        table = np.full((len(cur), len(nxt)), NEG_INF)
        for i, a in enumerate(cur):
            pa = MatchedPoint(a.edge_id, a.ratio, int(traj.times[t]))
            for j, b in enumerate(nxt):
                pb = MatchedPoint(b.edge_id, b.ratio, int(traj.times[t + 1]))
                d_route = net.route_dist(pa, pb)
                if not math.isfinite(d_route) or d_route > allowed:
                    continue
                table[i, j] = -abs(d_route - gc) / params.beta - log_beta
        transitions.append(table)

    try:
        path = viterbi(emissions, transitions)
    except NoViablePathError as exc:
        split = lo + exc.break_step
        logger.warning(
            "trajectory %s: no viable route between fixes %d and %d; splitting",
            traj.traj_id,
            split - 1,
            split,
        )
        left = _match_block(net, traj, cands, lo, split, params) if split - lo >= 2 else None
        right = _match_block(net, traj, cands, split, hi, params) if hi - split >= 2 else None
        if left is None and right is None:
            raise DataError(
                f"trajectory {traj.traj_id}: no matchable block of at least 2 fixes"
            ) from exc
        if left is None:
            return right
        if right is None:
            return left
        return left if (left[1] - left[0]) >= (right[1] - right[0]) else right
    return lo, hi, [cands[lo + t][path[t]] for t in range(n)]


def map_match(net: RoadNetwork, traj: Trajectory, params: HmmParams | None = None) -> MapMatchedTrajectory:
    """Match a constant-interval trajectory onto the network.

    Output timestamps are exactly the input timestamps of the matched
    block (the whole trajectory unless splitting was necessary).
    """
    params = params or HmmParams()
    diffs = np.diff(traj.times)
    if len(set(diffs.tolist())) != 1:
        raise DataError(f"trajectory {traj.traj_id}: map matching needs constant spacing")
    interval = int(diffs[0])

    cands = _candidates(net, traj, params)
    lo, hi, chosen = _match_block(net, traj, cands, 0, len(traj), params)
    if hi - lo < len(traj):
        logger.warning(
            "trajectory %s: matched %d of %d fixes after splitting",
            traj.traj_id,
            hi - lo,
            len(traj),
        )
    return MapMatchedTrajectory(
        traj_id=traj.traj_id,
        edge_ids=np.array([c.edge_id for c in chosen], dtype=np.int64),
        ratios=np.array([c.ratio for c in chosen], dtype=np.float64),
        times=traj.times[lo:hi].copy(),
        interval=interval,
    )
