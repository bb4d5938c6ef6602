"""Trajectory containers and the time-grid bookkeeping around them.

A raw trajectory is a sequence of (lat, lng, t) fixes.  A map-matched
trajectory is a sequence of (edge, ratio, t) positions at a constant
interval.  Recovery always targets a fine grid of spacing ``epsilon``
anchored at the first fix: slot k sits at ``t_first + k * epsilon`` and
is either Observed (a source fix landed there) or Missing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import AlignmentError, ConfigError, IntegrityError, ParseError
from .geo import haversine_m_arr


@dataclass(frozen=True)
class Trajectory:
    traj_id: str
    lats: np.ndarray
    lngs: np.ndarray
    times: np.ndarray  # int64 epoch seconds, strictly increasing
    declared_interval: Optional[int] = None  # nominal spacing in seconds, None if irregular

    def __post_init__(self) -> None:
        n = len(self.times)
        if n < 2:
            raise IntegrityError(f"trajectory {self.traj_id}: needs at least 2 points")
        if len(self.lats) != n or len(self.lngs) != n:
            raise IntegrityError(f"trajectory {self.traj_id}: coordinate/time length mismatch")
        if np.any(np.diff(self.times) <= 0):
            raise IntegrityError(f"trajectory {self.traj_id}: timestamps not strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def duration(self) -> int:
        return int(self.times[-1] - self.times[0])


@dataclass(frozen=True)
class MapMatchedTrajectory:
    traj_id: str
    edge_ids: np.ndarray  # int64
    ratios: np.ndarray  # float64 in [0, 1]
    times: np.ndarray  # int64, constant spacing
    interval: int  # seconds between consecutive points

    def __post_init__(self) -> None:
        n = len(self.times)
        if n < 2:
            raise IntegrityError(f"matched {self.traj_id}: needs at least 2 points")
        if len(self.edge_ids) != n or len(self.ratios) != n:
            raise IntegrityError(f"matched {self.traj_id}: field length mismatch")
        diffs = np.diff(self.times)
        if np.any(diffs != self.interval):
            raise IntegrityError(
                f"matched {self.traj_id}: spacing not constant at {self.interval}s"
            )
        if np.any(self.ratios < 0.0) or np.any(self.ratios > 1.0):
            raise IntegrityError(f"matched {self.traj_id}: ratio outside [0, 1]")

    def __len__(self) -> int:
        return len(self.times)

    def point(self, i: int):
        from .roadnet import MatchedPoint

        return MatchedPoint(int(self.edge_ids[i]), float(self.ratios[i]), int(self.times[i]))


@dataclass(frozen=True)
class UnifiedTrajectory:
    """A sparse trajectory laid onto the fine recovery grid.

    Missing slots carry NaN coordinates; the first and last slot are
    always Observed.
    """

    traj_id: str
    times: np.ndarray  # int64, [S], spacing target_interval
    observed: np.ndarray  # bool, [S]
    lats: np.ndarray  # float64, NaN where missing
    lngs: np.ndarray
    target_interval: int
    source_interval: int

    @property
    def slot_count(self) -> int:
        return len(self.times)

    @property
    def observed_indices(self) -> np.ndarray:
        return np.flatnonzero(self.observed)


@dataclass
class TrajectoryRecord:
    """One JSONL record: raw fixes plus, when known, the matched truth."""

    traj: Trajectory
    matched: Optional[MapMatchedTrajectory] = None


def sparsify(traj: Trajectory, mu: int, epsilon: int) -> Trajectory:
    """Downsample a dense epsilon-spaced trajectory to interval mu.

    Keeps index 0 and every (mu / epsilon)-th point after it, and always
    retains the final point.
    """
    if mu % epsilon != 0 or mu <= epsilon:
        raise ConfigError(f"sparse interval {mu} must be a multiple of the fine interval {epsilon}")
    diffs = np.diff(traj.times)
    if np.any(diffs != epsilon):
        raise IntegrityError(f"trajectory {traj.traj_id}: not dense at {epsilon}s spacing")
    if traj.duration < mu:
        raise IntegrityError(
            f"trajectory {traj.traj_id}: span {traj.duration}s shorter than interval {mu}s"
        )
    step = mu // epsilon
    idx = list(range(0, len(traj), step))
    if idx[-1] != len(traj) - 1:
        idx.append(len(traj) - 1)
    sel = np.array(idx, dtype=np.int64)
    return Trajectory(
        traj_id=traj.traj_id,
        lats=traj.lats[sel],
        lngs=traj.lngs[sel],
        times=traj.times[sel],
        declared_interval=mu,
    )


def unify_intervals(traj: Trajectory, epsilon: int, snap_tol: Optional[float] = None) -> UnifiedTrajectory:
    """Lay a sparse trajectory onto the fine grid anchored at its first fix.

    Slot count is (t_last - t_first) / epsilon + 1 after snapping.  Each
    source fix must land within ``snap_tol`` (default epsilon / 2) of a
    grid line and no two fixes may claim the same slot.
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    tol = epsilon / 2.0 if snap_tol is None else snap_tol
    t0 = int(traj.times[0])
    offsets = traj.times.astype(np.float64) - t0
    slots = np.floor(offsets / epsilon + 0.5).astype(np.int64)
    errs = np.abs(offsets - slots * epsilon)
    worst = int(np.argmax(errs))
    if errs[worst] > tol:
        raise AlignmentError(
            f"trajectory {traj.traj_id}: point {worst} at t={int(traj.times[worst])} "
            f"is {errs[worst]:.1f}s from the nearest {epsilon}s grid line"
        )
    if len(np.unique(slots)) != len(slots):
        dup = int(slots[np.flatnonzero(np.diff(slots) == 0)[0] + 1])
        raise AlignmentError(
            f"trajectory {traj.traj_id}: two points snap to the same slot {dup}"
        )

    n_slots = int(slots[-1]) + 1
    times = t0 + np.arange(n_slots, dtype=np.int64) * epsilon
    observed = np.zeros(n_slots, dtype=bool)
    lats = np.full(n_slots, np.nan)
    lngs = np.full(n_slots, np.nan)
    observed[slots] = True
    lats[slots] = traj.lats
    lngs[slots] = traj.lngs
    source = traj.declared_interval if traj.declared_interval is not None else epsilon
    return UnifiedTrajectory(
        traj_id=traj.traj_id,
        times=times,
        observed=observed,
        lats=lats,
        lngs=lngs,
        target_interval=epsilon,
        source_interval=int(source),
    )


def movement_stats(traj: Trajectory) -> tuple[int, float]:
    """(duration_seconds, traveled_kilometers) along consecutive fixes."""
    dists = haversine_m_arr(traj.lats[:-1], traj.lngs[:-1], traj.lats[1:], traj.lngs[1:])
    return traj.duration, float(dists.sum()) / 1000.0


def filter_trajectories(
    trajs: Iterable[TrajectoryRecord],
    min_duration: int = 300,
    max_duration: int = 3600,
    bounds: Optional[tuple[float, float, float, float]] = None,
) -> tuple[list[TrajectoryRecord], int]:
    """Drop trajectories outside the duration window or bounding box.

    Returns (kept, n_dropped).  ``bounds`` is (lat_min, lat_max,
    lng_min, lng_max); when given, every fix must fall inside it.
    """
    kept, dropped = [], 0
    for rec in trajs:
        t = rec.traj
        ok = min_duration <= t.duration <= max_duration
        if ok and bounds is not None:
            la0, la1, lg0, lg1 = bounds
            ok = bool(
                (t.lats >= la0).all()
                and (t.lats <= la1).all()
                and (t.lngs >= lg0).all()
                and (t.lngs <= lg1).all()
            )
        if ok:
            kept.append(rec)
        else:
            dropped += 1
    return kept, dropped


def split_by_id(
    records: list[TrajectoryRecord], weights: tuple[int, int, int] = (7, 2, 1)
) -> tuple[list[TrajectoryRecord], list[TrajectoryRecord], list[TrajectoryRecord]]:
    """Deterministic train/val/test split keyed on a hash of the trajectory id."""
    total = sum(weights)
    buckets: tuple[list, list, list] = ([], [], [])
    for rec in records:
        h = int.from_bytes(hashlib.sha1(rec.traj.traj_id.encode()).digest()[:8], "big")
        slot = h % total
        if slot < weights[0]:
            buckets[0].append(rec)
        elif slot < weights[0] + weights[1]:
            buckets[1].append(rec)
        else:
            buckets[2].append(rec)
    return buckets


# -- JSONL I/O ---------------------------------------------------------------


def _record_to_json(rec: TrajectoryRecord) -> dict:
    t = rec.traj
    out: dict = {
        "id": t.traj_id,
        "points": [
            [float(t.lats[i]), float(t.lngs[i]), int(t.times[i])] for i in range(len(t))
        ],
    }
    if t.declared_interval is not None:
        out["interval"] = int(t.declared_interval)
    if rec.matched is not None:
        m = rec.matched
        out["matched"] = [
            [int(m.edge_ids[i]), float(m.ratios[i]), int(m.times[i])] for i in range(len(m))
        ]
    return out


def _record_from_json(obj: dict, path: str, line_no: int) -> TrajectoryRecord:
    try:
        traj_id = str(obj["id"])
        pts = obj["points"]
        lats = np.array([p[0] for p in pts], dtype=np.float64)
        lngs = np.array([p[1] for p in pts], dtype=np.float64)
        times = np.array([p[2] for p in pts], dtype=np.int64)
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}:{line_no}: malformed trajectory record: {exc}") from exc
    interval = obj.get("interval")
    traj = Trajectory(traj_id, lats, lngs, times, None if interval is None else int(interval))
    matched = None
    if "matched" in obj:
        try:
            rows = obj["matched"]
            eids = np.array([r[0] for r in rows], dtype=np.int64)
            ratios = np.array([r[1] for r in rows], dtype=np.float64)
            mtimes = np.array([r[2] for r in rows], dtype=np.int64)
        except (IndexError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{line_no}: malformed matched field: {exc}") from exc
        spacing = int(mtimes[1] - mtimes[0]) if len(mtimes) > 1 else 0
        matched = MapMatchedTrajectory(traj_id, eids, ratios, mtimes, spacing)
    return TrajectoryRecord(traj, matched)


def write_trajectories(path: str, records: Iterable[TrajectoryRecord]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_record_to_json(rec), sort_keys=True) + "\n")
            n += 1
    return n


def read_trajectories(path: str) -> list[TrajectoryRecord]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            records.append(_record_from_json(obj, path, line_no))
    return records
