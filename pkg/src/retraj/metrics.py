"""Recovery quality measures.

Segment accuracy is positional: the fraction of slots whose predicted
segment equals the truth.  Recall and precision compare the *sets* of
segments visited, so order and multiplicity do not matter.  MAE and
RMSE measure the on-road distance between true and predicted positions
slot by slot; pairs with no connecting path are excluded from the
averages and counted separately.

Accuracy, recall, and precision are computed per trajectory and
macro-averaged; the distance errors pool every slot of every
trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .roadnet import MatchedPoint, RoadNetwork
from .trajdata import MapMatchedTrajectory


@dataclass(frozen=True)
class EvalReport:
    acc: float  # 0..1
    recall: float
    precision: float
    mae: float  # meters
    rmse: float  # meters
    n_trajectories: int
    n_points: int
    n_unreachable: int

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "recall": self.recall,
            "precision": self.precision,
            "mae": self.mae,
            "rmse": self.rmse,
            "n_trajectories": self.n_trajectories,
            "n_points": self.n_points,
            "n_unreachable": self.n_unreachable,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        head = f"{'Acc(%)':>8} {'Recall(%)':>10} {'Prec(%)':>8} {'MAE':>8} {'RMSE':>8}"
        row = (
            f"{self.acc * 100:8.2f} {self.recall * 100:10.2f} {self.precision * 100:8.2f} "
            f"{self.mae:8.2f} {self.rmse:8.2f}"
        )
        note = f"({self.n_trajectories} trajectories, {self.n_points} points"
        if self.n_unreachable:
            note += f", {self.n_unreachable} unreachable pairs excluded"
        note += ")"
        return "\n".join([head, row, note])


def segment_metrics(
    truth: Sequence[int], pred: Sequence[int]
) -> tuple[float, float, float]:
    """(accuracy, recall, precision) for one trajectory's segment ids."""
    if len(truth) != len(pred):
        raise DataError(f"length mismatch: truth {len(truth)} vs predicted {len(pred)}")
    if len(truth) == 0:
        raise DataError("empty trajectory")
    t = np.asarray(truth)
    p = np.asarray(pred)
    acc = float((t == p).mean())
    t_set, p_set = set(t.tolist()), set(p.tolist())
    inter = len(t_set & p_set)
    return acc, inter / len(t_set), inter / len(p_set)


def distance_metrics(
    net: RoadNetwork,
    truth: Sequence[MatchedPoint],
    pred: Sequence[MatchedPoint],
) -> tuple[float, float, int, int]:
    """(abs_error_sum, squared_error_sum, n_finite, n_unreachable) over slot pairs."""
    if len(truth) != len(pred):
        raise DataError(f"length mismatch: truth {len(truth)} vs predicted {len(pred)}")
    abs_sum = sq_sum = 0.0
    n_finite = n_unreachable = 0
    for a, b in zip(truth, pred):
        d = net.rn_dist(a, b)
        if math.isfinite(d):
            abs_sum += d
            sq_sum += d * d
            n_finite += 1
        else:
            n_unreachable += 1
    return abs_sum, sq_sum, n_finite, n_unreachable


def evaluate_recovery(
    net: RoadNetwork,
    pairs: Sequence[tuple[MapMatchedTrajectory, MapMatchedTrajectory]],
) -> EvalReport:
    """Score (truth, predicted) trajectory pairs into one report."""
    if not pairs:
        raise DataError("nothing to evaluate")
    accs, recalls, precisions = [], [], []
    abs_sum = sq_sum = 0.0
    n_finite = n_unreachable = n_points = 0
    for truth, pred in pairs:
        if not np.array_equal(truth.times, pred.times):
            raise DataError(
                f"trajectory {truth.traj_id}: predicted timestamps do not match truth"
            )
        a, r, p = segment_metrics(truth.edge_ids.tolist(), pred.edge_ids.tolist())
        accs.append(a)
        recalls.append(r)
        precisions.append(p)
        t_pts = [truth.point(i) for i in range(len(truth))]
        p_pts = [pred.point(i) for i in range(len(pred))]
        da, dsq, nf, nu = distance_metrics(net, t_pts, p_pts)
        abs_sum += da
        sq_sum += dsq
        n_finite += nf
        n_unreachable += nu
        n_points += len(truth)

    mae = abs_sum / n_finite if n_finite else float("nan")
    rmse = math.sqrt(sq_sum / n_finite) if n_finite else float("nan")
    return EvalReport(
        acc=float(np.mean(accs)),
        recall=float(np.mean(recalls)),
        precision=float(np.mean(precisions)),
        mae=mae,
        rmse=rmse,
        n_trajectories=len(pairs),
        n_points=n_points,
        n_unreachable=n_unreachable,
    )
