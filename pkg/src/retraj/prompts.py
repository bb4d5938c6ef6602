"""Trajectory prompts and the regional flow grid.

The explicit prompt is five fixed-template sentences describing the
recovery task, the expected output, the two sampling intervals, the
start/end clock times, and the total time/space cost of the trip.
Counted quantities are rendered as English words so the whole prompt
draws from a small closed vocabulary; the traveled distance is kept as
digits and tokenized character by character.

The flow grid counts how often training fixes fall into each
(lat-cell, lng-cell, time-slice) bucket.  A spatial 2D convolution per
time slice followed by a temporal 1D convolution per cell turns the
counts into a dense feature field that missing slots can look up.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .trajdata import Trajectory, TrajectoryRecord, movement_stats

TASK_TEXT = "Sparse trajectory recovery."
TARGET_TEXT = "Output the road segment and moving ratio for each point in the trajectory."
CONTENT_TEMPLATE = (
    "The sparse trajectory is sampled every {source} "
    "and aims to recover trajectory every {target} seconds."
)
TIME_TEMPLATE = (
    "The trajectory started at {start} on {start_day} and ended at {end} on {end_day}."
)
MOVEMENT_TEMPLATE = (
    "Total time cost: {minutes} minutes {seconds} seconds. "
    "Total space transfer distance: {distance} kilometers."
)

_ONES = (
    "zero one two three four five six seven eight nine ten eleven twelve thirteen "
    "fourteen fifteen sixteen seventeen eighteen nineteen"
).split()
_TENS = "twenty thirty forty fifty sixty seventy eighty ninety".split()

_DAYS = "Monday Tuesday Wednesday Thursday Friday Saturday Sunday".split()


def number_words(n: int) -> str:
    """English words for a non-negative integer below one million."""
    if n < 0 or n >= 1_000_000:
        raise ValueError(f"number out of supported range: {n}")
    if n < 20:
        return _ONES[n]
    if n < 100:
        tens, ones = divmod(n, 10)
        word = _TENS[tens - 2]
        return word if ones == 0 else f"{word}-{_ONES[ones]}"
    if n < 1000:
        hundreds, rest = divmod(n, 100)
        head = f"{_ONES[hundreds]} hundred"
        return head if rest == 0 else f"{head} {number_words(rest)}"
    thousands, rest = divmod(n, 1000)
    head = f"{number_words(thousands)} thousand"
    return head if rest == 0 else f"{head} {number_words(rest)}"


def interval_words(seconds: int) -> str:
    """An interval as words with its unit, e.g. 240 -> 'four minutes'."""
    if seconds <= 0:
        raise ValueError(f"interval must be positive, got {seconds}")
    if seconds % 60 == 0:
        m = seconds // 60
        return f"{number_words(m)} minute" + ("" if m == 1 else "s")
    return f"{number_words(seconds)} second" + ("" if seconds == 1 else "s")


def clock_words(t: int) -> str:
    """A UTC epoch second as spoken 24-hour clock time."""
    dt = datetime.fromtimestamp(int(t), tz=timezone.utc)
    hour = number_words(dt.hour)
    if dt.minute == 0:
        return f"{hour} o'clock"
    if dt.minute < 10:
        return f"{hour} oh {number_words(dt.minute)}"
    return f"{hour} {number_words(dt.minute)}"


def day_words(t: int) -> str:
    dt = datetime.fromtimestamp(int(t), tz=timezone.utc)
    return _DAYS[dt.weekday()]


@dataclass(frozen=True)
class ExplicitPrompt:
    task_part: str
    target_part: str
    content_part: str
    time_part: str
    movement_part: str

    @property
    def parts(self) -> tuple[str, str, str, str, str]:
        return (
            self.task_part,
            self.target_part,
            self.content_part,
            self.time_part,
            self.movement_part,
        )

    @property
    def text(self) -> str:
        return " ".join(self.parts)


def build_explicit_prompt(sparse: Trajectory, mu: int, epsilon: int) -> ExplicitPrompt:
    """Render the five prompt sentences for one sparse trajectory."""
    if mu <= epsilon:
        raise ConfigError(f"sparse interval {mu} must exceed the recovery interval {epsilon}")
    duration, km = movement_stats(sparse)
    return ExplicitPrompt(
        task_part=TASK_TEXT,
        target_part=TARGET_TEXT,
        content_part=CONTENT_TEMPLATE.format(
            source=interval_words(mu), target=number_words(epsilon)
        ),
        time_part=TIME_TEMPLATE.format(
            start=clock_words(int(sparse.times[0])),
            start_day=day_words(int(sparse.times[0])),
            end=clock_words(int(sparse.times[-1])),
            end_day=day_words(int(sparse.times[-1])),
        ),
        movement_part=MOVEMENT_TEMPLATE.format(
            minutes=number_words(duration // 60),
            seconds=number_words(duration % 60),
            distance=f"{km:.2f}",
        ),
    )


_TOKEN_RE = re.compile(r"[a-z']+(?:-[a-z']+)*|[0-9]+(?:\.[0-9]+)?|[.,:;]")
_NUMERIC_RE = re.compile(r"^[0-9]+(?:\.[0-9]+)?$")

UNK_TOKEN = "[unk]"


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; digit strings split into single characters."""
    out: list[str] = []
    for tok in _TOKEN_RE.findall(text.lower()):
        if _NUMERIC_RE.match(tok):
            out.extend(tok)
        else:
            out.append(tok)
    return out


class PromptVocab:
    """Closed vocabulary over the prompt templates and number words."""

    def __init__(self, words: Iterable[str]) -> None:
        uniq = sorted(set(words) - {UNK_TOKEN})
        self.words: list[str] = [UNK_TOKEN] + uniq
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self._ids.get(t, 0) for t in tokenize(text)], dtype=np.int64)

    def encode_prompt(self, prompt: ExplicitPrompt) -> list[np.ndarray]:
        return [self.encode(p) for p in prompt.parts]

    @classmethod
    def default(cls) -> "PromptVocab":
        words: set[str] = set()
        skeleton = " ".join(
            [
                TASK_TEXT,
                TARGET_TEXT,
                CONTENT_TEMPLATE,
                TIME_TEMPLATE,
                MOVEMENT_TEMPLATE,
                "minute minutes second seconds o'clock oh hundred thousand",
            ]
        )
        words.update(t for t in tokenize(re.sub(r"\{[a-z_]+\}", " ", skeleton)))
        for n in range(100):
            words.update(tokenize(number_words(n)))
        words.update(tokenize(" ".join(_DAYS)))
        words.update(str(d) for d in range(10))
        words.update({".", ",", ":", ";"})
        return cls(words)


# -- regional flow grid ------------------------------------------------------


@dataclass(frozen=True)
class GridMeta:
    """Geometry of the (lat, lng, time-of-day) histogram."""

    lat_min: float
    lat_max: float
    lng_min: float
    lng_max: float
    rows: int  # lat cells
    cols: int  # lng cells
    slices: int  # time-of-day cells

    def __post_init__(self) -> None:
        if self.rows <= 0 or self.cols <= 0 or self.slices <= 0:
            raise ConfigError("grid dimensions must be positive")
        if self.lat_max <= self.lat_min or self.lng_max <= self.lng_min:
            raise ConfigError("grid bounds must have positive extent")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols * self.slices

    def spatial_cell(self, lat: float, lng: float) -> tuple[int, int, bool]:
        """(row, col, clamped).  Out-of-region coordinates clamp to the border.

        The region is the closed rectangle, so points exactly on the
        maximum edge land in the last cell without counting as clamped.
        """
        i = math.floor((lat - self.lat_min) / (self.lat_max - self.lat_min) * self.rows)
        j = math.floor((lng - self.lng_min) / (self.lng_max - self.lng_min) * self.cols)
        clamped = not (
            self.lat_min <= lat <= self.lat_max and self.lng_min <= lng <= self.lng_max
        )
        return min(self.rows - 1, max(0, i)), min(self.cols - 1, max(0, j)), clamped

    def time_cell(self, t: int) -> int:
        hour = (int(t) % 86400) // 3600  # UTC hour of day
        return hour * self.slices // 24

    def flat_index(self, lat: float, lng: float, t: int) -> tuple[int, bool]:
        i, j, clamped = self.spatial_cell(lat, lng)
        k = self.time_cell(t)
        return (i * self.cols + j) * self.slices + k, clamped

    def to_dict(self) -> dict:
        return {
            "lat_min": self.lat_min,
            "lat_max": self.lat_max,
            "lng_min": self.lng_min,
            "lng_max": self.lng_max,
            "rows": self.rows,
            "cols": self.cols,
            "slices": self.slices,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridMeta":
        return cls(**{k: d[k] for k in (
            "lat_min", "lat_max", "lng_min", "lng_max", "rows", "cols", "slices"
        )})


@dataclass
class FlowGrid:
    counts: np.ndarray  # float64 [rows, cols, slices]
    meta: GridMeta
    n_clamped: int = 0


def compute_flow_grid(records: Iterable[TrajectoryRecord], meta: GridMeta) -> FlowGrid:
    """Histogram of GPS fixes over space and time of day.

    Built from the training split only; time slices aggregate the same
    hour across days.  Fixes outside the bounds clamp to the border and
    are counted in ``n_clamped``.
    """
    counts = np.zeros((meta.rows, meta.cols, meta.slices), dtype=np.float64)
    clamped = 0
    for rec in records:
        t = rec.traj
        for idx in range(len(t)):
            i, j, was_clamped = meta.spatial_cell(float(t.lats[idx]), float(t.lngs[idx]))
            k = meta.time_cell(int(t.times[idx]))
            counts[i, j, k] += 1.0
            clamped += int(was_clamped)
    return FlowGrid(counts, meta, clamped)


class FlowGridEncoder(nn.Module):
    """Conv feature field over the flow histogram.

    A 3x3 spatial convolution runs over each time slice, then a
    3-wide temporal convolution runs over each cell's time series; both
    are same-padded so the field keeps the grid's shape.  ``activation``
    can be disabled to make the encoder exactly linear for tests.
    """

    def __init__(self, dim: int, activation: bool = True, bias: bool = True) -> None:
        super().__init__()
        self.dim = dim
        self.activation = activation
        self.spatial = nn.Conv2d(1, dim, kernel_size=3, padding=1, bias=bias)
        self.temporal = nn.Conv1d(dim, dim, kernel_size=3, padding=1, bias=bias)

    def forward(self, counts: torch.Tensor) -> torch.Tensor:
        """[rows, cols, slices] counts -> [rows, cols, slices, dim] field."""
        rows, cols, slices = counts.shape
        x = counts.permute(2, 0, 1).unsqueeze(1)  # [T, 1, I, J]
        x = self.spatial(x)  # [T, F, I, J]
        if self.activation:
            x = torch.relu(x)
        x = x.permute(2, 3, 1, 0).reshape(rows * cols, self.dim, slices)  # [IJ, F, T]
        x = self.temporal(x)  # [IJ, F, T]
        if self.activation:
            x = torch.relu(x)
        return x.permute(0, 2, 1).reshape(rows, cols, slices, self.dim)
