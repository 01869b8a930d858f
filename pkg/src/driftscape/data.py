"""Trajectory containers and the ``track_id,t,x,y`` CSV format."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EmptyData, NonMonotoneTime, ParseError, TooFewPoints

CSV_HEADER = ("track_id", "t", "x", "y")


@dataclass(frozen=True, eq=False)
class Track:
    track_id: str
    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if len(t) != len(pos):
            raise ValueError("times and positions must have the same length")
        if len(t) < 2:
            raise TooFewPoints(self.track_id)
        if np.any(np.diff(t) <= 0):
            raise NonMonotoneTime(self.track_id, None)
        object.__setattr__(self, "track_id", str(self.track_id))
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class Segments:
    """Flat view of every consecutive observation pair in a trajectory set."""

    start: np.ndarray  # (S, 2)
    end: np.ndarray  # (S, 2)
    dt: np.ndarray  # (S,)
    track: np.ndarray  # (S,) index into TrajectorySet.tracks

    def __len__(self):
        return len(self.dt)


class TrajectorySet:
    """G independent tracks of time-stamped 2-D positions."""

    def __init__(self, tracks: Iterable[Track]):
        self.tracks = tuple(tracks)
        if not self.tracks:
            raise EmptyData("trajectory set is empty")
        self._segments = None

    def __len__(self):
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks)

    @property
    def n_points(self) -> int:
        return sum(len(t) for t in self.tracks)

    @property
    def n_segments(self) -> int:
        return self.n_points - len(self.tracks)

    def segments(self) -> Segments:
        if self._segments is None:
            start = np.concatenate([t.positions[:-1] for t in self.tracks])
            end = np.concatenate([t.positions[1:] for t in self.tracks])
            dt = np.concatenate([np.diff(t.times) for t in self.tracks])
            idx = np.concatenate([np.full(len(t) - 1, i) for i, t in enumerate(self.tracks)])
            self._segments = Segments(start, end, dt, idx)
        return self._segments

    def all_positions(self) -> np.ndarray:
        return np.concatenate([t.positions for t in self.tracks])

    def bounding_box(self):
        pts = self.all_positions()
        return pts.min(axis=0), pts.max(axis=0)

    def scaled(self, factor: float, shift=(0.0, 0.0)) -> "TrajectorySet":
        """Return ``(positions - shift) * factor`` for every track."""
        shift = np.asarray(shift, dtype=float)
        return TrajectorySet(Track(t.track_id, t.times, (t.positions - shift) * factor) for t in self.tracks)

    def quadratic_variation_gamma2(self) -> float:
        """Realized-variance estimate of gamma^2 (two coordinates, hence the 2)."""
        seg = self.segments()
        inc = seg.end - seg.start
        return float(np.sum(inc * inc) / (2.0 * np.sum(seg.dt)))


def read_trajectories(path) -> TrajectorySet:
    """Parse a ``track_id,t,x,y`` CSV file. Lines starting with ``#`` are skipped."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_trajectories_text(text)


def parse_trajectories_text(text: str) -> TrajectorySet:
    rows: dict[str, list] = {}
    first_line: dict[str, int] = {}
    header_seen = False
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = next(csv.reader([line]))
        if not header_seen:
            if tuple(f.strip() for f in fields) != CSV_HEADER:
                raise ParseError(lineno, f"expected header {','.join(CSV_HEADER)}")
            header_seen = True
            continue
        if len(fields) != 4:
            raise ParseError(lineno, f"expected 4 fields, got {len(fields)}")
        tid = fields[0].strip()
        try:
            t, x, y = (float(f) for f in fields[1:])
        except ValueError:
            raise ParseError(lineno, "non-numeric value") from None
        if not all(np.isfinite((t, x, y))):
            raise ParseError(lineno, "non-finite value")
        track = rows.setdefault(tid, [])
        first_line.setdefault(tid, lineno)
        if track and t <= track[-1][0]:
            raise NonMonotoneTime(tid, lineno)
        track.append((t, x, y))
    if not header_seen:
        raise ParseError(0, "missing header")
    if not rows:
        raise EmptyData("no data rows")
    tracks = []
    for tid, pts in rows.items():
        if len(pts) < 2:
            raise TooFewPoints(tid)
        arr = np.array(pts)
        tracks.append(Track(tid, arr[:, 0], arr[:, 1:]))
    return TrajectorySet(tracks)


def format_trajectories(data: TrajectorySet) -> str:
    out = io.StringIO()
    out.write(",".join(CSV_HEADER) + "\n")
    for tr in data.tracks:
        for t, (x, y) in zip(tr.times, tr.positions):
            out.write(f"{tr.track_id},{float(t)!r},{float(x)!r},{float(y)!r}\n")
    return out.getvalue()


def write_trajectories(data: TrajectorySet, path) -> None:
    Path(path).write_text(format_trajectories(data), encoding="utf-8")
