"""Driving cycles: position-indexed road grade and piecewise-constant reference speed.

File format is CSV with header ``s_m,grade,v_ref_mps``; grade is the
rise/run ratio, not an angle.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER = ("s_m", "grade", "v_ref_mps")
MAX_GRADE = 0.1


class CycleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DrivingCycle:
    s: np.ndarray
    grade: np.ndarray
    v_ref: np.ndarray
    delta_s: float

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        grade = np.asarray(self.grade, dtype=float)
        v_ref = np.asarray(self.v_ref, dtype=float)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "grade", grade)
        object.__setattr__(self, "v_ref", v_ref)
        if not (s.shape == grade.shape == v_ref.shape) or s.ndim != 1:
            raise CycleError("s, grade and v_ref must be 1-D arrays of equal length")
        if len(s) < 2:
            raise CycleError("a cycle needs at least two samples")
        if not self.delta_s > 0:
            raise CycleError(f"delta_s must be > 0, got {self.delta_s}")
        d = np.diff(s)
        if np.any(d <= 0):
            i = int(np.argmax(d <= 0))
            raise CycleError(f"positions not strictly increasing at sample {i + 1} (s={s[i + 1]})")
        if not np.allclose(d, self.delta_s, rtol=0, atol=1e-6 * max(1.0, self.delta_s)):
            raise CycleError("positions are not uniformly spaced by delta_s")
        if np.any(v_ref <= 0):
            raise CycleError("reference speed must be > 0 everywhere")
        if np.any(np.abs(grade) > MAX_GRADE):
            raise CycleError(f"|grade| exceeds {MAX_GRADE}")

    def __len__(self):
        return len(self.s)

    def __eq__(self, other):
        if not isinstance(other, DrivingCycle):
            return NotImplemented
        return (
            self.delta_s == other.delta_s
            and np.array_equal(self.s, other.s)
            and np.array_equal(self.grade, other.grade)
            and np.array_equal(self.v_ref, other.v_ref)
        )

    @property
    def alpha(self) -> np.ndarray:
        """Road slope angle in rad."""
        return np.arctan(self.grade)

    @property
    def length(self) -> float:
        return float(self.s[-1] - self.s[0])

    def shifted(self, offset: float) -> "DrivingCycle":
        return DrivingCycle(self.s + offset, self.grade, self.v_ref, self.delta_s)

    def slice(self, start: int, stop: int) -> "DrivingCycle":
        return DrivingCycle(self.s[start:stop], self.grade[start:stop], self.v_ref[start:stop], self.delta_s)


def constant_runs(v_ref: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of equal reference speed as half-open index ranges."""
    change = np.flatnonzero(np.diff(v_ref) != 0) + 1
    bounds = np.concatenate(([0], change, [len(v_ref)]))
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def resample(s, grade, v_ref, delta_s: float) -> DrivingCycle:
    """Resample raw samples onto a uniform grid starting at s[0].

    Grade is linearly interpolated; v_ref is held from the previous raw sample.
    """
    s = np.asarray(s, dtype=float)
    n = int(math.floor((s[-1] - s[0]) / delta_s + 1e-9)) + 1
    s_new = s[0] + delta_s * np.arange(n)
    g_new = np.interp(s_new, s, grade)
    idx = np.searchsorted(s, s_new + 1e-9 * delta_s, side="right") - 1
    v_new = np.asarray(v_ref, dtype=float)[np.clip(idx, 0, len(s) - 1)]
    return DrivingCycle(s_new, g_new, v_new, delta_s)


def load_cycle(path, delta_s: float | None = None) -> DrivingCycle:
    """Read a cycle CSV. With `delta_s` given, resample onto that spacing."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != HEADER:
            raise CycleError(f"{path}:1: expected header {','.join(HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise CycleError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                rows.append(tuple(float(c) for c in row))
            except ValueError as exc:
                raise CycleError(f"{path}:{lineno}: {exc}") from None
    if len(rows) < 2:
        raise CycleError(f"{path}: need at least two data rows")
    data = np.array(rows)
    s, grade, v_ref = data.T
    d = np.diff(s)
    if np.any(d <= 0):
        i = int(np.argmax(d <= 0)) + 1
        raise CycleError(f"{path}:{i + 2}: positions not strictly increasing")
    if np.any(v_ref <= 0):
        i = int(np.argmax(v_ref <= 0))
        raise CycleError(f"{path}:{i + 2}: reference speed must be > 0")
    if delta_s is None:
        if not np.allclose(d, d[0], rtol=0, atol=1e-9 * max(1.0, d[0])):
            raise CycleError(f"{path}: non-uniform spacing; pass delta_s to resample")
        return DrivingCycle(s, grade, v_ref, float(d[0]))
    if np.allclose(d, delta_s, rtol=0, atol=1e-9 * delta_s):
        return DrivingCycle(s, grade, v_ref, float(delta_s))
    return resample(s, grade, v_ref, delta_s)


def save_cycle(c: DrivingCycle, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for row in zip(c.s, c.grade, c.v_ref):
            w.writerow([repr(float(x)) for x in row])


def trim_constant_stretches(c: DrivingCycle, max_len: float = 1000.0) -> DrivingCycle:
    """Shorten every constant-reference stretch longer than `max_len`.

    A run of n samples spans n*delta_s metres. Long runs keep their first and
    last samples (floor(max_len/delta_s) in total) so that the grade around
    the speed changes is preserved; the interior is cut out and positions are
    re-indexed from the first sample.
    """
    if max_len <= 0:
        raise ValueError("max_len must be > 0")
    keep_n = max(1, int(math.floor(max_len / c.delta_s + 1e-9)))
    keep = np.ones(len(c), dtype=bool)
    for a, b in constant_runs(c.v_ref):
        n = b - a
        if n > keep_n:
            head = keep_n // 2
            tail = keep_n - head
            keep[a + head : b - tail] = False
    if keep.all():
        return c
    s = c.s[0] + c.delta_s * np.arange(int(keep.sum()))
    return DrivingCycle(s, c.grade[keep], c.v_ref[keep], c.delta_s)


@dataclass(frozen=True)
class CycleSpec:
    """Parameters of the synthetic distribution-cycle generator."""

    length_m: float = 6000.0
    delta_s: float = 15.0
    grade_bound: float = 0.043
    speeds_kmh: tuple = (30.0, 50.0, 60.0, 70.0, 80.0)
    segment_m: tuple = (300.0, 1000.0)
    hill_m: tuple = (300.0, 1500.0)
    hills_per_km: float = 1.2
    start_kmh: float | None = None
    n_segments: int | None = None

    def __post_init__(self):
        if not 0 <= self.grade_bound <= MAX_GRADE:
            raise ValueError(f"grade_bound must lie in [0, {MAX_GRADE}]")
        if self.segment_m[1] > 1000.0:
            raise ValueError("segments longer than 1 km would need trimming")
        if not 0 < self.segment_m[0] <= self.segment_m[1]:
            raise ValueError("bad segment length range")


def _grade_profile(rng: np.random.Generator, s: np.ndarray, spec: CycleSpec) -> np.ndarray:
    if spec.grade_bound == 0:
        return np.zeros_like(s)
    length = s[-1] - s[0]
    n_hills = max(1, int(round(spec.hills_per_km * length / 1000.0)))
    grade = np.zeros_like(s)
    for _ in range(n_hills):
        width = rng.uniform(*spec.hill_m)
        start = rng.uniform(s[0] - 0.5 * width, s[-1] - 0.5 * width)
        ramp = rng.uniform(0.15, 0.45) * width
        peak = rng.uniform(-1.0, 1.0)
        # trapezoid: linear ramp up, plateau, linear ramp down
        x = s - start
        up = np.clip(x / ramp, 0.0, 1.0)
        down = np.clip((width - x) / ramp, 0.0, 1.0)
        grade += peak * np.minimum(up, down)
    top = np.max(np.abs(grade))
    if top == 0:
        return grade
    return grade * (spec.grade_bound / top)


def generate_synthetic_cycle(seed: int, spec: CycleSpec | None = None) -> DrivingCycle:
    """Deterministic synthetic distribution cycle.

    Reference speed is piecewise constant over segments drawn from
    `spec.speeds_kmh`, each segment at most 1 km long; grade is a sum of
    trapezoidal hills scaled so that max |grade| equals `spec.grade_bound`.
    With `spec.n_segments` set the cycle has exactly that many segments and
    `spec.length_m` is ignored.
    """
    spec = spec or CycleSpec()
    rng = np.random.default_rng(seed)
    speeds = np.asarray(spec.speeds_kmh, dtype=float) / 3.6
    cap = int(math.floor(1000.0 / spec.delta_s + 1e-9))
    if spec.n_segments is None:
        n = int(math.floor(spec.length_m / spec.delta_s + 1e-9)) + 1
    else:
        n = None

    current = spec.start_kmh / 3.6 if spec.start_kmh is not None else rng.choice(speeds)
    levels = []
    while True:
        seg_len = min(cap, max(1, int(rng.uniform(*spec.segment_m) / spec.delta_s)))
        levels.append(np.full(seg_len, current))
        others = speeds[speeds != current]
        current = rng.choice(others) if len(others) else current
        total = sum(len(x) for x in levels)
        if n is None and len(levels) == spec.n_segments:
            n = total
            break
        if n is not None and total >= n:
            break
    v_ref = np.concatenate(levels)[:n]
    s = spec.delta_s * np.arange(n)
    grade = _grade_profile(rng, s, spec)
    return DrivingCycle(s, grade, v_ref, spec.delta_s)
