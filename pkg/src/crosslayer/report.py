"""Per-run solve reports and their CSV round-trip.

Every solver returns a SolveReport whose per-iteration columns are
(iteration, objective, sum_rate, min_rate, max_power_violation), plus
algorithm-specific extra columns.  Floats are written with repr so the CSV
parses back bit-exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

__all__ = ["SolveReport", "StopRule"]


@dataclass
class StopRule:
    """Iteration control: stop when the relative change of the tracked
    objective drops below rel_tol, or at max_iters."""

    rel_tol: float = 1e-6
    max_iters: int = 500

    def done(self, prev: float, cur: float) -> bool:
        denom = max(abs(prev), abs(cur), 1e-12)
        return abs(cur - prev) <= self.rel_tol * denom


@dataclass
class SolveReport:
    algo: str = ""
    objective: list = field(default_factory=list)
    sum_rate: list = field(default_factory=list)
    min_rate: list = field(default_factory=list)
    max_power_violation: list = field(default_factory=list)
    # objective of the weighted-MMSE surrogate after each u/w/v sub-step
    substep_objective: list = field(default_factory=list)
    final_rates: np.ndarray | None = None
    residuals: dict = field(default_factory=dict)
    converged: bool = True
    flags: list = field(default_factory=list)
    wall_time: float = 0.0
    extra_columns: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.objective)

    def trace_columns(self):
        cols = {
            "iteration": list(range(len(self.objective))),
            "objective": self.objective,
            "sum_rate": self.sum_rate,
            "min_rate": self.min_rate,
            "max_power_violation": self.max_power_violation,
        }
        cols.update(self.extra_columns)
        return cols

    def to_csv(self, path) -> None:
        cols = self.trace_columns()
        names = list(cols)
        n = max((len(v) for v in cols.values()), default=0)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for row in range(n):
                writer.writerow(
                    [_fmt(cols[name][row]) if row < len(cols[name]) else "" for name in names]
                )

    @classmethod
    def from_csv(cls, path) -> "SolveReport":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                names = next(reader)
            except StopIteration:
                raise ConfigurationError(f"empty report file: {path}")
            cols = {name: [] for name in names}
            for row in reader:
                for name, cell in zip(names, row):
                    if cell != "":
                        cols[name].append(_parse(cell))
        rep = cls()
        rep.objective = cols.pop("objective", [])
        rep.sum_rate = cols.pop("sum_rate", [])
        rep.min_rate = cols.pop("min_rate", [])
        rep.max_power_violation = cols.pop("max_power_violation", [])
        cols.pop("iteration", None)
        rep.extra_columns = cols
        return rep


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _parse(cell: str):
    try:
        return int(cell)
    except ValueError:
        return float(cell)
