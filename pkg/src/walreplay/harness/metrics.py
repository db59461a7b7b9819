"""Per-entry delay records and their aggregates.

Percentiles use the nearest-rank method: the p-th percentile of n sorted
values is the value at 1-based rank ceil(p/100 * n), with rank 1 for p = 0.
The median is the 50th percentile under the same rule.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional


def nearest_rank(sorted_values, p: float):
    if not sorted_values:
        raise ValueError("percentile of an empty sample")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {p}")
    rank = max(1, math.ceil(p / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass(frozen=True)
class Summary:
    count: int
    mean: float
    median: float
    p90: float
    p99: float
    min: float
    max: float

    @classmethod
    def of(cls, values: Iterable) -> "Summary":
        v = sorted(values)
        if not v:
            return cls(0, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan)
        return cls(len(v), sum(v) / len(v), nearest_rank(v, 50), nearest_rank(v, 90),
                   nearest_rank(v, 99), v[0], v[-1])


@dataclass(frozen=True)
class DelayRecord:
    index: int
    target: int
    commit_time: int
    dispatch_time: Optional[int]
    apply_time: int

    @property
    def apply_delay(self) -> int:
        return self.apply_time - self.commit_time

    @property
    def replayer_delay(self) -> int:
        return self.apply_time - self.dispatch_time

    def ordered(self) -> bool:
        return (self.dispatch_time is not None
                and self.apply_time >= self.dispatch_time >= self.commit_time)


FIELDS = ("index", "target", "commit_time", "dispatch_time", "apply_time",
          "apply_delay", "replayer_delay")


class Metrics:
    """Delay records for one run. ``unit`` names the time unit (``steps`` or ``ns``)."""

    def __init__(self, records: Iterable = (), unit: str = "steps"):
        self.records = [r if isinstance(r, DelayRecord) else DelayRecord(*r) for r in records]
        self.unit = unit

    def __len__(self):
        return len(self.records)

    def disordered(self) -> list:
        """Rows breaking apply >= dispatch >= commit."""
        return [r for r in self.records if not r.ordered()]

    def apply_delays(self) -> list:
        return [r.apply_delay for r in self.records]

    def replayer_delays(self) -> list:
        return [r.replayer_delay for r in self.records if r.dispatch_time is not None]

    def summary(self) -> dict:
        return {"apply_delay": Summary.of(self.apply_delays()),
                "replayer_delay": Summary.of(self.replayer_delays())}

    def rows(self) -> list:
        out = []
        for r in self.records:
            row = asdict(r)
            row["apply_delay"] = r.apply_delay
            row["replayer_delay"] = None if r.dispatch_time is None else r.replayer_delay
            out.append(row)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fp:
            w = csv.DictWriter(fp, fieldnames=FIELDS)
            w.writeheader()
            w.writerows(self.rows())

    def write_summary_csv(self, path, scale: float = 1.0, unit: Optional[str] = None) -> None:
        with open(path, "w", newline="") as fp:
            w = csv.writer(fp)
            w.writerow(["measure", "unit", "count", "mean", "median", "p90", "p99", "min", "max"])
            for name, s in self.summary().items():
                vals = [s.mean, s.median, s.p90, s.p99, s.min, s.max]
                w.writerow([name, unit or self.unit, s.count] + [_fmt(x * scale) for x in vals])

    def table(self, scale: float = 1.0, unit: Optional[str] = None) -> str:
        unit = unit or self.unit
        head = f"{'measure':<16}{'count':>8}{'mean':>12}{'median':>12}{'p90':>12}{'p99':>12}  ({unit})"
        lines = [head]
        for name, s in self.summary().items():
            lines.append(f"{name:<16}{s.count:>8}" + "".join(
                f"{_fmt(x * scale):>12}" for x in (s.mean, s.median, s.p90, s.p99)))
        return "\n".join(lines)


def _fmt(x: float) -> str:
    return f"{x:.6g}"
