"""Pareto dominance and non-dominated fronts over (time, RMSE) method points."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass


@dataclass(frozen=True)
class MethodPoint:
    name: str
    time_s: float
    rmse: float

    def __post_init__(self):
        for field_name in ("time_s", "rmse"):
            v = getattr(self, field_name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{self.name}: {field_name} must be finite and positive, got {v}")

    @property
    def objectives(self) -> tuple[float, float]:
        return (self.time_s, self.rmse)


def dominates(a: MethodPoint, b: MethodPoint) -> bool:
    """True when ``a`` is no worse than ``b`` in both objectives and better in one."""
    fa, fb = a.objectives, b.objectives
    return all(x <= y for x, y in zip(fa, fb)) and any(x < y for x, y in zip(fa, fb))


def pareto_front(points: list[MethodPoint]) -> list[MethodPoint]:
    """Points not dominated by any other point, in input order; duplicates are all kept."""
    return [p for p in points if not any(dominates(q, p) for q in points)]


def pareto_front_sorted(points: list[MethodPoint]) -> list[MethodPoint]:
    """Same result as :func:`pareto_front` in O(n log n) via a sweep over time."""
    order = sorted(range(len(points)), key=lambda i: points[i].objectives)
    keep = set()
    best_rmse = math.inf
    i = 0
    while i < len(order):
        # group exact duplicates in time so equal-time points are judged together
        j = i
        t = points[order[i]].time_s
        while j < len(order) and points[order[j]].time_s == t:
            j += 1
        group = order[i:j]
        group_min = points[group[0]].rmse
        if group_min < best_rmse:
            keep.update(k for k in group if points[k].rmse == group_min)
            best_rmse = group_min
        i = j
    return [p for k, p in enumerate(points) if k in keep]


def front_flags(points: list[MethodPoint]) -> list[bool]:
    front = pareto_front(points)
    ids = {id(p) for p in front}
    return [id(p) in ids for p in points]


def read_points_csv(path: str | os.PathLike) -> list[MethodPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"name", "time_s", "rmse"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: CSV header must contain name,time_s,rmse (missing {sorted(missing)})")
        points = []
        for lineno, row in enumerate(reader, start=2):
            try:
                points.append(MethodPoint(row["name"], float(row["time_s"]), float(row["rmse"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return points


def front_report(points: list[MethodPoint]) -> dict:
    flags = front_flags(points)
    return {
        "points": [{"name": p.name, "time_s": p.time_s, "rmse": p.rmse, "on_front": f}
                   for p, f in zip(points, flags)],
        "front": [p.name for p, f in zip(points, flags) if f],
    }


def write_front_json(path: str | os.PathLike, points: list[MethodPoint]) -> dict:
    report = front_report(points)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    return report


def write_front_csv(path: str | os.PathLike, points: list[MethodPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "time_s", "rmse", "on_front"])
        for p, f in zip(points, front_flags(points)):
            w.writerow([p.name, repr(p.time_s), repr(p.rmse), int(f)])
