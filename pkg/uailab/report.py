"""Benchmark tables and plot-ready data files."""

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from . import logger
from .benchmark import SCHEMA_VERSION, EpisodeMetrics
from .policy import HighLevelCommand
from .utils import atomic_write, iter_jsonl
from .world import INFRACTION_CLASSES

METRICS = ("success_rate", "distance_to_goal") + INFRACTION_CLASSES
DIMENSIONS = ("accelerate", "steer", "brake")
HIST_EDGES = np.arange(-10.0, 10.5, 0.5)


class SchemaError(ValueError):
    pass


def load_metrics(paths: Iterable[str]) -> List[EpisodeMetrics]:
    out = []
    for path in paths:
        for i, d in enumerate(iter_jsonl(path), 1):
            if d.get("schema") != SCHEMA_VERSION:
                raise SchemaError(
                    f"{path}:{i}: metrics schema {d.get('schema')!r}, this version reads {SCHEMA_VERSION}"
                )
            out.append(EpisodeMetrics.from_dict(d))
    if not out:
        raise ValueError("No episode metrics found.")
    return out


def load_traces(paths: Iterable[str]) -> List[dict]:
    out = []
    for path in paths:
        out.extend(iter_jsonl(path))
    return out


def trial_metrics(episodes: Sequence[EpisodeMetrics]) -> Dict[str, float]:
    """The seven table metrics of one trial. Infraction distances are total
    metres over total events; infinite when a class never occurred."""
    n = len(episodes)
    successes = sum(1 for e in episodes if e.success)
    total = sum(e.distance for e in episodes)
    out = {
        "success_rate": successes * 100 / n,
        "distance_to_goal": 100.0 * sum(e.distance_fraction for e in episodes) / n,
    }
    for cls in INFRACTION_CLASSES:
        count = sum(e.infractions[cls] for e in episodes)
        out[cls] = total / count if count else math.inf
    return out


@dataclass
class ReportRow:
    agent: str
    strategy: str
    task: str
    weather: str
    trials: List[Dict[str, float]] = field(default_factory=list)

    def average(self, metric: str) -> float:
        return float(np.mean([t[metric] for t in self.trials]))

    def maximum(self, metric: str) -> float:
        return float(np.max([t[metric] for t in self.trials]))

    def minimum(self, metric: str) -> float:
        return float(np.min([t[metric] for t in self.trials]))


@dataclass
class BenchmarkReport:
    rows: List[ReportRow]

    @classmethod
    def build(cls, episodes: Sequence[EpisodeMetrics]) -> "BenchmarkReport":
        cells: Dict[Tuple[str, str, str, str], Dict[int, List[EpisodeMetrics]]] = defaultdict(
            lambda: defaultdict(list)
        )
        for e in episodes:
            cells[(e.agent, e.strategy, e.task, e.weather)][e.trial].append(e)
        rows = []
        for key in sorted(cells):
            trials = cells[key]
            rows.append(ReportRow(*key, trials=[trial_metrics(trials[t]) for t in sorted(trials)]))
        return cls(rows)

    def header(self) -> List[str]:
        cols = ["agent", "strategy", "task", "weather", "trials"]
        for m in METRICS:
            cols += [f"{m}_avg", f"{m}_max"]
        return cols

    def table(self) -> List[List[str]]:
        out = []
        for r in self.rows:
            line = [r.agent, r.strategy, r.task, r.weather, str(len(r.trials))]
            for m in METRICS:
                line += [_fmt(r.average(m)), _fmt(r.maximum(m))]
            out.append(line)
        return out

    def write_csv(self, path: str) -> None:
        with atomic_write(path) as f:
            w = csv.writer(f)
            w.writerow(self.header())
            w.writerows(self.table())

    def write_text(self, path: str, missing: Sequence[str] = ()) -> None:
        with atomic_write(path) as f:
            f.write(self.text(missing))

    def text(self, missing: Sequence[str] = ()) -> str:
        """Aligned table, one metric per column as avg/max."""
        head = ["agent", "strategy", "task", "weather", "trials"] + list(METRICS)
        body = []
        for r in self.rows:
            line = [r.agent, r.strategy, r.task, r.weather, str(len(r.trials))]
            line += [f"{_fmt(r.average(m))}/{_fmt(r.maximum(m))}" for m in METRICS]
            body.append(line)
        body += [[cell, "missing"] + [""] * (len(head) - 2) for cell in missing]
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [head] + body]
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.2f}"


# --------------------------------------------------------------------------
# Plot-ready data
# --------------------------------------------------------------------------


def write_success_series(report: BenchmarkReport, path: str) -> None:
    with atomic_write(path) as f:
        w = csv.writer(f)
        w.writerow(("agent", "strategy", "task", "weather", "trial", "success_rate"))
        for r in report.rows:
            for i, t in enumerate(r.trials):
                w.writerow((r.agent, r.strategy, r.task, r.weather, i, _fmt(t["success_rate"])))


def _selected(trace: dict, dim: int) -> float:
    return trace["log_vars"][trace["chosen"][dim]][dim]


def _intersection(trace: dict) -> bool:
    return trace.get("command", HighLevelCommand.FOLLOW_LANE) != HighLevelCommand.FOLLOW_LANE


def steer_uncertainty(traces: Sequence[dict]) -> Dict[str, np.ndarray]:
    """Selected steer log-variances split into straight-road and
    intersection steps."""
    groups = {"straight_road": [], "intersection": []}
    for t in traces:
        if t.get("log_vars") is None:
            continue
        groups["intersection" if _intersection(t) else "straight_road"].append(_selected(t, 1))
    return {k: np.array(v, dtype=np.float64) for k, v in groups.items()}


def write_uncertainty_hist(traces: Sequence[dict], path: str) -> None:
    groups = steer_uncertainty(traces)
    counts = {k: np.histogram(v, HIST_EDGES)[0] for k, v in groups.items()}
    with atomic_write(path) as f:
        w = csv.writer(f)
        w.writerow(("bin_low", "bin_high", "straight_road", "intersection"))
        for i in range(len(HIST_EDGES) - 1):
            w.writerow(
                (HIST_EDGES[i], HIST_EDGES[i + 1], counts["straight_road"][i], counts["intersection"][i])
            )


def chosen_frequency(traces: Sequence[dict]) -> Dict[Tuple[str, str], Dict[int, float]]:
    """Per strategy and action dimension, the share of steps each candidate
    index was chosen."""
    tallies: Dict[Tuple[str, str], Dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for t in traces:
        for d, name in enumerate(DIMENSIONS):
            tallies[(t.get("strategy", ""), name)][t["chosen"][d]] += 1
    out = {}
    for key, counts in tallies.items():
        total = sum(counts.values())
        out[key] = {j: n / total for j, n in sorted(counts.items())}
    return out


def write_chosen_frequency(traces: Sequence[dict], path: str) -> None:
    freq = chosen_frequency(traces)
    with atomic_write(path) as f:
        w = csv.writer(f)
        w.writerow(("strategy", "dimension", "candidate", "frequency"))
        for (strategy, dim), shares in sorted(freq.items()):
            for j, share in shares.items():
                w.writerow((strategy, dim, j, repr(share)))


def write_summary(report: BenchmarkReport, traces: Sequence[dict], path: str) -> None:
    by_cell: Dict[tuple, List[dict]] = defaultdict(list)
    for t in traces:
        by_cell[(t.get("agent"), t.get("strategy"), t.get("task"), t.get("weather"))].append(t)
    with atomic_write(path) as f:
        w = csv.writer(f)
        w.writerow(report.header() + ["steer_logvar_straight", "steer_logvar_intersection"])
        for row, line in zip(report.rows, report.table()):
            groups = steer_uncertainty(by_cell.get((row.agent, row.strategy, row.task, row.weather), []))
            extra = [_fmt(float(v.mean())) if v.size else "" for v in groups.values()]
            w.writerow(line + extra)
    logger.info('Summary of %d rows written to "%s"', len(report.rows), path)
