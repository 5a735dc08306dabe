"""Cross-experiment analysis: saliency quality vs accuracy, ablation tables."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Sample, SplitPlan
from .model import NetworkConfig
from .saliency import nss, oracle_map, sample_fixations
from .train import Hyperparams, RunReport, scarce_protocol


class AnalysisError(ValueError):
    pass


def pearson(xs, ys) -> float:
    """Product-moment correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise AnalysisError("pearson needs two equal-length sequences of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((dx * dx).sum()), np.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        raise AnalysisError("pearson is undefined for a constant sequence")
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


@dataclass
class CorrelationPoint:
    method: str
    nss: float
    accuracy: float


@dataclass
class CorrelationStudy:
    points: list[CorrelationPoint]

    def __post_init__(self):
        if len(self.points) < 3:
            raise AnalysisError(f"a correlation study needs >= 3 points, got {len(self.points)}")

    @property
    def coefficient(self) -> float:
        return pearson([p.nss for p in self.points], [p.accuracy for p in self.points])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "nss", "accuracy"])
            for p in self.points:
                w.writerow([p.method, repr(p.nss), repr(p.accuracy)])


def mean_nss(samples: Sequence[Sample], ids: Sequence[int], n_fixations: int = 50, seed: int = 0) -> float:
    """Average NSS of the attached maps over ``ids``; fixations come from masks."""
    scores = []
    for i in ids:
        s = samples[i]
        if s.saliency is None:
            raise AnalysisError(f"sample {s.name} has no saliency map")
        scores.append(nss(s.saliency, sample_fixations(s.mask, n_fixations, seed + i)))
    return float(np.mean(scores))


def with_oracle(samples: Sequence[Sample], quality: float, seed: int = 0) -> list[Sample]:
    return [dataclasses.replace(s, saliency=oracle_map(s.mask, quality, seed + i)) for i, s in enumerate(samples)]


def correlation_study(samples: Sequence[Sample], plan: SplitPlan, config: NetworkConfig, hyper: Hyperparams,
                      levels: Sequence[float], n_seeds: int, k=5, pretrained=None,
                      saliency_seed: int = 0, threads: int | None = None) -> tuple[CorrelationStudy, list[RunReport]]:
    """Sweep oracle saliency quality; pair mean test-set NSS with accuracy at ``k``.

    ``pretrained`` may be a bundle shared by all levels or a callable
    ``quality -> bundle``.
    """
    if len(levels) < 3:
        raise AnalysisError("a correlation study needs >= 3 quality levels")
    points, reports = [], []
    for q in levels:
        labelled = with_oracle(samples, q, saliency_seed)
        bundle = pretrained(q) if callable(pretrained) else pretrained
        report = scarce_protocol(labelled, plan, config, hyper, [k], n_seeds, pretrained=bundle,
                                 threads=threads, name=f"oracle_q{q:g}")
        reports.append(report)
        points.append(CorrelationPoint(report.name, mean_nss(labelled, plan.test_ids()), report.mean(k)))
    return CorrelationStudy(points), reports


@dataclass
class TableRow:
    name: str
    cells: list[float]

    @property
    def avg(self) -> float:
        return float(np.mean(self.cells))


def ablation_table(reports: Sequence[RunReport]) -> tuple[list, list[TableRow]]:
    """One row per report (sorted by name): mean accuracy per k plus AVG."""
    if not reports:
        raise AnalysisError("no reports to tabulate")
    k_list = [str(k) for k in reports[0].k_list]
    rows = []
    for r in reports:
        if [str(k) for k in r.k_list] != k_list:
            raise AnalysisError(f"report {r.name!r} has k-list {r.k_list}, expected {k_list}")
        rows.append(TableRow(r.name, [r.mean(k) for k in r.k_list]))
    rows.sort(key=lambda row: row.name)
    return k_list, rows


def table_from_summaries(named: Sequence[tuple[str, list[tuple[str, float, float]]]]):
    """Same layout as :func:`ablation_table` from ``(name, summary rows)`` pairs."""
    if not named:
        raise AnalysisError("no reports to tabulate")
    k_list = [k for k, _, _ in named[0][1]]
    rows = []
    for name, summary in named:
        if [k for k, _, _ in summary] != k_list:
            raise AnalysisError(f"report {name!r} has k-list {[k for k, _, _ in summary]}, expected {k_list}")
        rows.append(TableRow(name, [m for _, m, _ in summary]))
    rows.sort(key=lambda row: row.name)
    return k_list, rows


def write_table(path, k_list, rows: Sequence[TableRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *k_list, "AVG"])
        for row in rows:
            w.writerow([row.name, *(f"{v:.2f}" for v in row.cells), f"{row.avg:.2f}"])


def format_table(k_list, rows: Sequence[TableRow]) -> str:
    width = max(len("Method"), *(len(r.name) for r in rows))
    head = f"{'Method':<{width}} | " + " ".join(f"{k:>6}" for k in k_list) + f" | {'AVG':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.name:<{width}} | " + " ".join(f"{v:6.1f}" for v in r.cells) + f" | {r.avg:6.1f}")
    return "\n".join(lines)

