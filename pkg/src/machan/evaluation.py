"""Metrics and experiment reporting: Pearson correlation and MSE per split.

Sums use ``math.fsum`` so metric values are independent of sequence
order within a split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from machan import model as model_mod
from machan.parallel import map_indexed


class EvaluationError(ValueError):
    """Metric undefined for the given inputs."""


def _check_pair(y, yhat, min_n):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise EvaluationError(f"need equal-length vectors, got {y.shape} and {yhat.shape}")
    if y.size < min_n:
        raise EvaluationError(f"need at least {min_n} points, got {y.size}")
    return y, yhat


def pearson(y, yhat) -> float:
    """Pearson correlation of mean-centered deviations."""
    y, yhat = _check_pair(y, yhat, min_n=2)
    if y.min() == y.max():
        raise EvaluationError("correlation undefined: first vector is constant")
    if yhat.min() == yhat.max():
        raise EvaluationError("correlation undefined: second vector is constant")
    my = math.fsum(y) / y.size
    mh = math.fsum(yhat) / yhat.size
    dy = y - my
    dh = yhat - mh
    num = math.fsum(dy * dh)
    den = math.sqrt(math.fsum(dy * dy)) * math.sqrt(math.fsum(dh * dh))
    # roundoff can land a hair outside [-1, 1]; keep the range invariant exact
    return min(1.0, max(-1.0, num / den))


def mse_metric(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat, min_n=1)
    d = y - yhat
    return math.fsum(d * d) / y.size


@dataclass
class EvalReport:
    """Metrics for one model on one split."""

    split: str
    n: int
    rho: float | None
    mse: float
    model_id: str = ""
    seed: int = 0
    rho_error: str | None = None

    def to_json(self) -> dict:
        return {
            "split": self.split, "n": self.n, "rho": self.rho, "mse": self.mse,
            "model_id": self.model_id, "seed": self.seed, "rho_error": self.rho_error,
        }


@dataclass
class RunAggregate:
    """Unweighted means over a set of run reports."""

    reports: list[EvalReport] = field(default_factory=list)

    @property
    def mean_rho(self) -> float | None:
        if any(r.rho is None for r in self.reports):
            return None
        return math.fsum(r.rho for r in self.reports) / len(self.reports)

    @property
    def mean_mse(self) -> float:
        return math.fsum(r.mse for r in self.reports) / len(self.reports)


def predict_all(params, config, sequences) -> np.ndarray:
    preds = map_indexed(
        lambda seq: model_mod.forward(seq, params, config).yhat, sequences
    )
    return np.asarray(preds, dtype=np.float64)


def evaluate(params, config, sequences, split: str = "test",
             model_id: str = "", seed: int = 0) -> EvalReport:
    """Forward every sequence and compute both metrics.

    A constant prediction vector makes correlation undefined; the error is
    surfaced on the report while MSE is still computed.
    """
    if not sequences:
        raise EvaluationError(f"split {split!r} is empty")
    yhat = predict_all(params, config, sequences)
    y = np.asarray([s.label for s in sequences], dtype=np.float64)
    mse = mse_metric(y, yhat)
    try:
        rho = pearson(y, yhat)
        rho_error = None
    except EvaluationError as exc:
        rho = None
        rho_error = str(exc)
    return EvalReport(split=split, n=len(sequences), rho=rho, mse=mse,
                      model_id=model_id, seed=seed, rho_error=rho_error)


def aggregate(reports: list[EvalReport]) -> RunAggregate:
    if not reports:
        raise EvaluationError("cannot aggregate zero reports")
    return RunAggregate(reports=list(reports))


def write_reports(path, reports: list[EvalReport]) -> None:
    """One JSON line per run report."""
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_json()) + "\n")


def summary_table(reports: list[EvalReport]) -> str:
    """Plain-text table of per-run metrics plus the aggregate row."""
    rows = [("model", "split", "seed", "n", "rho", "mse")]
    for r in reports:
        rho = "undef" if r.rho is None else f"{r.rho:.4f}"
        rows.append((r.model_id, r.split, str(r.seed), str(r.n), rho, f"{r.mse:.4f}"))
    agg = aggregate(reports)
    mean_rho = "undef" if agg.mean_rho is None else f"{agg.mean_rho:.4f}"
    rows.append(("mean", "", "", "", mean_rho, f"{agg.mean_mse:.4f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines)
