"""Task metrics, confidence intervals, aggregation, gates, and ranking.

The per-task metric is balanced accuracy (macro-averaged recall) rescaled so
that random guessing maps to 0 and perfection to 1:

    normalized = (bac - 1/N) / (1 - 1/N)

which can be negative for below-chance predictors. Aggregation averages
per-task normalized scores; confidence intervals are two-sided Student-t
intervals on the task-level mean. All reductions run in ascending
task_index order so reports are bit-reproducible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

SCHEMA_VERSION = 1

#: Feedback-phase entry gates per league; strictly above the value passes.
LEAGUE_GATES = {
    "free-style": 0.587,
    "meta-learning": 0.361,
}

FINAL_RUN_COUNT = 3


# ---------------------------------------------------------------------------
# Per-task metrics
# ---------------------------------------------------------------------------

def balanced_accuracy(predicted, true, num_ways: int) -> float:
    """Mean over classes of per-class recall.

    Every class 0..num_ways-1 must appear in the true labels (task
    construction guarantees q queries per class).
    """
    pred = np.asarray(predicted)
    truth = np.asarray(true)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"label vectors must match, got {pred.shape} vs {truth.shape}")
    if num_ways < 2:
        raise ValueError(f"num_ways must be >= 2, got {num_ways}")
    if truth.min() < 0 or truth.max() >= num_ways:
        raise ValueError(f"true labels outside [0, {num_ways})")
    if pred.min() < 0 or pred.max() >= num_ways:
        raise ValueError(f"predicted labels outside [0, {num_ways})")
    totals = np.bincount(truth, minlength=num_ways)
    if np.any(totals == 0):
        missing = int(np.argmin(totals))
        raise ValueError(f"class {missing} absent from true labels")
    hits = np.bincount(truth[pred == truth], minlength=num_ways)
    return float(np.mean(hits / totals))


def normalized_accuracy(bac: float, num_ways: int) -> float:
    """Rescale bac so chance level (1/N) maps to 0 and 1 stays 1."""
    if num_ways < 2:
        raise ValueError(f"num_ways must be >= 2, got {num_ways}")
    if not 0.0 <= bac <= 1.0:
        raise ValueError(f"bac must lie in [0,1], got {bac}")
    chance = 1.0 / num_ways
    return (bac - chance) / (1.0 - chance)


@dataclass(frozen=True)
class TaskScore:
    task_index: int
    dataset_id: str
    ways: int
    shots: int
    bac: float
    normalized: float

    @classmethod
    def from_labels(cls, task_index, dataset_id, ways, shots, predicted, true):
        bac = balanced_accuracy(predicted, true, ways)
        return cls(task_index, dataset_id, ways, shots, bac,
                   normalized_accuracy(bac, ways))

    @classmethod
    def failed(cls, task_index, dataset_id, ways, shots):
        """Score for a crashed/timed-out task: zero correct answers."""
        return cls(task_index, dataset_id, ways, shots, 0.0,
                   normalized_accuracy(0.0, ways))


# ---------------------------------------------------------------------------
# Student-t quantiles via the regularized incomplete beta function
# ---------------------------------------------------------------------------

_FPMIN = 1e-300
_CF_EPS = 1e-15
_CF_MAX_ITER = 300


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    # Modified Lentz evaluation of the incomplete-beta continued fraction.
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise RuntimeError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0.0 or b <= 0.0:
        raise ValueError(f"a and b must be positive, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0,1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError(f"df must be positive, got {df}")
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return tail if t < 0 else 1.0 - tail


def t_quantile(p: float, df: float) -> float:
    """Inverse Student-t CDF by bisection; absolute error below 1e-9."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0,1), got {p}")
    if df <= 0:
        raise ValueError(f"df must be positive, got {df}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df)
    lo, hi = 0.0, 1.0
    while student_t_cdf(hi, df) < p:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError(f"t quantile bracket failed for p={p}, df={df}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if student_t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class ConfidenceInterval:
    mean: float
    half_width: float
    level: float
    n: int
    df: int
    sigma: float
    t: float

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "half_width": self.half_width,
            "level": self.level,
            "n": self.n,
            "df": self.df,
            "sigma": self.sigma,
            "t": self.t,
        }


def confidence_interval(scores: Sequence[float], level: float = 0.95) -> ConfidenceInterval:
    """Two-sided Student-t interval on the mean of the given scores."""
    values = np.asarray(scores, dtype=np.float64)
    n = values.size
    if n < 2:
        raise ValueError(f"confidence interval needs n >= 2, got {n}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0,1), got {level}")
    mean = float(values.mean())
    sigma = float(values.std(ddof=1))
    t = t_quantile(1.0 - (1.0 - level) / 2.0, n - 1)
    return ConfidenceInterval(
        mean=mean, half_width=t * sigma / math.sqrt(n), level=level,
        n=int(n), df=int(n - 1), sigma=sigma, t=t,
    )


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _group_summary(scores: Sequence[TaskScore], level: float) -> dict:
    values = [s.normalized for s in scores]
    out = {
        "mean": float(np.mean(values)),
        "n_tasks": len(values),
        "ci": confidence_interval(values, level).to_dict() if len(values) >= 2 else None,
    }
    return out


@dataclass(frozen=True)
class ScoreReport:
    overall: dict
    per_dataset: dict
    per_ways: dict
    per_shots: dict
    n_tasks: int

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_dataset": self.per_dataset,
            "per_ways": self.per_ways,
            "per_shots": self.per_shots,
            "n_tasks": self.n_tasks,
        }


def aggregate(scores: Iterable[TaskScore], level: float = 0.95) -> ScoreReport:
    """Overall, per-dataset, per-ways, and per-shots means with CIs."""
    ordered = sorted(scores, key=lambda s: s.task_index)
    if not ordered:
        raise ValueError("cannot aggregate an empty score list")
    per_dataset: dict[str, list[TaskScore]] = {}
    per_ways: dict[int, list[TaskScore]] = {}
    per_shots: dict[int, list[TaskScore]] = {}
    for s in ordered:
        per_dataset.setdefault(s.dataset_id, []).append(s)
        per_ways.setdefault(s.ways, []).append(s)
        per_shots.setdefault(s.shots, []).append(s)
    return ScoreReport(
        overall=_group_summary(ordered, level),
        per_dataset={k: _group_summary(v, level) for k, v in sorted(per_dataset.items())},
        per_ways={str(k): _group_summary(v, level) for k, v in sorted(per_ways.items())},
        per_shots={str(k): _group_summary(v, level) for k, v in sorted(per_shots.items())},
        n_tasks=len(ordered),
    )


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks on ties."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.size != yv.size or xv.size < 2:
        raise ValueError("spearman_rho needs two equal-length vectors, n >= 2")

    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size)
        sv = v[order]
        i = 0
        while i < v.size:
            j = i
            while j + 1 < v.size and sv[j + 1] == sv[i]:
                j += 1
            r[order[i : j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        return r

    rx, ry = ranks(xv), ranks(yv)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# Gates and final ranking
# ---------------------------------------------------------------------------

def league_gate(mean_score: float, league: str) -> bool:
    """Entry gate: strictly above the league threshold passes."""
    if league not in LEAGUE_GATES:
        raise KeyError(
            f"league {league!r} has no gate threshold; known: {sorted(LEAGUE_GATES)}"
        )
    return mean_score > LEAGUE_GATES[league]


@dataclass(frozen=True)
class SubmissionResult:
    submission_id: str
    timestamp: float
    league: str
    run_means: tuple[float, ...]
    per_dataset_means: Optional[Mapping[str, float]] = None

    @property
    def ranking_score(self) -> float:
        return min(self.run_means)

    def to_dict(self) -> dict:
        return {
            "submission_id": self.submission_id,
            "timestamp": self.timestamp,
            "league": self.league,
            "run_means": list(self.run_means),
            "ranking_score": self.ranking_score,
            "per_dataset_means": dict(self.per_dataset_means or {}),
        }


def final_rank(results: Sequence[SubmissionResult]) -> list[SubmissionResult]:
    """Order submissions by worst-of-three runs, first-submitted wins ties."""
    for r in results:
        if len(r.run_means) != FINAL_RUN_COUNT:
            raise ValueError(
                f"submission {r.submission_id!r} has {len(r.run_means)} runs, "
                f"final ranking requires exactly {FINAL_RUN_COUNT}"
            )
    return sorted(results, key=lambda r: (-r.ranking_score, r.timestamp))


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

TASKS_CSV_HEADER = ["task_index", "dataset_id", "N", "k", "bac", "normalized"]


def write_tasks_csv(scores: Sequence[TaskScore], path) -> None:
    ordered = sorted(scores, key=lambda s: s.task_index)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TASKS_CSV_HEADER)
        for s in ordered:
            writer.writerow(
                [s.task_index, s.dataset_id, s.ways, s.shots, repr(s.bac),
                 repr(s.normalized)]
            )


def read_tasks_csv(path) -> list[TaskScore]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TASKS_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [
            TaskScore(int(r[0]), r[1], int(r[2]), int(r[3]), float(r[4]), float(r[5]))
            for r in reader if r
        ]


def summary_dict(
    report: ScoreReport,
    league: Optional[str] = None,
    ranking_inputs: Optional[dict] = None,
) -> dict:
    gates = {}
    for name, threshold in sorted(LEAGUE_GATES.items()):
        gates[name] = {
            "threshold": threshold,
            "pass": bool(report.overall["mean"] > threshold),
        }
    out = {
        "schema_version": SCHEMA_VERSION,
        **report.to_dict(),
        "gates": gates,
    }
    if league is not None:
        out["league"] = league
    if ranking_inputs is not None:
        out["ranking_inputs"] = ranking_inputs
    return out


def write_summary_json(summary: Mapping, path) -> None:
    Path(path).write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
