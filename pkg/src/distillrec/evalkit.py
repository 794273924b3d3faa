"""Ranking metrics, an exact tabular solver, model-size accounting and latency benchmarks."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .nnkit import ParameterError, ShapeError


# ---------------------------------------------------------------------------
# ranking metrics (binary relevance)

def _check_ranked(ranked, k: int) -> list:
    ranked = [int(x) for x in ranked]
    if k < 1:
        raise ParameterError(f"cutoff K must be at least 1, got {k}")
    if k > len(ranked):
        raise ParameterError(f"cutoff K={k} exceeds ranked list length {len(ranked)}")
    if len(set(ranked)) != len(ranked):
        raise ParameterError("ranked list contains repeated items")
    return ranked


def precision_at_k(ranked, relevant, k: int) -> float:
    """Fraction of the top ``k`` items that are relevant."""
    ranked = _check_ranked(ranked, k)
    rel = set(int(x) for x in relevant)
    return sum(1 for x in ranked[:k] if x in rel) / k


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """DCG@K with gain ``1 / log2(rank + 1)`` over the ideal DCG; 0 when nothing is relevant."""
    ranked = _check_ranked(ranked, k)
    rel = set(int(x) for x in relevant)
    if not rel:
        return 0.0
    dcg = sum(1.0 / math.log2(r + 2) for r, x in enumerate(ranked[:k]) if x in rel)
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(rel))))
    return dcg / ideal


def average_precision(ranked, relevant) -> float:
    """Mean of precision@rank over the ranks holding relevant items; 0 when nothing is relevant."""
    rel = set(int(x) for x in relevant)
    if not rel:
        return 0.0
    hits, total = 0, 0.0
    for r, x in enumerate(ranked, 1):
        if int(x) in rel:
            hits += 1
            total += hits / r
    return total / len(rel)


def mean_average_precision(rankings, relevants) -> float:
    rankings, relevants = list(rankings), list(relevants)
    if len(rankings) != len(relevants):
        raise ParameterError(f"{len(rankings)} rankings but {len(relevants)} relevance sets")
    if not rankings:
        return 0.0
    return float(np.mean([average_precision(r, s) for r, s in zip(rankings, relevants)]))


# ---------------------------------------------------------------------------
# exact tabular solver

def bellman_backup(mdp, task: int, Q: np.ndarray) -> np.ndarray:
    P, R = mdp.transition[task], mdp.reward[task]
    return R + mdp.gamma * P @ Q.max(axis=1)


def value_iteration(mdp, task: int = 0, tol: float = 1e-10, max_sweeps: int = 100_000):
    """Optimal ``Q*[s, a]`` by repeated Bellman-optimality backups until the sup-norm change is below ``tol``."""
    if not mdp.gamma < 1.0:
        raise ParameterError(f"value iteration needs gamma < 1, got {mdp.gamma}")
    if not tol > 0:
        raise ParameterError(f"tolerance must be positive, got {tol}")
    Q = np.zeros_like(mdp.reward[task])
    for _ in range(max_sweeps):
        Q_new = bellman_backup(mdp, task, Q)
        delta = np.abs(Q_new - Q).max()
        Q = Q_new
        if delta < tol:
            return Q
    raise RuntimeError(f"value iteration did not converge in {max_sweeps} sweeps")


def optimal_actions(Q: np.ndarray, atol: float = 1e-9) -> list:
    """Set of maximizing actions per state (ties within ``atol``)."""
    return [set(np.flatnonzero(row >= row.max() - atol).tolist()) for row in Q]


# ---------------------------------------------------------------------------
# size and latency

def count_params(net) -> int:
    """Number of scalar parameters across every block of ``net`` (or a parameter dict)."""
    params = getattr(net, "params", net)
    if params is None:
        return 0
    return int(sum(np.asarray(v).size for v in params.values()))


def _timeit(fn, repetitions: int) -> np.ndarray:
    out = np.empty(repetitions)
    for k in range(repetitions):
        t0 = time.perf_counter()
        fn(k)
        out[k] = time.perf_counter() - t0
    return out


@dataclass
class LatencyReport:
    student_ms: dict
    teachers_ms: dict
    repetitions: int
    counters: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.student_ms["median"] / self.teachers_ms["median"]

    def as_dict(self) -> dict:
        return {"student_ms": self.student_ms, "teachers_ms": self.teachers_ms,
                "ratio": self.ratio, "repetitions": self.repetitions, "counters": self.counters}


def _summary(seconds: np.ndarray) -> dict:
    ms = seconds * 1e3
    return {"median": float(np.median(ms)), "p95": float(np.percentile(ms, 95)), "mean": float(ms.mean())}


def bench_latency(student, teachers, states, catalog, repetitions: int = 1000) -> LatencyReport:
    """Time one student pass over all tasks against the teachers answered one after another.

    Each call handles a single state drawn in turn from ``states`` (a list of
    :class:`~distillrec.representation.StateInput`). Both sides start from the raw
    input, so encoders are included in the timings.
    """
    from .distill import student_forward, student_states
    from .teacher import q_scores

    if repetitions < 100:
        raise ParameterError(f"need at least 100 repetitions, got {repetitions}")
    catalog = np.asarray(catalog)
    n = len(states)
    if n == 0:
        raise ShapeError("no states to benchmark")

    def student_call(k):
        S = student_states(student, states[k % n])
        student_forward(student, S[None])

    def teacher_call(k):
        for t in teachers:
            q_scores(t, states[k % n], catalog)

    # warm-up outside the timed region
    student_call(0)
    teacher_call(0)
    t0 = student.trunk_evals
    h0 = [t.head_evals for t in teachers]
    s_times = _timeit(student_call, repetitions)
    t_times = _timeit(teacher_call, repetitions)
    counters = {
        "student_trunk_evals_per_state": (student.trunk_evals - t0) / repetitions,
        "teacher_head_evals_per_state": sum(t.head_evals - h for t, h in zip(teachers, h0)) / repetitions,
    }
    return LatencyReport(_summary(s_times), _summary(t_times), repetitions, counters)


# ---------------------------------------------------------------------------
# reports

def format_table(rows: list, columns: list, float_fmt: str = "{:.4f}") -> str:
    """Aligned plain-text table from a list of dicts."""
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([float_fmt.format(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns])
    widths = [max(len(r[j]) for r in cells) for j in range(len(columns))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def batch_ranking_metrics(scores: np.ndarray, relevant: np.ndarray, k: int) -> dict:
    """Vectorized Precision@K, NDCG@K and average precision for rows of item scores.

    Rankings sort each row by descending score with ties to the lower index;
    ``relevant`` is a boolean matrix of the same shape.
    """
    scores = np.asarray(scores)
    relevant = np.asarray(relevant, dtype=bool)
    if scores.shape != relevant.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} and relevance {relevant.shape} must be matching 2-D arrays")
    n_items = scores.shape[1]
    if not 1 <= k <= n_items:
        raise ParameterError(f"cutoff K={k} outside [1, {n_items}]")
    order = np.argsort(-scores, axis=1, kind="stable")
    hit = np.take_along_axis(relevant, order, axis=1).astype(np.float64)
    n_rel = relevant.sum(axis=1)
    disc = 1.0 / np.log2(np.arange(2, n_items + 2))
    dcg = hit[:, :k] @ disc[:k]
    ideal = np.cumsum(disc[:k])[np.clip(np.minimum(n_rel, k) - 1, 0, None)]
    ranks = np.arange(1, n_items + 1)
    ap_sum = (np.cumsum(hit, axis=1) / ranks * hit).sum(axis=1)
    has = n_rel > 0
    return {
        "precision": hit[:, :k].sum(axis=1) / k,
        "ndcg": np.where(has, dcg / ideal, 0.0),
        "ap": np.where(has, ap_sum / np.maximum(n_rel, 1), 0.0),
    }
