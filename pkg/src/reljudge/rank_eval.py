"""NDCG@k and MRR over ranked lists, with percentile bootstrap intervals."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetError, EmptyInputError, UndefinedResultError

DEFAULT_KS = (5, 10, 30)
DEFAULT_THRESHOLD = 4


@dataclass(frozen=True)
class RankedList:
    """A system ranking: ``doc_ids[i]`` is at rank ``i + 1`` with gain ``gains[i]``."""

    query_id: str
    doc_ids: tuple[str, ...]
    gains: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.doc_ids) != len(self.gains):
            raise ValueError("doc_ids and gains differ in length")
        if any(g < 0 for g in self.gains):
            raise ValueError("gains must be >= 0")

    @classmethod
    def from_scores(cls, query_id: str, doc_ids: Sequence[str], scores: Sequence[float], gains: Sequence[int]) -> "RankedList":
        """Order by descending score; ties broken by ascending doc id."""
        order = sorted(range(len(doc_ids)), key=lambda i: (-scores[i], doc_ids[i]))
        return cls(query_id, tuple(doc_ids[i] for i in order), tuple(int(gains[i]) for i in order))


def _gain_values(gains: np.ndarray, gain: str) -> np.ndarray:
    if gain == "exponential":
        return np.exp2(gains) - 1.0
    if gain == "linear":
        return gains.astype(np.float64)
    raise ValueError(f"unknown gain function {gain!r}")


def ndcg_at_k(ranked: RankedList, k: int, gain: str = "exponential") -> float | None:
    """NDCG@k with log2(rank + 1) discounts; ``None`` when the ideal DCG is 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = np.asarray(ranked.gains, dtype=np.float64)
    n = min(k, len(g))
    disc = 1.0 / np.log2(np.arange(2, n + 2))
    vals = _gain_values(g, gain)
    dcg = float(np.sum(vals[:n] * disc))
    ideal = np.sort(vals)[::-1]
    idcg = float(np.sum(ideal[:n] * disc))
    if idcg == 0.0:
        return None
    return dcg / idcg


def mrr(ranked: RankedList, relevant_threshold: int = DEFAULT_THRESHOLD) -> float:
    if relevant_threshold < 1:
        raise ValueError("relevant_threshold must be >= 1")
    for rank, g in enumerate(ranked.gains, start=1):
        if g >= relevant_threshold:
            return 1.0 / rank
    return 0.0


def bootstrap_ci(
    values: Sequence[float], iterations: int = 1000, level: float = 0.95, seed: int = 0
) -> tuple[float, float, float]:
    """Mean and percentile bootstrap interval from resampling queries with replacement."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptyInputError("bootstrap needs at least one value")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(iterations, v.size))
    means = v[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return float(v.mean()), float(low), float(high)


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    ci_low: float
    ci_high: float
    n: int

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2.0

    def overlaps(self, other: "MetricSummary") -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


@dataclass(frozen=True)
class RankEvalReport:
    metrics: dict[str, MetricSummary]
    query_count: int
    skipped_queries: int
    per_query: dict[str, list[float]] = field(default_factory=dict, repr=False)
    level: float = 0.95
    iterations: int = 1000

    def __getitem__(self, name: str) -> MetricSummary:
        return self.metrics[name]

    def as_dict(self) -> dict:
        return {
            "query_count": self.query_count,
            "skipped_queries": self.skipped_queries,
            "ci_level": self.level,
            "bootstrap_iterations": self.iterations,
            "metrics": {
                k: {"mean": m.mean, "ci_low": m.ci_low, "ci_high": m.ci_high, "half_width": m.half_width, "n": m.n}
                for k, m in self.metrics.items()
            },
        }


def evaluate_run(
    lists: Sequence[RankedList],
    ks: Iterable[int] = DEFAULT_KS,
    threshold: int = DEFAULT_THRESHOLD,
    iterations: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    gain: str = "exponential",
) -> RankEvalReport:
    """Average per-query metrics and attach bootstrap intervals.

    Queries without any positive gain are left out of NDCG means but count
    as 0 in MRR.
    """
    if not lists:
        raise EmptyInputError("no ranked lists")
    ks = tuple(ks)
    per_query: dict[str, list[float]] = {f"ndcg@{k}": [] for k in ks}
    per_query["mrr"] = []
    skipped = 0
    for rl in lists:
        first = ndcg_at_k(rl, ks[0], gain) if ks else None
        if ks and first is None:
            skipped += 1
        else:
            for k in ks:
                per_query[f"ndcg@{k}"].append(ndcg_at_k(rl, k, gain))
        per_query["mrr"].append(mrr(rl, threshold))
    if skipped == len(lists):
        raise UndefinedResultError("every query has zero ideal DCG")
    metrics = {}
    for name, vals in per_query.items():
        mean, low, high = bootstrap_ci(vals, iterations, level, seed)
        metrics[name] = MetricSummary(mean, low, high, len(vals))
    return RankEvalReport(metrics, len(lists), skipped, per_query, level, iterations)


def _sci(x: float) -> str:
    if x == 0:
        return "0"
    exp = math.floor(math.log10(abs(x)))
    mant = round(x / 10**exp)
    if mant == 10:
        mant, exp = 1, exp + 1
    return f"{mant}e{exp}"


def rank_eval_table(rows: Sequence[tuple[str, str, RankEvalReport]]) -> str:
    """Text table with one row per (dim, condition): mean plus-minus CI half-width."""
    if not rows:
        return ""
    names = list(rows[0][2].metrics)
    head = f"{'Dim':<6}{'Rescaling':<12}" + "".join(f"{n.upper():>18}" for n in names)
    lines = [head]
    for dim, cond, rep in rows:
        cells = "".join(f"{rep[n].mean:>9.3f} ±{_sci(rep[n].half_width):<7}" for n in names)
        lines.append(f"{dim:<6}{cond:<12}{cells}")
    lines.append(f"(± = half-width of the {rows[0][2].level:.0%} percentile bootstrap interval, "
                 f"{rows[0][2].iterations} resamples)")
    return "\n".join(lines)


def load_ranked_lists(path: str | Path) -> list[RankedList]:
    """Read ``{query_id, doc_id, rank, gain}`` lines into ranked lists (sorted by rank)."""
    rows: dict[str, list[tuple[int, str, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows.setdefault(str(rec["query_id"]), []).append((int(rec["rank"]), str(rec["doc_id"]), int(rec["gain"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"bad ranked-list record: {exc}", line=lineno, path=str(path)) from None
    out = []
    for qid, items in rows.items():
        items.sort()
        ranks = [r for r, _, _ in items]
        if len(set(ranks)) != len(ranks):
            raise DatasetError(f"query {qid!r} has duplicate ranks", path=str(path))
        out.append(RankedList(qid, tuple(d for _, d, _ in items), tuple(g for _, _, g in items)))
    return out


def dump_ranked_lists(lists: Iterable[RankedList], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rl in lists:
            for rank, (d, g) in enumerate(zip(rl.doc_ids, rl.gains), start=1):
                fh.write(json.dumps({"query_id": rl.query_id, "doc_id": d, "rank": rank, "gain": g}) + "\n")
