"""Agreement between judge grades and gold grades.

Pointwise: binary MAE (share of disagreeing pairs) and Cohen's kappa.
Listwise: Kendall's tau-b between gold and predicted grades inside each SERP,
averaged over the queries where it is defined.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import GRADES, QueryGroup
from .errors import EmptyInputError, UndefinedResultError

Pair = tuple[int, int]


def _as_arrays(pairs: Iterable[Pair]) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInputError("no (gold, predicted) pairs")
    arr = np.asarray(pairs, dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def binary_mae(pairs: Iterable[Pair]) -> float:
    gold, pred = _as_arrays(pairs)
    return float(np.mean(gold != pred))


@dataclass(frozen=True)
class ConfusionMatrix:
    """4x4 counts indexed ``[gold - 1][predicted - 1]``."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.counts)
        if c.shape != (4, 4):
            raise ValueError(f"confusion matrix must be 4x4, got {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Pair]) -> "ConfusionMatrix":
        m = np.zeros((4, 4), dtype=np.int64)
        for g, p in pairs:
            m[int(g) - 1, int(p) - 1] += 1
        return cls(m)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def as_lists(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def _kappa_from_counts(m: np.ndarray) -> float:
    n = m.sum()
    p_o = np.trace(m) / n
    p_e = float(np.dot(m.sum(axis=1), m.sum(axis=0))) / (n * n)
    if p_e == 1.0:
        # both raters gave one identical constant grade
        return 1.0
    return float((p_o - p_e) / (1.0 - p_e))


def cohens_kappa(pairs: Iterable[Pair]) -> float:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInputError("no (gold, predicted) pairs")
    return _kappa_from_counts(ConfusionMatrix.from_pairs(pairs).counts)


def kendall_tau(gold: Sequence[int], pred: Sequence[int]) -> float | None:
    """Tau-b over all document pairs; ``None`` when either side is fully tied."""
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted")
    if len(gold) < 2:
        return None
    g = np.asarray(gold, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    iu = np.triu_indices(len(g), k=1)
    dg = np.sign(g[:, None] - g[None, :])[iu]
    dp = np.sign(p[:, None] - p[None, :])[iu]
    untied_g = np.count_nonzero(dg)
    untied_p = np.count_nonzero(dp)
    if untied_g == 0 or untied_p == 0:
        return None
    s = float(np.sum(dg * dp))
    return s / math.sqrt(untied_g * untied_p)


def _comparable(group: QueryGroup) -> list[Pair]:
    return [(int(p.gold), int(p.predicted)) for p in group.pairs if p.comparable]


def mean_tau(groups: Iterable[QueryGroup]) -> tuple[float, int]:
    """Unweighted mean of per-query tau-b and the number of queries counted."""
    taus = []
    for g in groups:
        pairs = _comparable(g)
        if len(pairs) < 2:
            continue
        t = kendall_tau([a for a, _ in pairs], [b for _, b in pairs])
        if t is not None:
            taus.append(t)
    if not taus:
        raise UndefinedResultError("tau is undefined for every query")
    return math.fsum(taus) / len(taus), len(taus)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    absent: bool = False


def per_class_metrics(confusion: ConfusionMatrix) -> tuple[dict[int, ClassMetrics], float]:
    """One-vs-rest precision/recall/F1 per grade plus overall accuracy.

    Empty denominators give 0; a grade seen on neither axis is flagged absent.
    """
    m = np.asarray(confusion.counts)
    total = m.sum()
    out = {}
    for i, g in enumerate(GRADES):
        tp = m[i, i]
        gold_n = m[i, :].sum()
        pred_n = m[:, i].sum()
        precision = tp / pred_n if pred_n else 0.0
        recall = tp / gold_n if gold_n else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[g] = ClassMetrics(float(precision), float(recall), float(f1), int(gold_n), absent=bool(gold_n == 0 and pred_n == 0))
    accuracy = float(np.trace(m) / total) if total else 0.0
    return out, accuracy


@dataclass(frozen=True)
class AgreementReport:
    mae_binary: float
    kappa: float
    mean_tau: float | None
    tau_query_count: int
    confusion: ConfusionMatrix
    per_class: dict[int, ClassMetrics]
    accuracy: float
    pair_count: int
    excluded_count: int = 0
    query_count: int = 0
    label: str = ""

    @property
    def excluded_fraction(self) -> float:
        total = self.pair_count + self.excluded_count
        return self.excluded_count / total if total else 0.0

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "mae_binary": self.mae_binary,
            "kappa": self.kappa,
            "mean_tau": self.mean_tau,
            "tau_query_count": self.tau_query_count,
            "query_count": self.query_count,
            "accuracy": self.accuracy,
            "pair_count": self.pair_count,
            "excluded_count": self.excluded_count,
            "confusion": self.confusion.as_lists(),
            "per_class": {
                str(g): {"precision": c.precision, "recall": c.recall, "f1": c.f1, "support": c.support, "absent": c.absent}
                for g, c in self.per_class.items()
            },
        }


def agreement_report(groups: Sequence[QueryGroup], label: str = "") -> AgreementReport:
    pairs: list[Pair] = []
    excluded = 0
    for g in groups:
        for p in g.pairs:
            if p.comparable:
                pairs.append((int(p.gold), int(p.predicted)))
            elif p.gold is not None:
                excluded += 1
    if not pairs:
        raise EmptyInputError("no pair has both a gold and a predicted grade")
    cm = ConfusionMatrix.from_pairs(pairs)
    per_class, accuracy = per_class_metrics(cm)
    mae = binary_mae(pairs)
    try:
        tau, tau_n = mean_tau(groups)
    except UndefinedResultError:
        tau, tau_n = None, 0
    return AgreementReport(
        mae_binary=mae,
        kappa=_kappa_from_counts(cm.counts),
        mean_tau=tau,
        tau_query_count=tau_n,
        confusion=cm,
        per_class=per_class,
        accuracy=accuracy,
        pair_count=len(pairs),
        excluded_count=excluded,
        query_count=len(groups),
        label=label,
    )


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.2f}"


def agreement_table(reports: Sequence[AgreementReport]) -> str:
    """Aligned text table, one column per report (MAE / kappa / tau rows)."""
    labels = [r.label or f"run{i + 1}" for i, r in enumerate(reports)]
    width = max(10, *(len(lbl) + 2 for lbl in labels))
    lines = [f"{'':<18}" + "".join(f"{lbl:>{width}}" for lbl in labels)]
    for name, get in (
        ("MAE (binary)", lambda r: _fmt(r.mae_binary)),
        ("kappa", lambda r: _fmt(r.kappa)),
        ("tau", lambda r: _fmt(r.mean_tau)),
        ("accuracy", lambda r: _fmt(r.accuracy)),
        ("pairs", lambda r: str(r.pair_count)),
        ("excluded", lambda r: f"{r.excluded_count} ({r.excluded_fraction:.0%})"),
        ("tau queries", lambda r: str(r.tau_query_count)),
    ):
        lines.append(f"{name:<18}" + "".join(f"{get(r):>{width}}" for r in reports))
    return "\n".join(lines)


def confusion_table(report: AgreementReport) -> str:
    lines = ["gold\\pred" + "".join(f"{g:>7}" for g in GRADES)]
    for g, row in zip(GRADES, report.confusion.as_lists()):
        lines.append(f"{g:<9}" + "".join(f"{v:>7}" for v in row))
    return "\n".join(lines)


def write_metric_series_csv(series: Mapping[int, AgreementReport], path: str | Path) -> None:
    """Per-epoch per-class metrics in long format for external plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "grade", "precision", "recall", "f1", "accuracy", "kappa", "mean_tau", "mae_binary"])
        for epoch in sorted(series):
            r = series[epoch]
            for g, c in r.per_class.items():
                w.writerow([epoch, g, f"{c.precision:.6f}", f"{c.recall:.6f}", f"{c.f1:.6f}",
                            f"{r.accuracy:.6f}", f"{r.kappa:.6f}",
                            "" if r.mean_tau is None else f"{r.mean_tau:.6f}", f"{r.mae_binary:.6f}"])
