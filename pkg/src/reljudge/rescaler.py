"""Split the hard-negative tier into soft-like, true and false hard negatives."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Union

from .core import RankingDataset, RankingExample, RankingTier, RelevanceGrade, RescaleBucket
from .errors import IncompleteJudgmentsError, ValidationSplitError

__all__ = [
    "RescaleBucket",
    "RescaleReport",
    "DEFAULT_LADDER",
    "bucket_of",
    "rescale_dataset",
    "rescaled_gain",
    "judgments_from_journal",
]

# A judgment is either a grade or the error code of a failed judging attempt.
Judgment = Union[int, RelevanceGrade, str]

_BUCKETS = {1: RescaleBucket.SLN, 2: RescaleBucket.HN, 3: RescaleBucket.FHN, 4: RescaleBucket.FHN}

# SoftNeg < SLN < HN < FHN < Pos1 < Pos2 < Pos3
DEFAULT_LADDER = {
    RankingTier.SOFT_NEG: 0,
    RescaleBucket.SLN: 1,
    RescaleBucket.HN: 2,
    RescaleBucket.FHN: 3,
    RankingTier.POS1: 4,
    RankingTier.POS2: 5,
    RankingTier.POS3: 6,
}


def bucket_of(grade: int) -> RescaleBucket:
    return _BUCKETS[int(RelevanceGrade.coerce(grade))]


def rescaled_gain(example: RankingExample, ladder: Mapping = DEFAULT_LADDER) -> int:
    """Gain level on the 7-step ladder; an un-rescaled hard negative sits on the HN step."""
    if example.tier == RankingTier.HARD_NEG:
        return ladder[example.rescaled or RescaleBucket.HN]
    return ladder[example.tier]


@dataclass(frozen=True)
class RescaleReport:
    total_hard_negatives: int
    counts: dict[RescaleBucket, int]
    error_count: int

    @property
    def judged(self) -> int:
        return sum(self.counts.values())

    def pct(self, bucket: RescaleBucket) -> float:
        return 100.0 * self.counts[bucket] / self.judged if self.judged else 0.0

    @property
    def pct_sln(self) -> float:
        return self.pct(RescaleBucket.SLN)

    @property
    def pct_hn(self) -> float:
        return self.pct(RescaleBucket.HN)

    @property
    def pct_fhn(self) -> float:
        return self.pct(RescaleBucket.FHN)

    def as_dict(self) -> dict:
        return {
            "total_hard_negatives": self.total_hard_negatives,
            "judged": self.judged,
            "error_count": self.error_count,
            "counts": {b.value: n for b, n in self.counts.items()},
            "pct_sln": self.pct_sln,
            "pct_hn": self.pct_hn,
            "pct_fhn": self.pct_fhn,
        }

    def table(self, label: str = "judge") -> str:
        head = f"{'':<16}{'HN -> SLN':>11}{'HN -> HN':>11}{'HN -> FHN':>11}"
        row = f"{label:<16}{self.pct_sln:>10.1f}%{self.pct_hn:>10.1f}%{self.pct_fhn:>10.1f}%"
        foot = f"{self.judged} judged hard negatives, {self.error_count} judge errors kept at HN"
        return "\n".join([head, row, foot])


def rescale_dataset(
    examples: Union[RankingDataset, Iterable[RankingExample]],
    judgments: Mapping[tuple[str, str], Judgment],
) -> tuple[list[RankingExample], RescaleReport]:
    """Annotate hard negatives with the bucket of their judged grade.

    Every other tier passes through untouched and extra judgments are ignored.
    Hard negatives whose judgment is an error code keep their original tier
    and are counted in ``error_count``.
    """
    if isinstance(examples, RankingDataset) and examples.is_validation:
        raise ValidationSplitError("validation labels are never rescaled")
    examples = list(examples)
    missing = [
        (ex.query_id, ex.document_id)
        for ex in examples
        if ex.tier == RankingTier.HARD_NEG and (ex.query_id, ex.document_id) not in judgments
    ]
    if missing:
        raise IncompleteJudgmentsError(missing)

    counts = {b: 0 for b in RescaleBucket}
    errors = 0
    out = []
    for ex in examples:
        if ex.tier != RankingTier.HARD_NEG:
            out.append(ex)
            continue
        j = judgments[(ex.query_id, ex.document_id)]
        if isinstance(j, str) and not j.strip().isdigit():
            errors += 1
            out.append(replace(ex, rescaled=None))
            continue
        b = bucket_of(j)
        counts[b] += 1
        out.append(replace(ex, rescaled=b))
    total = counts[RescaleBucket.SLN] + counts[RescaleBucket.HN] + counts[RescaleBucket.FHN] + errors
    return out, RescaleReport(total, counts, errors)


def judgments_from_journal(path: str | Path) -> dict[tuple[str, str], Judgment]:
    """Read a labelling journal into a judgments map (last record per pair wins)."""
    out: dict[tuple[str, str], Judgment] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (str(rec["query_id"]), str(rec["doc_id"]))
            if rec.get("predicted") is not None:
                out[key] = RelevanceGrade.coerce(rec["predicted"])
            else:
                out[key] = str(rec.get("error") or "unknown_error")
    return out
