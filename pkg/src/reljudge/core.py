"""Domain types, dataset ingestion and fine-tuning corpus export."""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import (
    BalanceError,
    DatasetError,
    DomainError,
    DuplicateError,
    EmptyDatasetError,
)

GRADES = (1, 2, 3, 4)


class RelevanceGrade(IntEnum):
    NOT_RELEVANT = 1
    PARTLY_RELEVANT = 2
    RELEVANT = 3
    FULLY_RELEVANT = 4

    @classmethod
    def coerce(cls, value) -> "RelevanceGrade":
        """Convert ints (or integral strings) to a grade, rejecting anything else."""
        if isinstance(value, bool):
            raise DomainError(f"relevance grade must be an integer, got {value!r}")
        if isinstance(value, str):
            value = value.strip()
            if not value.lstrip("+-").isdigit():
                raise DomainError(f"relevance grade must be an integer, got {value!r}")
            value = int(value)
        if isinstance(value, float):
            if not value.is_integer():
                raise DomainError(f"relevance grade must be an integer, got {value!r}")
            value = int(value)
        if not isinstance(value, int):
            raise DomainError(f"relevance grade must be an integer, got {value!r}")
        if value not in GRADES:
            raise DomainError(f"relevance grade {value} outside 1-4")
        return cls(value)

    @property
    def label(self) -> str:
        return self.name.replace("_", " ").title()


@dataclass(frozen=True)
class IntentDistribution:
    navigational: float
    informational: float
    transactional: float

    def __post_init__(self) -> None:
        parts = (self.navigational, self.informational, self.transactional)
        for p in parts:
            if not 0.0 <= p <= 1.0:
                raise DomainError(f"intent probability {p} outside [0, 1]")
        if abs(sum(parts) - 1.0) > 1e-6:
            raise DomainError(f"intent probabilities sum to {sum(parts)}, expected 1")

    def as_dict(self) -> dict[str, float]:
        return {"nav": self.navigational, "info": self.informational, "trans": self.transactional}

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "IntentDistribution":
        try:
            return cls(float(d["nav"]), float(d["info"]), float(d["trans"]))
        except KeyError as exc:
            raise DomainError(f"intent is missing key {exc}") from None


@dataclass(frozen=True)
class Document:
    id: str
    url: str = ""
    title: str = ""
    content: str = ""
    meta_description: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise DomainError("document id must be non-empty")


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    intent: IntentDistribution | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise DomainError(f"query {self.id!r} has empty text")


@dataclass(frozen=True)
class JudgedPair:
    query_id: str
    document_id: str
    gold: RelevanceGrade | None = None
    predicted: RelevanceGrade | None = None
    raw_output: str | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.predicted is not None and self.error is not None:
            raise ValueError("a pair cannot carry both a prediction and an error")

    @property
    def comparable(self) -> bool:
        return self.gold is not None and self.predicted is not None


@dataclass(frozen=True)
class QueryGroup:
    """One SERP: a query, its judged pairs and the matching documents."""

    query: Query
    pairs: tuple[JudgedPair, ...]
    documents: tuple[Document, ...] = ()

    def __post_init__(self) -> None:
        seen = set()
        for p in self.pairs:
            if p.query_id != self.query.id:
                raise ValueError(f"pair for query {p.query_id!r} placed in group {self.query.id!r}")
            if p.document_id in seen:
                raise DuplicateError(f"duplicate document {p.document_id!r} in query {self.query.id!r}")
            seen.add(p.document_id)
        if self.documents and [d.id for d in self.documents] != [p.document_id for p in self.pairs]:
            raise ValueError("documents must align with pairs")

    def document(self, doc_id: str) -> Document:
        for d in self.documents:
            if d.id == doc_id:
                return d
        raise KeyError(doc_id)

    def with_pairs(self, pairs: Iterable[JudgedPair]) -> "QueryGroup":
        return QueryGroup(self.query, tuple(pairs), self.documents)


class RankingTier(IntEnum):
    SOFT_NEG = 0
    HARD_NEG = 1
    POS1 = 2
    POS2 = 3
    POS3 = 4

    @property
    def token(self) -> str:
        return _TIER_TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "RankingTier":
        try:
            return _TOKEN_TIERS[token]
        except (KeyError, TypeError):
            raise DomainError(f"unknown tier token {token!r}") from None


_TIER_TOKENS = {
    RankingTier.SOFT_NEG: "soft_neg",
    RankingTier.HARD_NEG: "hard_neg",
    RankingTier.POS1: "pos1",
    RankingTier.POS2: "pos2",
    RankingTier.POS3: "pos3",
}
_TOKEN_TIERS = {v: k for k, v in _TIER_TOKENS.items()}


class RescaleBucket(str, Enum):
    SLN = "SLN"
    HN = "HN"
    FHN = "FHN"


@dataclass(frozen=True)
class RankingExample:
    query_id: str
    document_id: str
    title: str
    content: str
    tier: RankingTier
    rescaled: RescaleBucket | None = None

    def __post_init__(self) -> None:
        if self.rescaled is not None and self.tier != RankingTier.HARD_NEG:
            raise DomainError(
                f"{self.query_id}/{self.document_id}: only hard negatives can be rescaled"
            )


@dataclass
class RankingDataset:
    """Ranking examples grouped by query, in file order.

    ``split`` comes from the optional per-record ``split`` field; a value of
    ``"validation"`` marks data whose labels must never be rescaled.
    """

    groups: dict[str, list[RankingExample]]
    split: str | None = None

    def __iter__(self) -> Iterator[RankingExample]:
        for examples in self.groups.values():
            yield from examples

    def __len__(self) -> int:
        return sum(len(v) for v in self.groups.values())

    @property
    def is_validation(self) -> bool:
        return self.split == "validation"

    def hard_negative_fraction(self) -> float:
        n = len(self)
        if n == 0:
            raise EmptyDatasetError("ranking dataset is empty")
        return sum(ex.tier == RankingTier.HARD_NEG for ex in self) / n

    def tier_counts(self) -> dict[RankingTier, int]:
        counts = Counter(ex.tier for ex in self)
        return {t: counts.get(t, 0) for t in RankingTier}


@dataclass(frozen=True)
class DatasetStats:
    query_count: int
    pair_count: int
    per_class_counts: dict[int, int]
    avg_docs_per_query: float
    percentages: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "query_count": self.query_count,
            "pair_count": self.pair_count,
            "per_class_counts": {str(k): v for k, v in self.per_class_counts.items()},
            "percentages": {str(k): round(v, 4) for k, v in self.percentages.items()},
            "avg_docs_per_query": self.avg_docs_per_query,
        }

    def table(self) -> str:
        head = f"{'Class':<16}" + "".join(f"{g:>9}" for g in GRADES)
        freq = f"{'Frequency (%)':<16}" + "".join(f"{self.percentages[g]:>9.2f}" for g in GRADES)
        cnt = f"{'Count':<16}" + "".join(f"{self.per_class_counts[g]:>9}" for g in GRADES)
        tail = f"{self.query_count} queries, {self.pair_count} pairs, {self.avg_docs_per_query:.3f} docs/query"
        return "\n".join([head, freq, cnt, tail])


# ---------------------------------------------------------------- evaluation data

_EVAL_REQUIRED = ("query_id", "query_text", "doc_id", "gold")


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed JSON ({exc.msg})", line=lineno, path=str(path)) from None
            if not isinstance(rec, dict):
                raise DatasetError("record is not an object", line=lineno, path=str(path))
            yield lineno, rec


def load_eval_dataset(path: str | Path) -> list[QueryGroup]:
    """Read an evaluation JSONL file into query groups.

    Groups appear in order of first occurrence; documents keep file order.
    """
    path = Path(path)
    queries: dict[str, Query] = {}
    pairs: dict[str, list[JudgedPair]] = {}
    docs: dict[str, list[Document]] = {}
    seen: set[tuple[str, str]] = set()

    for lineno, rec in _read_jsonl(path):
        missing = [k for k in _EVAL_REQUIRED if k not in rec]
        if missing:
            raise DatasetError(f"missing field(s) {', '.join(missing)}", line=lineno, path=str(path))
        qid, did = str(rec["query_id"]), str(rec["doc_id"])
        try:
            gold = RelevanceGrade.coerce(rec["gold"])
            intent = IntentDistribution.from_dict(rec["intent"]) if rec.get("intent") else None
            query = Query(qid, str(rec["query_text"]), intent)
            doc = Document(
                did,
                url=str(rec.get("url") or ""),
                title=str(rec.get("title") or ""),
                content=str(rec.get("content") or ""),
                meta_description=rec.get("meta_description") or None,
            )
        except DomainError as exc:
            raise DomainError(str(exc), line=lineno, path=str(path)) from None
        if (qid, did) in seen:
            raise DuplicateError(f"duplicate pair ({qid}, {did})", line=lineno, path=str(path))
        seen.add((qid, did))
        if qid in queries and queries[qid] != query:
            raise DatasetError(f"query {qid!r} redefined with different text/intent", line=lineno, path=str(path))
        queries.setdefault(qid, query)
        pairs.setdefault(qid, []).append(JudgedPair(qid, did, gold=gold))
        docs.setdefault(qid, []).append(doc)

    return [QueryGroup(queries[q], tuple(pairs[q]), tuple(docs[q])) for q in queries]


def eval_records(groups: Iterable[QueryGroup]) -> Iterator[dict]:
    for g in groups:
        for pair, doc in zip(g.pairs, g.documents):
            rec = {
                "query_id": g.query.id,
                "query_text": g.query.text,
                "doc_id": doc.id,
                "url": doc.url,
                "title": doc.title,
                "content": doc.content,
                "gold": int(pair.gold) if pair.gold is not None else None,
            }
            if g.query.intent is not None:
                rec["intent"] = g.query.intent.as_dict()
            if doc.meta_description is not None:
                rec["meta_description"] = doc.meta_description
            yield rec


def dump_eval_dataset(groups: Iterable[QueryGroup], path: str | Path) -> None:
    _write_jsonl(path, eval_records(groups))


def _write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def validate_dataset(groups: list[QueryGroup]) -> DatasetStats:
    counts = Counter()
    n_pairs = 0
    for g in groups:
        for p in g.pairs:
            if p.gold is None:
                continue
            counts[int(p.gold)] += 1
            n_pairs += 1
    if not groups or n_pairs == 0:
        raise EmptyDatasetError("dataset has no gold-labelled pairs")
    per_class = {g: counts.get(g, 0) for g in GRADES}
    pct = {g: 100.0 * c / n_pairs for g, c in per_class.items()}
    return DatasetStats(
        query_count=len(groups),
        pair_count=n_pairs,
        per_class_counts=per_class,
        avg_docs_per_query=n_pairs / len(groups),
        percentages=pct,
    )


# ---------------------------------------------------------------- fine-tuning corpus


def balanced_allocation(total: int) -> dict[int, int]:
    """Split ``total`` over the four grades, remainder going to the lowest grades."""
    base, rem = divmod(total, len(GRADES))
    return {g: base + (1 if i < rem else 0) for i, g in enumerate(GRADES)}


def export_finetune_corpus(
    groups: list[QueryGroup],
    train_size: int,
    val_size: int,
    seed: int,
    out_dir: str | Path,
    config=None,
) -> tuple[Path, Path]:
    """Write class-balanced ``train.jsonl`` / ``validation.jsonl`` chat corpora.

    The first line of each file is a ``{"_meta": ...}`` header recording the
    per-grade allocation and the seed; every following line is a
    ``{system, user, assistant}`` record with assistant ``"Score: g"``.
    """
    from .prompting import PromptConfig, render_prompt

    if config is None:
        config = PromptConfig(use_url=True, use_intent=True)
    if train_size < 0 or val_size < 0:
        raise ValueError("split sizes must be non-negative")

    by_grade: dict[int, list[tuple[Query, Document, int]]] = {g: [] for g in GRADES}
    for grp in groups:
        for pair, doc in zip(grp.pairs, grp.documents):
            if pair.gold is not None:
                by_grade[int(pair.gold)].append((grp.query, doc, int(pair.gold)))

    train_alloc = balanced_allocation(train_size)
    val_alloc = balanced_allocation(val_size)
    for g in GRADES:
        need = train_alloc[g] + val_alloc[g]
        if len(by_grade[g]) < need:
            raise BalanceError(
                f"grade {g} has {len(by_grade[g])} pairs, {need} required", deficient_class=g
            )

    rng = random.Random(seed)
    train, val = [], []
    for g in GRADES:
        chosen = rng.sample(by_grade[g], train_alloc[g] + val_alloc[g])
        train.extend(chosen[: train_alloc[g]])
        val.extend(chosen[train_alloc[g]:])
    rng.shuffle(train)
    rng.shuffle(val)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, rows, alloc in (("train", train, train_alloc), ("validation", val, val_alloc)):
        meta = {"_meta": {"split": name, "seed": seed, "allocation": {str(g): n for g, n in alloc.items()}}}
        records = [meta]
        for query, doc, gold in rows:
            prompt = render_prompt(query, doc, config)
            records.append({"system": prompt.system_text, "user": prompt.user_text, "assistant": f"Score: {gold}"})
        p = out_dir / f"{name}.jsonl"
        _write_jsonl(p, records)
        paths.append(p)
    return paths[0], paths[1]


def read_corpus(path: str | Path) -> tuple[dict, list[dict]]:
    """Return (header, records) of an exported corpus file."""
    header: dict = {}
    rows = []
    for _, rec in _read_jsonl(Path(path)):
        if "_meta" in rec:
            header = rec["_meta"]
        else:
            rows.append(rec)
    return header, rows


# ---------------------------------------------------------------- ranking data


def load_ranking_dataset(path: str | Path) -> RankingDataset:
    path = Path(path)
    groups: dict[str, list[RankingExample]] = {}
    seen: set[tuple[str, str]] = set()
    splits = set()
    for lineno, rec in _read_jsonl(path):
        for k in ("query_id", "doc_id", "tier"):
            if k not in rec:
                raise DatasetError(f"missing field {k}", line=lineno, path=str(path))
        qid, did = str(rec["query_id"]), str(rec["doc_id"])
        try:
            tier = RankingTier.from_token(rec["tier"])
            bucket = rec.get("rescaled_bucket")
            rescaled = RescaleBucket(bucket) if bucket else None
            ex = RankingExample(qid, did, str(rec.get("title") or ""), str(rec.get("content") or ""), tier, rescaled)
        except ValueError as exc:
            raise DomainError(str(exc), line=lineno, path=str(path)) from None
        if (qid, did) in seen:
            raise DuplicateError(f"duplicate pair ({qid}, {did})", line=lineno, path=str(path))
        seen.add((qid, did))
        if rec.get("split"):
            splits.add(str(rec["split"]))
        groups.setdefault(qid, []).append(ex)
    if not groups:
        raise EmptyDatasetError(f"{path}: ranking dataset is empty")
    if len(splits) > 1:
        raise DatasetError(f"mixed split markers {sorted(splits)}", path=str(path))
    return RankingDataset(groups, splits.pop() if splits else None)


def ranking_records(dataset: RankingDataset) -> Iterator[dict]:
    for ex in dataset:
        rec = {
            "query_id": ex.query_id,
            "doc_id": ex.document_id,
            "title": ex.title,
            "content": ex.content,
            "tier": ex.tier.token,
        }
        if ex.rescaled is not None:
            rec["rescaled_bucket"] = ex.rescaled.value
        if dataset.split:
            rec["split"] = dataset.split
        yield rec


def dump_ranking_dataset(dataset: RankingDataset, path: str | Path) -> None:
    _write_jsonl(path, ranking_records(dataset))
