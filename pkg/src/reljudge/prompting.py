"""Rendering of the four-part relevance grading prompt.

The prompt is split into a system part (role and grading scale) and a user
part holding, in order: optional numbered few-shot examples, the query, the
document to grade and the final instruction.  Every option only *adds* lines,
so the rendering for a configuration with an option switched on contains all
lines of the rendering with that option switched off.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .core import GRADES, Document, IntentDistribution, Query, QueryGroup, RelevanceGrade
from .errors import BalanceError, ConfigurationError

FEW_SHOT_SIZES = (0, 4, 8)
NO_CONTENT = "(no content)"

SYSTEM_PROMPT = """\
You are a search quality rater evaluating the relevance of web pages. Given a query and a web page, you must provide a score on an integer scale of 1 to 4 with the following meanings:
4 = Fully Relevant: the page is dedicated to the query and fully satisfies the need behind it.
3 = Relevant: the page answers the query, but may be incomplete or partly off-topic.
2 = Partly Relevant: the page touches on the subject of the query but does not answer it.
1 = Not Relevant: the page has nothing to do with the query.
In other words, a 4 is a page the user would be fully satisfied to land on, a 3 is a useful page, a 2 is a page that is only loosely related, and a 1 is a page the user would leave immediately.
The score must be an integer between 1 and 4. Never answer with a score lower than 1 or higher than 4."""

INTENT_DEFINITIONS = {
    "navigational": "the user wants to reach a specific website or page",
    "informational": "the user wants to learn something about a topic",
    "transactional": "the user wants to perform an action such as buying or downloading",
}

COT_INSTRUCTION = (
    "Think step by step: first explain what the user is looking for, then how well "
    "the page meets that need, and only then give your grade."
)
FINAL_INSTRUCTION = (
    "Grade the relevance of the page to the query on the scale from 1 to 4. "
    'Answer with the word "Score" followed by the grade, in the format "Score: <value>".'
)


@dataclass(frozen=True)
class PromptConfig:
    use_url: bool = False
    use_intent: bool = False
    use_cot: bool = False
    few_shot: int = 0
    content_truncation: int = 250
    scale_min: int = 1
    scale_max: int = 4

    def __post_init__(self) -> None:
        if self.few_shot not in FEW_SHOT_SIZES:
            raise ConfigurationError(f"few_shot must be one of {FEW_SHOT_SIZES}, got {self.few_shot}")
        if self.content_truncation < 1:
            raise ConfigurationError("content_truncation must be >= 1")

    @property
    def name(self) -> str:
        """Short identifier such as ``u1_i0_cot0_f4``."""
        return f"u{int(self.use_url)}_i{int(self.use_intent)}_cot{int(self.use_cot)}_f{self.few_shot}"

    def as_dict(self) -> dict:
        return {
            "use_url": self.use_url,
            "use_intent": self.use_intent,
            "use_cot": self.use_cot,
            "few_shot": self.few_shot,
            "content_truncation": self.content_truncation,
        }


@dataclass(frozen=True)
class FewShotExample:
    index: int
    query: Query
    document: Document
    gold: RelevanceGrade

    @property
    def query_text(self) -> str:
        return self.query.text


@dataclass(frozen=True)
class RenderedPrompt:
    system_text: str
    user_text: str
    config_echo: PromptConfig

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system_text},
            {"role": "user", "content": self.user_text},
        ]

    def to_text(self) -> str:
        """Stable serialization used by the golden files."""
        return f"[system]\n{self.system_text}\n[user]\n{self.user_text}\n"


def _pct(p: float) -> str:
    return str((Decimal(repr(p)) * 100).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def render_intent_block(intent: IntentDistribution) -> str:
    values = {
        "navigational": intent.navigational,
        "informational": intent.informational,
        "transactional": intent.transactional,
    }
    return "\n".join(f"{name} ({INTENT_DEFINITIONS[name]}): {_pct(values[name])}%" for name in values)


def _truncate(content: str, limit: int) -> str:
    return content[:limit] if content else NO_CONTENT


def _document_lines(query: Query, doc: Document, config: PromptConfig, n: int | None = None) -> list[str]:
    tag = "" if n is None else f" {n}"
    lines = [f"Query{tag}: {query.text}"]
    if config.use_intent:
        if query.intent is None:
            raise ConfigurationError(f"query {query.id!r} has no intent but use_intent is set")
        lines.append(f"Query intent{tag} (estimated probabilities):")
        lines.extend(render_intent_block(query.intent).splitlines())
    if config.use_url:
        lines.append(f"URL{tag}: {doc.url}")
    lines.append(f"Title{tag}: {doc.title}")
    if doc.meta_description:
        lines.append(f"Meta description{tag}: {doc.meta_description}")
    lines.append(f"Content{tag}: {_truncate(doc.content, config.content_truncation)}")
    return lines


def render_prompt(
    query: Query,
    doc: Document,
    config: PromptConfig,
    shots: Sequence[FewShotExample] = (),
) -> RenderedPrompt:
    if len(shots) != config.few_shot:
        raise ConfigurationError(f"config asks for {config.few_shot} examples, got {len(shots)}")
    if config.use_intent and query.intent is None:
        raise ConfigurationError(f"query {query.id!r} has no intent but use_intent is set")

    lines: list[str] = []
    if shots:
        lines.append("Here are some examples of graded pages:")
        for expected, shot in enumerate(shots, start=1):
            if shot.index != expected:
                raise ConfigurationError("few-shot indices must run 1..k")
            lines.append("")
            lines.extend(_document_lines(shot.query, shot.document, config, n=shot.index))
            lines.append(f"Score {shot.index}: {int(shot.gold)}")
        lines.append("")
        lines.append("Now grade the following page.")
        lines.append("")
    lines.extend(_document_lines(query, doc, config))
    lines.append("")
    if config.use_cot:
        lines.append(COT_INSTRUCTION)
    lines.append(FINAL_INSTRUCTION)
    return RenderedPrompt(SYSTEM_PROMPT, "\n".join(lines), config)


def fewshot_pool(groups: Iterable[QueryGroup]) -> list[tuple[Query, Document, RelevanceGrade]]:
    """Gold-labelled (query, document, grade) triples usable as examples."""
    pool = []
    for g in groups:
        for pair, doc in zip(g.pairs, g.documents):
            if pair.gold is not None:
                pool.append((g.query, doc, pair.gold))
    return pool


def select_fewshot(
    pool: Sequence[tuple[Query, Document, int]], k: int, seed: int
) -> list[FewShotExample]:
    """Pick ``k/4`` examples per grade and lay them out in grade cycles 1,2,3,4,1,...

    The seed only decides which examples fill the slots, never their order.
    """
    if k not in (4, 8):
        raise ConfigurationError(f"k must be 4 or 8, got {k}")
    per_class = k // len(GRADES)
    by_grade: dict[int, list] = {g: [] for g in GRADES}
    for query, doc, gold in pool:
        by_grade[int(gold)].append((query, doc))
    rng = random.Random(seed)
    picks = {}
    for g in GRADES:
        if len(by_grade[g]) < per_class:
            raise BalanceError(
                f"grade {g} has {len(by_grade[g])} examples, {per_class} required", deficient_class=g
            )
        picks[g] = rng.sample(by_grade[g], per_class)
    out = []
    for cycle in range(per_class):
        for g in GRADES:
            query, doc = picks[g][cycle]
            out.append(FewShotExample(len(out) + 1, query, doc, RelevanceGrade(g)))
    return out


def option_grid() -> list[PromptConfig]:
    """The full option grid: URL x intent x COT x few-shot {0, 4, 8}."""
    return [
        PromptConfig(use_url=u, use_intent=i, use_cot=c, few_shot=f)
        for u in (False, True)
        for i in (False, True)
        for c in (False, True)
        for f in FEW_SHOT_SIZES
    ]
