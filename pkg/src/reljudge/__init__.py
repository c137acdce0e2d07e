"""LLM relevance judging, agreement metrics and hard-negative rescaling."""

from .core import (
    Document,
    IntentDistribution,
    JudgedPair,
    Query,
    QueryGroup,
    RankingDataset,
    RankingExample,
    RankingTier,
    RelevanceGrade,
    RescaleBucket,
    load_eval_dataset,
    load_ranking_dataset,
)
from .errors import RelJudgeError
from .prompting import PromptConfig, render_prompt

__version__ = "0.1.0"

__all__ = [
    "Document",
    "IntentDistribution",
    "JudgedPair",
    "PromptConfig",
    "Query",
    "QueryGroup",
    "RankingDataset",
    "RankingExample",
    "RankingTier",
    "RelJudgeError",
    "RelevanceGrade",
    "RescaleBucket",
    "load_eval_dataset",
    "load_ranking_dataset",
    "render_prompt",
]
