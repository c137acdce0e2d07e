"""Desk-scale simulation of training a ranker on rescaled hard negatives.

Every query has a latent unit vector ``q``.  A document is described by two
signals along ``q``: a *relevance* strength (what the ranker should learn)
and a *topical* strength (surface similarity, which mined hard negatives have
plenty of).  Observed features are both signals plus isotropic noise, mixed
by a fixed random rotation::

    x = R @ [rel * q + noise ; top * q + noise]

A planted share of the mined hard negatives are really relevant (drawn
exactly like a Pos1 document): these are the false hard negatives the
rescaling is meant to recover.

The ranker is a linear map ``W`` from features to the latent space, scored
as ``q[:d] . (W x)[:d]`` for every prefix size ``d`` in ``eval_dims``.  It is
trained with a listwise softmax cross-entropy against targets proportional to
per-document gains, summed over all prefix sizes.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import RankingDataset, RankingExample, RankingTier, RescaleBucket
from .errors import ConfigurationError, DivergenceError
from .rank_eval import RankedList, RankEvalReport, evaluate_run, rank_eval_table
from .rescaler import bucket_of, rescale_dataset, rescaled_gain

TIER_ORDER = ("soft_neg", "hard_neg", "pos1", "pos2", "pos3")

# Rows: grade the oracle would give (1..4); columns: grade emitted (1..4).
FT_LIKE_CONFUSION = (
    (0.98, 0.01, 0.008, 0.002),
    (0.12, 0.72, 0.12, 0.04),
    (0.04, 0.04, 0.72, 0.20),
    (0.02, 0.02, 0.26, 0.70),
)
# Over-flags true hard negatives and misses most false ones.
VANILLA_LIKE_CONFUSION = (
    (0.92, 0.075, 0.005, 0.0),
    (0.55, 0.10, 0.30, 0.05),
    (0.40, 0.05, 0.45, 0.10),
    (0.30, 0.05, 0.45, 0.20),
)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 150
    learning_rate: float = 15.0
    seed: int = 0


@dataclass(frozen=True)
class SimConfig:
    n_train_queries: int = 1500
    n_val_queries: int = 300
    docs_per_tier: Mapping[str, int] = field(
        default_factory=lambda: {"soft_neg": 2, "hard_neg": 14, "pos1": 1, "pos2": 1, "pos3": 1}
    )
    embedding_dim: int = 64
    eval_dims: tuple[int, ...] = (64, 32, 16)
    fhn_rate: float = 0.10
    hn_true_rate: float = 0.05
    # validation hard negatives are clean unless asked otherwise
    val_fhn_rate: float = 0.0
    fhn_grade4_fraction: float = 0.3
    judge_confusion: tuple[tuple[float, ...], ...] = FT_LIKE_CONFUSION
    # relevance strength per planted kind
    relevance: Mapping[str, float] = field(
        default_factory=lambda: {"soft_neg": 0.0, "sln": 0.1, "hn": 0.4, "pos1": 0.6, "pos2": 0.75, "pos3": 0.9}
    )
    relevance_jitter: float = 0.05
    # topical strength: soft negatives, mined hard negatives, positives
    topical: Mapping[str, float] = field(default_factory=lambda: {"soft_neg": 0.1, "hard_neg": 1.5, "pos": 0.0})
    topical_jitter: float = 0.8
    feature_noise: float = 2.0
    seed: int = 0
    training: TrainingConfig = field(default_factory=TrainingConfig)
    bootstrap_iterations: int = 1000

    def __post_init__(self) -> None:
        if not 0 <= self.fhn_rate <= 1 or not 0 <= self.hn_true_rate <= 1:
            raise ConfigurationError("planting rates must lie in [0, 1]")
        if self.fhn_rate + self.hn_true_rate > 1:
            raise ConfigurationError("fhn_rate + hn_true_rate must not exceed 1")
        if not 0 <= self.val_fhn_rate + self.hn_true_rate <= 1:
            raise ConfigurationError("val_fhn_rate + hn_true_rate must not exceed 1")
        if not 0 <= self.fhn_grade4_fraction <= 1:
            raise ConfigurationError("fhn_grade4_fraction must lie in [0, 1]")
        m = np.asarray(self.judge_confusion, dtype=float)
        if m.shape != (4, 4) or (m < 0).any() or np.abs(m.sum(axis=1) - 1).max() > 1e-9:
            raise ConfigurationError("judge_confusion must be a 4x4 row-stochastic matrix")
        if any(d < 1 or d > self.embedding_dim for d in self.eval_dims):
            raise ConfigurationError("eval_dims must lie in [1, embedding_dim]")
        if set(self.docs_per_tier) != set(TIER_ORDER):
            raise ConfigurationError(f"docs_per_tier needs exactly the keys {TIER_ORDER}")
        if self.training.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")

    def with_overrides(self, **kw) -> "SimConfig":
        train_kw = {k: kw.pop(k) for k in ("epochs", "learning_rate") if k in kw and kw[k] is not None}
        if "training_seed" in kw:
            train_kw["seed"] = kw.pop("training_seed")
        cfg = replace(self, **{k: v for k, v in kw.items() if v is not None})
        if train_kw:
            cfg = replace(cfg, training=replace(cfg.training, **train_kw))
        return cfg

    def as_dict(self) -> dict:
        d = asdict(self)
        d["docs_per_tier"] = dict(self.docs_per_tier)
        d["relevance"] = dict(self.relevance)
        d["topical"] = dict(self.topical)
        d["eval_dims"] = list(self.eval_dims)
        d["judge_confusion"] = [list(r) for r in self.judge_confusion]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown SimConfig keys: {sorted(unknown)}")
        kw = dict(d)
        if "training" in kw and not isinstance(kw["training"], TrainingConfig):
            kw["training"] = TrainingConfig(**kw["training"])
        if "eval_dims" in kw:
            kw["eval_dims"] = tuple(kw["eval_dims"])
        if "judge_confusion" in kw:
            kw["judge_confusion"] = tuple(tuple(float(x) for x in r) for r in kw["judge_confusion"])
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _seed(base: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, zlib.crc32(name.encode())])


# ---------------------------------------------------------------- data


@dataclass
class SimSplit:
    name: str
    query_ids: list[str]
    doc_ids: list[list[str]]
    latent: np.ndarray  # (n_queries, dim)
    features: np.ndarray  # (n_queries, n_docs, 2 * dim)
    tiers: np.ndarray  # (n_docs,) RankingTier codes, same layout for every query
    dataset: RankingDataset

    @property
    def n_queries(self) -> int:
        return len(self.query_ids)

    def examples_matrix(self, fn: Callable[[RankingExample], float], dataset: RankingDataset | None = None) -> np.ndarray:
        ds = dataset or self.dataset
        return np.array([[fn(ex) for ex in ds.groups[q]] for q in self.query_ids], dtype=np.float64)


@dataclass
class SyntheticData:
    train: SimSplit
    val: SimSplit
    truth: dict[tuple[str, str], RescaleBucket]
    config: SimConfig

    def planted_counts(self) -> dict[RescaleBucket, int]:
        out = {b: 0 for b in RescaleBucket}
        for b in self.truth.values():
            out[b] += 1
        return out


def _tier_layout(cfg: SimConfig) -> np.ndarray:
    codes = []
    for tok in TIER_ORDER:
        codes += [int(RankingTier.from_token(tok))] * int(cfg.docs_per_tier[tok])
    return np.array(codes, dtype=np.int64)


def _make_split(
    name: str, n: int, fhn_rate: float, cfg: SimConfig, rotation: np.ndarray, rng: np.random.Generator
) -> tuple[SimSplit, dict[tuple[str, str], RescaleBucket]]:
    dim = cfg.embedding_dim
    tiers = _tier_layout(cfg)
    nd = len(tiers)
    q = rng.standard_normal((n, dim))
    q /= np.linalg.norm(q, axis=1, keepdims=True)

    rel = np.zeros((n, nd))
    top = np.zeros((n, nd))
    pos_rel = {RankingTier.POS1: "pos1", RankingTier.POS2: "pos2", RankingTier.POS3: "pos3"}
    hard = tiers == RankingTier.HARD_NEG
    # planted kind of every hard negative: 0 = SLN, 1 = true HN, 2 = FHN
    u = rng.random((n, int(hard.sum())))
    kind = np.where(u < fhn_rate, 2, np.where(u < fhn_rate + cfg.hn_true_rate, 1, 0))

    for j, t in enumerate(tiers):
        t = RankingTier(int(t))
        if t == RankingTier.SOFT_NEG:
            rel[:, j] = cfg.relevance["soft_neg"]
            top[:, j] = cfg.topical["soft_neg"]
        elif t in pos_rel:
            rel[:, j] = cfg.relevance[pos_rel[t]]
            top[:, j] = cfg.topical["pos"]
    hard_idx = np.flatnonzero(hard)
    rel_by_kind = np.array([cfg.relevance["sln"], cfg.relevance["hn"], cfg.relevance["pos1"]])
    top_by_kind = np.array([cfg.topical["hard_neg"], cfg.topical["hard_neg"], cfg.topical["pos"]])
    rel[:, hard_idx] = rel_by_kind[kind]
    top[:, hard_idx] = top_by_kind[kind]
    rel += cfg.relevance_jitter * rng.standard_normal((n, nd))
    top += cfg.topical_jitter * rng.standard_normal((n, nd))

    scale = cfg.feature_noise / np.sqrt(dim)
    raw = np.concatenate(
        [
            rel[..., None] * q[:, None, :] + scale * rng.standard_normal((n, nd, dim)),
            top[..., None] * q[:, None, :] + scale * rng.standard_normal((n, nd, dim)),
        ],
        axis=-1,
    )
    features = raw @ rotation.T

    qids = [f"{name}-q{i:05d}" for i in range(n)]
    dids = [[f"{qid}-d{j:03d}" for j in range(nd)] for qid in qids]
    groups: dict[str, list[RankingExample]] = {}
    truth: dict[tuple[str, str], RescaleBucket] = {}
    buckets = (RescaleBucket.SLN, RescaleBucket.HN, RescaleBucket.FHN)
    for i, qid in enumerate(qids):
        groups[qid] = [
            RankingExample(qid, dids[i][j], title="", content="", tier=RankingTier(int(tiers[j])))
            for j in range(nd)
        ]
        for h, j in enumerate(hard_idx):
            truth[(qid, dids[i][j])] = buckets[kind[i, h]]
    split = "validation" if name == "val" else "train"
    return SimSplit(name, qids, dids, q, features, tiers, RankingDataset(groups, split)), truth


def generate_synthetic(config: SimConfig) -> SyntheticData:
    """Planted train/validation splits; a pure function of ``config``."""
    rng = np.random.default_rng(_seed(config.seed, "data"))
    f = 2 * config.embedding_dim
    rotation, _ = np.linalg.qr(rng.standard_normal((f, f)))
    train, truth = _make_split("train", config.n_train_queries, config.fhn_rate, config, rotation, rng)
    val, _ = _make_split("val", config.n_val_queries, config.val_fhn_rate, config, rotation, rng)
    return SyntheticData(train, val, truth, config)


# ---------------------------------------------------------------- judges


@dataclass(frozen=True)
class SimulatedJudge:
    """``mode`` is "oracle" or "confused"; confused judges resample the oracle
    grade through a row-stochastic ``confusion`` matrix."""

    mode: str = "oracle"
    confusion: tuple[tuple[float, ...], ...] | None = None
    name: str = "oracle"

    @classmethod
    def oracle(cls) -> "SimulatedJudge":
        return cls("oracle", None, "oracle")

    @classmethod
    def confused(cls, matrix, name: str = "confused") -> "SimulatedJudge":
        return cls("confused", tuple(tuple(float(x) for x in r) for r in matrix), name)

    @classmethod
    def ft_like(cls) -> "SimulatedJudge":
        return cls.confused(FT_LIKE_CONFUSION, "ft_like")

    @classmethod
    def vanilla_like(cls) -> "SimulatedJudge":
        return cls.confused(VANILLA_LIKE_CONFUSION, "vanilla_like")


def simulate_judgments(data: SyntheticData, judge: SimulatedJudge, seed: int = 0) -> dict[tuple[str, str], int]:
    """Grades for every training hard negative.

    The oracle gives 1/2/3 to planted SLN/HN/FHN, and 4 instead of 3 for a
    ``fhn_grade4_fraction`` share of the FHN.  A confused judge then samples
    its grade from the confusion row of the oracle grade.
    """
    base = {RescaleBucket.SLN: 1, RescaleBucket.HN: 2, RescaleBucket.FHN: 3}
    keys = list(data.truth)
    oracle_rng = np.random.default_rng(_seed(seed, "oracle-grade4"))
    u4 = oracle_rng.random(len(keys))
    grades = np.array([base[data.truth[k]] for k in keys])
    grades = np.where((grades == 3) & (u4 < data.config.fhn_grade4_fraction), 4, grades)
    if judge.mode == "confused":
        m = np.asarray(judge.confusion, dtype=float)
        cum = np.cumsum(m, axis=1)
        cum[:, -1] = 1.0
        u = np.random.default_rng(_seed(seed, f"judge-{judge.name}")).random(len(keys))
        grades = np.array([int(np.searchsorted(cum[g - 1], x, side="right")) + 1 for g, x in zip(grades, u)])
    elif judge.mode != "oracle":
        raise ConfigurationError(f"unknown judge mode {judge.mode!r}")
    return {k: int(g) for k, g in zip(keys, grades)}


# ---------------------------------------------------------------- training


@dataclass
class Scorer:
    weights: np.ndarray  # (dim, 2 * dim)
    eval_dims: tuple[int, ...]
    loss_history: list[float] = field(default_factory=list)

    def scores(self, split: SimSplit, dim: int | None = None) -> np.ndarray:
        d = dim or self.weights.shape[0]
        n, nd, f = split.features.shape
        z = (split.features.reshape(-1, f) @ self.weights[:d].T).reshape(n, nd, d)
        return np.einsum("qnd,qd->qn", z, split.latent[:, :d])

    def ranked_lists(self, split: SimSplit, dim: int, gains: np.ndarray) -> list[RankedList]:
        s = self.scores(split, dim)
        return [
            RankedList.from_scores(qid, split.doc_ids[i], s[i].tolist(), gains[i].astype(int).tolist())
            for i, qid in enumerate(split.query_ids)
        ]


def _targets(gains: np.ndarray) -> np.ndarray:
    tot = gains.sum(axis=1, keepdims=True)
    if (tot <= 0).any():
        raise ConfigurationError("every query needs a positive total gain")
    return gains / tot


def matryoshka_loss(
    weights: np.ndarray, latent: np.ndarray, features: np.ndarray, targets: np.ndarray, dims: Sequence[int]
) -> tuple[float, np.ndarray]:
    """Summed listwise softmax cross-entropy over prefix sizes, and its gradient."""
    n, nd, f = features.shape
    dmax = max(dims)
    z = (features.reshape(-1, f) @ weights[:dmax].T).reshape(n, nd, dmax)
    qz = z * latent[:, None, :dmax]
    cum = np.cumsum(qz, axis=2)
    loss = 0.0
    grad = np.zeros_like(weights)
    for d in dims:
        s = cum[:, :, d - 1]
        s = s - s.max(axis=1, keepdims=True)
        logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
        loss -= float(np.sum(targets * logp)) / n
        a = np.exp(logp) - targets  # dL/ds per query, before the 1/n
        r = (a[:, None, :] @ features)[:, 0, :]
        grad[:d] += latent[:, :d].T @ r / n
    return loss, grad


def train_scorer(
    train: SimSplit,
    gains: Callable[[RankingExample], float] | np.ndarray,
    config: SimConfig,
    dataset: RankingDataset | None = None,
) -> Scorer:
    """Full-batch gradient descent from ``W = 0``.

    ``gains`` is either a per-example function (evaluated on ``dataset``,
    default the split's own examples) or a precomputed (queries x docs) array.
    """
    g = gains if isinstance(gains, np.ndarray) else train.examples_matrix(gains, dataset)
    targets = _targets(np.asarray(g, dtype=np.float64))
    dim = config.embedding_dim
    w = np.zeros((dim, 2 * dim))
    history = []
    lr = config.training.learning_rate
    for epoch in range(config.training.epochs):
        loss, grad = matryoshka_loss(w, train.latent, train.features, targets, config.eval_dims)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(epoch, loss)
        history.append(loss)
        w = w - lr * grad
    if config.training.epochs:
        loss, _ = matryoshka_loss(w, train.latent, train.features, targets, config.eval_dims)
        if not np.isfinite(loss):
            raise DivergenceError(config.training.epochs, loss)
        history.append(loss)
    return Scorer(w, tuple(config.eval_dims), history)


# ---------------------------------------------------------------- comparison

CONDITIONS = ("none", "oracle", "ft_like", "vanilla_like")
_JUDGES = {
    "oracle": SimulatedJudge.oracle,
    "ft_like": SimulatedJudge.ft_like,
    "vanilla_like": SimulatedJudge.vanilla_like,
}


@dataclass
class ComparisonReport:
    config: SimConfig
    results: dict[str, dict[int, RankEvalReport]]
    bucket_pct: dict[str, dict[str, float]]
    final_loss: dict[str, float]
    loss_history: dict[str, list[float]] = field(repr=False, default_factory=dict)

    def metric(self, condition: str, dim: int, name: str):
        return self.results[condition][dim][name]

    def separated(self, better: str, worse: str, dim: int, name: str) -> bool:
        """True when ``better`` beats ``worse`` with non-overlapping intervals."""
        a = self.metric(better, dim, name)
        b = self.metric(worse, dim, name)
        return a.ci_low > b.ci_high

    def all_overlap(self, dim: int, names: Sequence[str] = ("ndcg@5", "mrr")) -> bool:
        conds = list(self.results)
        for n in names:
            for i, a in enumerate(conds):
                for b in conds[i + 1:]:
                    if not self.metric(a, dim, n).overlaps(self.metric(b, dim, n)):
                        return False
        return True

    def as_dict(self) -> dict:
        return {
            "config": self.config.as_dict(),
            "results": {c: {str(d): r.as_dict() for d, r in by_dim.items()} for c, by_dim in self.results.items()},
            "bucket_pct": self.bucket_pct,
            "final_loss": self.final_loss,
            "loss_history": self.loss_history,
        }

    def table(self) -> str:
        rows = [
            (str(d), cond, self.results[cond][d])
            for d in self.config.eval_dims
            for cond in self.results
        ]
        lines = [rank_eval_table(rows), "", "Hard-negative buckets assigned by each judge (% of judged):"]
        lines.append(f"{'':<14}{'SLN':>8}{'HN':>8}{'FHN':>8}")
        for cond, pct in self.bucket_pct.items():
            lines.append(f"{cond:<14}{pct['SLN']:>7.1f}%{pct['HN']:>7.1f}%{pct['FHN']:>7.1f}%")
        top = max(self.config.eval_dims)
        verdict = "separated" if self.separated("oracle", "none", top, "mrr") and self.separated(
            "oracle", "none", top, "ndcg@5") else "overlapping"
        lines.append("")
        lines.append(f"oracle vs none at dim {top} (MRR and NDCG@5 intervals): {verdict}")
        return "\n".join(lines)


def _linear_gain(ex: RankingExample) -> float:
    return float(rescaled_gain(ex))


def run_comparison(config: SimConfig, conditions: Sequence[str] = CONDITIONS) -> ComparisonReport:
    """Train one ranker per rescaling condition on identical data; evaluate all
    on the original validation labels at every prefix size."""
    data = generate_synthetic(config)
    val_gains = data.val.examples_matrix(lambda ex: float(rescaled_gain(ex)))
    results: dict[str, dict[int, RankEvalReport]] = {}
    bucket_pct: dict[str, dict[str, float]] = {}
    final_loss: dict[str, float] = {}
    history: dict[str, list[float]] = {}
    for cond in conditions:
        if cond == "none":
            train_ds = data.train.dataset
        else:
            judge = _JUDGES[cond]()
            judgments = simulate_judgments(data, judge, seed=config.seed)
            rescaled, rep = rescale_dataset(data.train.dataset, judgments)
            grouped: dict[str, list[RankingExample]] = {}
            for ex in rescaled:
                grouped.setdefault(ex.query_id, []).append(ex)
            train_ds = RankingDataset(grouped, "train")
            bucket_pct[cond] = {"SLN": rep.pct_sln, "HN": rep.pct_hn, "FHN": rep.pct_fhn}
        scorer = train_scorer(data.train, _linear_gain, config, dataset=train_ds)
        final_loss[cond] = scorer.loss_history[-1] if scorer.loss_history else float("nan")
        history[cond] = scorer.loss_history
        results[cond] = {}
        for d in config.eval_dims:
            lists = scorer.ranked_lists(data.val, d, val_gains)
            results[cond][d] = evaluate_run(
                lists, iterations=config.bootstrap_iterations, seed=config.seed
            )
    return ComparisonReport(config, results, bucket_pct, final_loss, history)


def planted_bucket_grades(data: SyntheticData) -> dict[tuple[str, str], int]:
    """Oracle-equivalent grade per planted hard negative (FHN as 3)."""
    return {k: {RescaleBucket.SLN: 1, RescaleBucket.HN: 2, RescaleBucket.FHN: 3}[b] for k, b in data.truth.items()}


__all__ = [
    "SimConfig",
    "TrainingConfig",
    "SimulatedJudge",
    "SyntheticData",
    "SimSplit",
    "Scorer",
    "ComparisonReport",
    "generate_synthetic",
    "simulate_judgments",
    "train_scorer",
    "matryoshka_loss",
    "run_comparison",
    "bucket_of",
    "FT_LIKE_CONFUSION",
    "VANILLA_LIKE_CONFUSION",
]
