"""Acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL`` line; run with ``-s``
to see them.
"""

import contextlib
import json
import random
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import make_groups
from test_prompting import CONTENT, GOLDEN_DIR, SAMPLE_DOC, SAMPLE_QUERY, render_sample
from reljudge.agreement import binary_mae, cohens_kappa, kendall_tau, mean_tau
from reljudge.core import (
    GRADES,
    Document,
    JudgedPair,
    Query,
    QueryGroup,
    RankingExample,
    RankingTier,
    RescaleBucket,
    export_finetune_corpus,
    read_corpus,
    validate_dataset,
)
from reljudge.errors import OutOfRange, ParseFailure
from reljudge.judge import BackendConfig, StubBackend, bench_throughput, parse_score
from reljudge.noise_sim import SimConfig, run_comparison
from reljudge.prompting import PromptConfig, fewshot_pool, option_grid, render_prompt, select_fewshot
from reljudge.rank_eval import RankedList, mrr, ndcg_at_k
from reljudge.rescaler import bucket_of, rescale_dataset

FIXTURES = Path(__file__).parent / "fixtures"


@contextlib.contextmanager
def criterion(n, summary):
    try:
        yield
    except BaseException as exc:
        print(f"\n[criterion {n}] FAIL {summary}: {exc!r}")
        raise
    print(f"\n[criterion {n}] PASS {summary}")


def test_criterion_01_metric_oracles():
    rng = random.Random(20240601)
    with criterion(1, "kappa, tau_b, NDCG@k, MRR match brute force on 100 instances each"):
        start = time.perf_counter()
        worst = 0.0
        for _ in range(100):
            n = rng.randint(1, 8)
            gold = [rng.randint(1, 4) for _ in range(n)]
            pred = [rng.randint(1, 4) for _ in range(n)]
            worst = max(worst, abs(cohens_kappa(list(zip(gold, pred))) - oracles.kappa(gold, pred)))
        for _ in range(100):
            n = rng.randint(2, 8)
            gold = [rng.randint(1, 4) for _ in range(n)]
            pred = [rng.randint(1, 4) for _ in range(n)]
            got, want = kendall_tau(gold, pred), oracles.tau_b(gold, pred)
            assert (got is None) == (want is None)
            if want is not None:
                worst = max(worst, abs(got - want))
        for _ in range(100):
            n = rng.randint(1, 8)
            gains = [rng.randint(0, 6) for _ in range(n)]
            k = rng.randint(1, n)
            rl = RankedList("q", tuple(f"d{i}" for i in range(n)), tuple(gains))
            got, want = ndcg_at_k(rl, k), oracles.ndcg(gains, k)
            assert (got is None) == (want is None)
            if want is not None:
                worst = max(worst, abs(got - want))
        for _ in range(100):
            n = rng.randint(1, 8)
            gains = [rng.randint(0, 6) for _ in range(n)]
            rl = RankedList("q", tuple(f"d{i}" for i in range(n)), tuple(gains))
            worst = max(worst, abs(mrr(rl) - oracles.reciprocal_rank(gains)))
        elapsed = time.perf_counter() - start
        assert worst <= 1e-12, worst
        assert elapsed < 5.0, elapsed


def test_criterion_02_hand_fixtures():
    hand = json.loads((FIXTURES / "hand_computations.json").read_text())
    with criterion(2, "hand-derived kappa, tau_b and NDCG@2 values"):
        k = hand["kappa"]
        assert cohens_kappa(list(zip(k["gold"], k["pred"]))) == pytest.approx(k["expected"], abs=1e-4)
        assert cohens_kappa(list(zip(k["gold"], k["pred"]))) == pytest.approx(k["numerator"] / k["denominator"], abs=1e-15)
        t = hand["tau_b"]
        assert kendall_tau(t["gold"], t["pred"]) == pytest.approx(t["expected"], abs=1e-4)
        n = hand["ndcg_at_2"]
        rl = RankedList("q", ("a", "b"), tuple(n["gains"]))
        assert ndcg_at_k(rl, n["k"]) == pytest.approx(n["expected"], abs=1e-4)


def test_criterion_03_bucket_mapping():
    with criterion(3, "bucket table is total over grades and non-hard-negatives pass through unchanged"):
        table = {g: bucket_of(g) for g in GRADES}
        assert table == {1: RescaleBucket.SLN, 2: RescaleBucket.HN, 3: RescaleBucket.FHN, 4: RescaleBucket.FHN}
        for bad in (0, 5, -1):
            with pytest.raises(Exception):
                bucket_of(bad)
        rng = random.Random(3)
        examples, judgments = [], {}
        for q in range(30):
            for d in range(8):
                tier = RankingTier(rng.randrange(len(RankingTier)))
                ex = RankingExample(f"q{q}", f"d{d}", f"title {q} {d} é", "body\n" * rng.randint(0, 3), tier)
                examples.append(ex)
                judgments[(ex.query_id, ex.document_id)] = rng.randint(1, 4)
        out, _ = rescale_dataset(examples, judgments)
        assert len(out) == len(examples)
        for before, after in zip(examples, out):
            if before.tier == RankingTier.HARD_NEG:
                assert after.rescaled == bucket_of(judgments[(before.query_id, before.document_id)])
                assert replace(after, rescaled=None) == before
            else:
                assert after is before or after == before
                assert repr(after) == repr(before)


def test_criterion_04_dataset_statistics():
    with criterion(4, "class percentages 32.85/28.50/17.20/21.45 and 5.644 docs/query"):
        grades = [1] * 1854 + [2] * 1608 + [3] * 971 + [4] * 1211
        random.Random(4).shuffle(grades)
        sizes = [5] * 356 + [6] * 644  # 5644 pairs over 1000 queries
        groups, pos = [], 0
        for qi, size in enumerate(sizes):
            q = Query(f"q{qi}", f"query {qi}")
            docs = tuple(Document(f"d{j}", title=f"t{j}") for j in range(size))
            pairs = tuple(JudgedPair(q.id, d.id, gold=grades[pos + j]) for j, d in enumerate(docs))
            pos += size
            groups.append(QueryGroup(q, pairs, docs))
        stats = validate_dataset(groups)
        want = {1: 32.85, 2: 28.50, 3: 17.20, 4: 21.45}
        for g, pct in want.items():
            assert stats.percentages[g] == pytest.approx(pct, abs=0.01)
        assert stats.query_count == 1000
        assert stats.avg_docs_per_query == pytest.approx(5.644, abs=1e-12)


def test_criterion_05_prompt_goldens():
    with criterion(5, "every option combination renders byte-identically; 250-char cut is exact"):
        grid = option_grid()
        assert len(grid) == 24
        for cfg in grid:
            golden = (GOLDEN_DIR / f"{cfg.name}.txt").read_bytes()
            assert render_sample(cfg).encode("utf-8") == golden, cfg.name
        text = render_prompt(SAMPLE_QUERY, SAMPLE_DOC, PromptConfig()).user_text
        line = next(l for l in text.splitlines() if l.startswith("Content: "))
        assert line == "Content: " + CONTENT[:250]
        for n in (249, 250, 251):
            doc = Document("d", title="t", content="x" * n)
            text = render_prompt(SAMPLE_QUERY, doc, PromptConfig()).user_text
            line = next(l for l in text.splitlines() if l.startswith("Content: "))
            assert len(line) - len("Content: ") == min(n, 250)


def test_criterion_06_parse_corpus():
    cases = [json.loads(l) for l in (FIXTURES / "parse_corpus.jsonl").read_text().splitlines() if l.strip()]
    with criterion(6, f"{len(cases)} completions parse to the expected grade or error"):
        assert len(cases) >= 30
        fabricated = 0
        for case in cases:
            try:
                got = parse_score(case["completion"])
            except (ParseFailure, OutOfRange) as exc:
                assert "error" in case, case
                assert exc.code == case["error"], case
                continue
            if "grade" not in case or got != case["grade"]:
                fabricated += 1
        assert fabricated == 0


def test_criterion_07_simulation():
    seeds = range(5)
    with criterion(7, "oracle rescaling beats none on >= 4/5 seeds; ft-like lies between in mean"):
        start = time.perf_counter()
        separated = 0
        means = {c: {"mrr": [], "ndcg@5": []} for c in ("none", "oracle", "ft_like")}
        for s in seeds:
            rep = run_comparison(SimConfig(seed=s), conditions=("none", "oracle", "ft_like"))
            top = max(rep.config.eval_dims)
            if rep.separated("oracle", "none", top, "mrr") and rep.separated("oracle", "none", top, "ndcg@5"):
                separated += 1
            for c in means:
                for m in means[c]:
                    means[c][m].append(rep.metric(c, top, m).mean)
        elapsed = time.perf_counter() - start
        avg = {c: {m: float(np.mean(v)) for m, v in ms.items()} for c, ms in means.items()}
        print(f"\nseparated on {separated}/5 seeds; 5-seed means {avg}; {elapsed:.0f}s")
        assert separated >= 4
        for m in ("mrr", "ndcg@5"):
            assert avg["none"][m] < avg["ft_like"][m] < avg["oracle"][m], m
        assert elapsed < 300


def test_criterion_08_throughput_ordering():
    groups = make_groups(20, 6)
    shots_pool = fewshot_pool(make_groups(8, 4, seed=1))
    backend = StubBackend(config=BackendConfig("stub://", "stub", max_in_flight=4), prefill_delay=2e-5, decode_delay=2e-4)
    with criterion(8, "prompts/sec ordering Score > F4 > F8 and Score > COT"):
        rate = {}
        for label, cfg in (("score", PromptConfig()), ("cot", PromptConfig(use_cot=True)),
                           ("f4", PromptConfig(few_shot=4)), ("f8", PromptConfig(few_shot=8))):
            shots = select_fewshot(shots_pool, cfg.few_shot, seed=0) if cfg.few_shot else []
            rep = bench_throughput(groups, cfg, backend, shots, label=label)
            assert rep.prompt_count == 120
            rate[label] = rep.prompts_per_second
        assert rate["score"] > rate["f4"] > rate["f8"], rate
        assert rate["score"] > rate["cot"], rate


def test_criterion_09_corpus_export(tmp_path):
    groups = make_groups(100, 16)
    with criterion(9, "1000/250 export is class-balanced, disjoint and seed-deterministic"):
        tr, va = export_finetune_corpus(groups, 1000, 250, seed=11, out_dir=tmp_path / "a")
        (_, train), (_, val) = read_corpus(tr), read_corpus(va)

        def counts(rows):
            c = {g: 0 for g in GRADES}
            for r in rows:
                c[int(r["assistant"].split()[-1])] += 1
            return c

        assert counts(train) == {1: 250, 2: 250, 3: 250, 4: 250}
        assert sorted(counts(val).values(), reverse=True) == [63, 63, 62, 62]
        assert not {r["user"] for r in train} & {r["user"] for r in val}
        tr2, va2 = export_finetune_corpus(groups, 1000, 250, seed=11, out_dir=tmp_path / "b")
        assert tr.read_bytes() == tr2.read_bytes() and va.read_bytes() == va2.read_bytes()
        tr3, _ = export_finetune_corpus(groups, 1000, 250, seed=12, out_dir=tmp_path / "c")
        assert tr.read_bytes() != tr3.read_bytes()


def test_criterion_10_label_shift():
    rng = random.Random(10)
    with criterion(10, "within-query constant shifts keep mean tau and raise binary MAE"):
        for _ in range(50):
            gold_groups, shifted_groups = [], []
            for qi in range(rng.randint(2, 6)):
                n = rng.randint(2, 8)
                gold = [rng.randint(1, 4) for _ in range(n)]
                # leave room for a shift that stays on the scale without clamping ties together
                while len(set(gold)) == 1 or max(gold) - min(gold) == 3:
                    gold = [rng.randint(1, 4) for _ in range(n)]
                lo, hi = min(gold), max(gold)
                shifts = [c for c in (-3, -2, -1, 1, 2, 3) if 1 <= lo + c and hi + c <= 4]
                c = rng.choice(shifts)
                q = Query(f"q{qi}", "text")
                docs = tuple(Document(f"d{j}", title="t") for j in range(n))

                def group(preds):
                    return QueryGroup(q, tuple(JudgedPair(q.id, d.id, gold=g, predicted=p)
                                               for d, g, p in zip(docs, gold, preds)), docs)

                gold_groups.append(group(gold))
                shifted = [min(4, max(1, g + c)) for g in gold]
                assert shifted == [g + c for g in gold]
                shifted_groups.append(group(shifted))
            tau0, n0 = mean_tau(gold_groups)
            tau1, n1 = mean_tau(shifted_groups)
            assert n0 == n1 and abs(tau0 - tau1) <= 1e-12
            flat0 = [(int(p.gold), int(p.predicted)) for g in gold_groups for p in g.pairs]
            flat1 = [(int(p.gold), int(p.predicted)) for g in shifted_groups for p in g.pairs]
            assert binary_mae(flat1) > binary_mae(flat0)
