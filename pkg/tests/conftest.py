import json
import random

import pytest

from reljudge.core import Document, IntentDistribution, JudgedPair, Query, QueryGroup


def make_groups(n_queries=6, docs_per_query=6, seed=0, with_intent=True):
    rng = random.Random(seed)
    groups = []
    for q in range(n_queries):
        intent = IntentDistribution(0.2, 0.5, 0.3) if with_intent else None
        query = Query(f"q{q}", f"query number {q}", intent)
        docs, pairs = [], []
        for d in range(docs_per_query):
            doc = Document(
                f"d{d}",
                url=f"https://example.org/{q}/{d}",
                title=f"Title {q}-{d}",
                content="lorem ipsum " * rng.randint(0, 40),
                meta_description=f"meta {d}" if d % 2 else None,
            )
            docs.append(doc)
            pairs.append(JudgedPair(query.id, doc.id, gold=(q + d) % 4 + 1))
        groups.append(QueryGroup(query, tuple(pairs), tuple(docs)))
    return groups


def write_eval_jsonl(path, n_queries=6, docs_per_query=6, seed=0):
    from reljudge.core import dump_eval_dataset

    groups = make_groups(n_queries, docs_per_query, seed)
    dump_eval_dataset(groups, path)
    return groups


@pytest.fixture
def groups():
    return make_groups()


@pytest.fixture
def eval_file(tmp_path):
    p = tmp_path / "eval.jsonl"
    write_eval_jsonl(p)
    return p


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
