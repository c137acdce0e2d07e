import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import httpx
import pytest

from conftest import make_groups, read_jsonl
from reljudge.errors import OutOfRange, ParseFailure, RunAborted, TransportError
from reljudge.judge import (
    BackendConfig,
    BatchStats,
    OpenAICompatBackend,
    StubBackend,
    approx_tokens,
    bench_throughput,
    judge_batch,
    judge_pair,
    parse_score,
    read_journal,
    throughput_table,
)
from reljudge.prompting import PromptConfig, render_prompt

CORPUS = [json.loads(l) for l in (Path(__file__).parent / "fixtures" / "parse_corpus.jsonl").read_text().splitlines()]


@pytest.mark.parametrize("case", CORPUS, ids=range(len(CORPUS)))
def test_parse_corpus(case):
    raw = case["completion"]
    if "grade" in case:
        assert parse_score(raw) == case["grade"]
    else:
        exc = OutOfRange if case["error"] == "out_of_range" else ParseFailure
        with pytest.raises(exc) as e:
            parse_score(raw)
        assert e.value.code == case["error"]
        assert e.value.raw_output == raw


def test_parse_narrower_scale_and_none():
    with pytest.raises(ParseFailure):
        parse_score(None)
    with pytest.raises(OutOfRange) as e:
        parse_score("Score: 4", 1, 3)
    assert e.value.value == 4


def test_approx_tokens():
    assert approx_tokens("") == 1  # never zero
    assert approx_tokens("abcd") == 1
    assert approx_tokens("abcde") == 2


def test_output_token_defaults():
    cfg = BackendConfig("http://x", "m")
    assert cfg.output_tokens(False) == 8 and cfg.output_tokens(True) == 512
    assert BackendConfig("http://x", "m", max_output_tokens=20).output_tokens(True) == 20
    with pytest.raises(ValueError):
        BackendConfig("http://x", "m", max_in_flight=0)


# ---------------------------------------------------------------- HTTP wire


class _Handler(BaseHTTPRequestHandler):
    requests: list = []
    reply = "Score: 3"
    status = 200

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).requests.append((self.path, dict(self.headers), body))
        if type(self).status != 200:
            self.send_response(type(self).status)
            self.end_headers()
            self.wfile.write(b"overloaded")
            return
        payload = {
            "choices": [{"message": {"role": "assistant", "content": type(self).reply}}],
            "usage": {"prompt_tokens": 123, "completion_tokens": 3},
        }
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.requests = []
    _Handler.reply = "Score: 3"
    _Handler.status = 200
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/v1", _Handler
    srv.shutdown()


def _prompt(cfg=PromptConfig()):
    g = make_groups(1, 1)[0]
    return render_prompt(g.query, g.documents[0], cfg)


def test_openai_wire_format(server, monkeypatch):
    url, handler = server
    monkeypatch.setenv("RELJUDGE_API_KEY", "secret")
    backend = OpenAICompatBackend(BackendConfig(url, "gemma", seed=11))
    grade, raw = judge_pair(_prompt(), backend)
    assert grade == 3 and raw == "Score: 3"
    path, headers, body = handler.requests[0]
    assert path == "/v1/chat/completions"
    assert headers["Authorization"] == "Bearer secret"
    assert body["model"] == "gemma" and body["temperature"] == 0.0
    assert body["max_tokens"] == 8 and body["seed"] == 11
    assert [m["role"] for m in body["messages"]] == ["system", "user"]
    c = backend.complete(body["messages"], 8)
    assert (c.prompt_tokens, c.completion_tokens) == (123, 3)
    backend.close()


def test_http_error_is_transport_error(server):
    url, handler = server
    handler.status = 503
    backend = OpenAICompatBackend(BackendConfig(url, "m"))
    with pytest.raises(TransportError):
        judge_pair(_prompt(), backend)


def test_unreachable_endpoint():
    backend = OpenAICompatBackend(BackendConfig("http://127.0.0.1:9", "m", request_timeout=2))
    with pytest.raises(TransportError):
        backend.complete([{"role": "user", "content": "x"}], 8)


def test_malformed_body_is_transport_error():
    transport = httpx.MockTransport(lambda req: httpx.Response(200, json={"nope": 1}))
    backend = OpenAICompatBackend(BackendConfig("http://x/v1", "m"), client=httpx.Client(transport=transport))
    with pytest.raises(TransportError):
        backend.complete([{"role": "user", "content": "x"}], 8)


# ---------------------------------------------------------------- retries and batches


def test_parse_failures_are_retried_then_reported():
    answers = iter(["garbage", "still garbage", "Score: 2"])
    stub = StubBackend(lambda m: next(answers))
    assert judge_pair(_prompt(), stub)[0] == 2
    assert stub.call_count == 3
    stub = StubBackend(lambda m: "Score: 9", BackendConfig("stub://", "s", retry_limit=1))
    with pytest.raises(OutOfRange) as e:
        judge_pair(_prompt(), stub)
    assert e.value.raw_output == "Score: 9" and stub.call_count == 2


def _gold_responder(groups):
    gold = {}
    for g in groups:
        for p, d in zip(g.pairs, g.documents):
            gold[d.title] = int(p.gold)

    def respond(messages):
        user = messages[-1]["content"]
        title = next(l for l in user.splitlines() if l.startswith("Title: "))[7:]
        return f"Score: {gold[title]}"

    return respond


def test_batch_preserves_order_and_writes_journal(tmp_path):
    groups = make_groups(4, 5)
    stub = StubBackend(_gold_responder(groups), BackendConfig("stub://", "s", max_in_flight=4))
    out = judge_batch(groups, PromptConfig(), stub, journal_path=tmp_path / "j.jsonl")
    assert [p.document_id for g in out for p in g.pairs] == [p.document_id for g in groups for p in g.pairs]
    assert all(p.predicted == p.gold for g in out for p in g.pairs)
    recs = read_jsonl(tmp_path / "j.jsonl")
    assert len(recs) == 20
    assert set(recs[0]) == {"query_id", "doc_id", "predicted", "raw_output", "timestamp"}


def test_concurrency_is_bounded():
    groups = make_groups(5, 6)
    stub = StubBackend(config=BackendConfig("stub://", "s", max_in_flight=3), prefill_delay=1e-5)
    judge_batch(groups, PromptConfig(), stub)
    assert stub.call_count == 30
    assert 1 < stub.max_observed_in_flight <= 3


def test_resume_only_judges_missing_pairs(tmp_path):
    groups = make_groups(3, 4)
    journal = tmp_path / "j.jsonl"
    judge_batch(groups[:2], PromptConfig(), StubBackend(), journal_path=journal)
    stub = StubBackend()
    stats = BatchStats()
    out = judge_batch(groups, PromptConfig(), stub, journal_path=journal, stats=stats)
    assert stub.call_count == 4 and stats.resumed == 8
    assert all(p.predicted is not None for g in out for p in g.pairs)
    assert len(read_journal(journal)) == 12


def test_resume_rejudges_transport_errors(tmp_path):
    groups = make_groups(1, 3)
    journal = tmp_path / "j.jsonl"

    def flaky(messages):
        raise TransportError("down")

    bad = StubBackend(flaky)
    out = judge_batch(groups, PromptConfig(), bad, journal_path=journal)
    assert all(p.error == "transport" for p in out[0].pairs)
    good = StubBackend()
    out = judge_batch(groups, PromptConfig(), good, journal_path=journal)
    assert good.call_count == 3 and all(p.predicted for p in out[0].pairs)


def test_torn_journal_line_is_ignored(tmp_path):
    journal = tmp_path / "j.jsonl"
    judge_batch(make_groups(1, 2), PromptConfig(), StubBackend(), journal_path=journal)
    with open(journal, "a") as fh:
        fh.write('{"query_id": "q0", "doc')
    assert len(read_journal(journal)) == 2


def test_errors_recorded_not_fabricated(tmp_path):
    groups = make_groups(2, 3)
    out = judge_batch(groups, PromptConfig(), StubBackend(lambda m: "no idea"), journal_path=tmp_path / "j.jsonl")
    assert all(p.predicted is None and p.error == "parse_failure" for g in out for p in g.pairs)
    assert all(r["error"] == "parse_failure" and "predicted" not in r for r in read_jsonl(tmp_path / "j.jsonl"))


def test_abort_on_failure_rate_keeps_partial():
    groups = make_groups(10, 5)
    with pytest.raises(RunAborted) as e:
        judge_batch(groups, PromptConfig(), StubBackend(lambda m: "??"), max_failure_rate=0.2, min_pairs_before_abort=10)
    assert e.value.failure_rate > 0.2
    judged = [p for g in e.value.partial for p in g.pairs if p.error]
    assert 10 <= len(judged) < 50


def test_cot_prompts_get_cot_token_budget():
    seen = []

    class Spy(StubBackend):
        def complete(self, messages, max_tokens):
            seen.append(max_tokens)
            return super().complete(messages, max_tokens)

    judge_pair(_prompt(PromptConfig(use_cot=True)), Spy())
    judge_pair(_prompt(), Spy())
    assert seen == [512, 8]


def test_stub_default_responder_is_deterministic():
    p = _prompt()
    assert judge_pair(p, StubBackend()) == judge_pair(p, StubBackend())
    raw = judge_pair(_prompt(PromptConfig(use_cot=True)), StubBackend())[1]
    assert approx_tokens(raw) > 100


def test_bench_reports_and_table():
    groups = make_groups(2, 3)
    with pytest.warns(UserWarning):
        r = bench_throughput(groups, PromptConfig(), StubBackend(report_usage=False))
    assert r.prompt_count == 6 and r.approximate_tokens
    assert r.prompts_per_second > 0
    text = throughput_table([r])
    assert "Throughput (prompts/sec)" in text and "approximate" in text.lower()
