"""Client side of LLM relevance judging: output parsing, the HTTP backend,
bounded-concurrency batch labelling with a resumable journal, and
throughput measurement."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import warnings
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx

from .core import JudgedPair, QueryGroup, RelevanceGrade
from .errors import JudgeError, OutOfRange, ParseFailure, RunAborted, TransportError
from .prompting import COT_INSTRUCTION, FewShotExample, PromptConfig, RenderedPrompt, render_prompt

log = logging.getLogger(__name__)

API_KEY_ENV = "RELJUDGE_API_KEY"
CHARS_PER_TOKEN = 4

_SCORE_RE = re.compile(r"score", re.IGNORECASE)
_VALUE_RE = re.compile(r"[\s:]*([+-]?\d+)(?![\d]|\.\d)")


def parse_score(raw: str, scale_min: int = 1, scale_max: int = 4) -> RelevanceGrade:
    """Read the grade following the last "score" in a completion.

    Raises ``ParseFailure`` if there is no "score" or no integer right after
    the last one, and ``OutOfRange`` for integers outside the scale.
    """
    if raw is None:
        raise ParseFailure("empty completion", raw)
    last = None
    for last in _SCORE_RE.finditer(raw):
        pass
    if last is None:
        raise ParseFailure("no 'score' in completion", raw)
    m = _VALUE_RE.match(raw, last.end())
    if m is None:
        raise ParseFailure("no integer after the last 'score'", raw)
    value = int(m.group(1))
    if not scale_min <= value <= scale_max:
        raise OutOfRange(f"grade {value} outside [{scale_min}, {scale_max}]", value, raw)
    return RelevanceGrade(value)


def approx_tokens(text: str) -> int:
    return max(1, -(-len(text) // CHARS_PER_TOKEN))


# ---------------------------------------------------------------- backends


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str
    model_name: str
    temperature: float = 0.0
    max_output_tokens: int | None = None
    max_in_flight: int = 1
    request_timeout: float = 60.0
    retry_limit: int = 2
    seed: int | None = 0
    api_key: str | None = None

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")

    def output_tokens(self, cot: bool) -> int:
        if self.max_output_tokens is not None:
            return self.max_output_tokens
        return 512 if cot else 8


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class Backend(Protocol):
    config: BackendConfig

    def complete(self, messages: list[dict[str, str]], max_tokens: int) -> Completion: ...


class OpenAICompatBackend:
    """Chat-completions client for any OpenAI-compatible server (vLLM, TGI...)."""

    def __init__(self, config: BackendConfig, client: httpx.Client | None = None):
        self.config = config
        url = config.endpoint_url.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        self.url = url
        key = config.api_key or os.environ.get(API_KEY_ENV) or os.environ.get("OPENAI_API_KEY")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=config.request_timeout, headers=headers)

    def request_body(self, messages: list[dict[str, str]], max_tokens: int) -> dict:
        body = {
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": max_tokens,
        }
        if self.config.seed is not None:
            body["seed"] = self.config.seed
        return body

    def complete(self, messages: list[dict[str, str]], max_tokens: int) -> Completion:
        try:
            resp = self._client.post(self.url, json=self.request_body(messages, max_tokens))
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed response body: {exc}") from exc
        usage = data.get("usage") or {}
        return Completion(text, usage.get("prompt_tokens"), usage.get("completion_tokens"))

    def close(self) -> None:
        self._client.close()


def _stable_grade(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest(), 16) % 4 + 1


def default_responder(messages: list[dict[str, str]]) -> str:
    """Deterministic fake judge: grade from a hash, long reasoning for COT prompts."""
    user = messages[-1]["content"]
    grade = _stable_grade(user)
    if COT_INSTRUCTION in user:
        reasoning = " ".join(f"step{i}" for i in range(200))
        return f"The user wants a page matching the query. {reasoning}. Therefore Score: {grade}"
    return f"Score: {grade}"


class StubBackend:
    """In-process backend for tests, dry runs and benchmarks.

    ``responder`` maps the chat messages to a completion string.  Latency is
    simulated as ``prompt_tokens * prefill_delay + completion_tokens *
    decode_delay`` seconds, with tokens counted by the chars/4 heuristic.
    Usage metadata is reported unless ``report_usage`` is false.
    """

    def __init__(
        self,
        responder: Callable[[list[dict[str, str]]], str] | None = None,
        config: BackendConfig | None = None,
        prefill_delay: float = 0.0,
        decode_delay: float = 0.0,
        report_usage: bool = True,
    ):
        self.responder = responder or default_responder
        self.config = config or BackendConfig(endpoint_url="stub://", model_name="stub")
        self.prefill_delay = prefill_delay
        self.decode_delay = decode_delay
        self.report_usage = report_usage
        self.calls: list[tuple[float, float]] = []
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_observed_in_flight = 0

    def complete(self, messages: list[dict[str, str]], max_tokens: int) -> Completion:
        with self._lock:
            self._in_flight += 1
            self.max_observed_in_flight = max(self.max_observed_in_flight, self._in_flight)
        start = time.perf_counter()
        try:
            text = self.responder(messages)
            p_tok = sum(approx_tokens(m["content"]) for m in messages)
            c_tok = approx_tokens(text)
            delay = p_tok * self.prefill_delay + c_tok * self.decode_delay
            if delay > 0:
                time.sleep(delay)
        finally:
            with self._lock:
                self._in_flight -= 1
                self.calls.append((start, time.perf_counter()))
        if self.report_usage:
            return Completion(text, p_tok, c_tok)
        return Completion(text)

    @property
    def call_count(self) -> int:
        return len(self.calls)


# ---------------------------------------------------------------- judging


def judge_pair(prompt: RenderedPrompt, backend: Backend) -> tuple[RelevanceGrade, str]:
    """Ask the backend for a grade, retrying unparseable answers.

    On final failure the last ``ParseFailure``/``OutOfRange`` is raised with
    the raw completion attached; transport problems raise ``TransportError``.
    """
    cfg = backend.config
    scale = prompt.config_echo
    max_tokens = cfg.output_tokens(scale.use_cot)
    messages = prompt.messages()
    last_error: JudgeError | None = None
    for _ in range(cfg.retry_limit + 1):
        completion = backend.complete(messages, max_tokens)
        try:
            return parse_score(completion.text, scale.scale_min, scale.scale_max), completion.text
        except (ParseFailure, OutOfRange) as exc:
            last_error = exc
    assert last_error is not None
    raise last_error


def _journal_key(rec: dict) -> tuple[str, str]:
    return str(rec["query_id"]), str(rec["doc_id"])


def read_journal(path: str | Path) -> dict[tuple[str, str], dict]:
    """Latest journal record per (query_id, doc_id); a torn final line is ignored."""
    out: dict[tuple[str, str], dict] = {}
    path = Path(path)
    if not path.exists():
        return out
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                log.warning("skipping unreadable journal line in %s", path)
                continue
            out[_journal_key(rec)] = rec
    return out


def apply_record(pair: JudgedPair, rec: dict) -> JudgedPair:
    if rec.get("predicted") is not None:
        return replace(pair, predicted=RelevanceGrade(int(rec["predicted"])), raw_output=rec.get("raw_output"), error=None)
    return replace(pair, predicted=None, raw_output=rec.get("raw_output"), error=rec.get("error"))


class _Journal:
    def __init__(self, path: Path | None):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, qid: str, did: str, grade: RelevanceGrade | None, error: str | None, raw: str | None) -> dict:
        rec = {
            "query_id": qid,
            "doc_id": did,
            "raw_output": raw,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        if grade is not None:
            rec["predicted"] = int(grade)
        else:
            rec["error"] = error
        if self._fh:
            self._fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            self._fh.flush()
        return rec

    def close(self) -> None:
        if self._fh:
            self._fh.close()


@dataclass
class BatchStats:
    requested: int = 0
    resumed: int = 0
    errors: int = 0
    by_error: dict[str, int] = field(default_factory=dict)


def judge_batch(
    groups: Sequence[QueryGroup],
    config: PromptConfig,
    backend: Backend,
    shots: Sequence[FewShotExample] = (),
    journal_path: str | Path | None = None,
    max_failure_rate: float | None = None,
    min_pairs_before_abort: int = 20,
    stats: BatchStats | None = None,
) -> list[QueryGroup]:
    """Judge every pair, keeping input order and at most ``max_in_flight`` requests open.

    With a journal, pairs already recorded there (other than transport
    failures) are restored instead of re-judged, so an interrupted run can
    simply be restarted.  If the error rate exceeds ``max_failure_rate`` the
    run stops and ``RunAborted`` carries the partial groups.
    """
    stats = stats if stats is not None else BatchStats()
    journal_path = Path(journal_path) if journal_path else None
    done = read_journal(journal_path) if journal_path else {}

    results: dict[tuple[str, str], JudgedPair] = {}
    todo: list[tuple[JudgedPair, RenderedPrompt]] = []
    for g in groups:
        for pair, doc in zip(g.pairs, g.documents):
            key = (pair.query_id, pair.document_id)
            rec = done.get(key)
            if rec is not None and rec.get("error") != TransportError.code:
                results[key] = apply_record(pair, rec)
                stats.resumed += 1
                continue
            todo.append((pair, render_prompt(g.query, doc, config, shots)))

    def assemble() -> list[QueryGroup]:
        return [
            g.with_pairs(results.get((p.query_id, p.document_id), p) for p in g.pairs) for g in groups
        ]

    def run_one(prompt: RenderedPrompt) -> tuple[RelevanceGrade | None, str | None, str | None]:
        try:
            grade, raw = judge_pair(prompt, backend)
            return grade, None, raw
        except JudgeError as exc:
            return None, exc.code, exc.raw_output

    journal = _Journal(journal_path)
    completed = 0
    aborted = None
    try:
        with ThreadPoolExecutor(max_workers=backend.config.max_in_flight) as pool:
            pending: dict[Future, JudgedPair] = {}
            queue = iter(todo)
            exhausted = False

            def refill() -> None:
                nonlocal exhausted
                while not exhausted and len(pending) < backend.config.max_in_flight:
                    try:
                        pair, prompt = next(queue)
                    except StopIteration:
                        exhausted = True
                        return
                    pending[pool.submit(run_one, prompt)] = pair

            refill()
            while pending:
                finished, _ = wait(list(pending), return_when=FIRST_COMPLETED)
                for fut in finished:
                    pair = pending.pop(fut)
                    grade, error, raw = fut.result()
                    stats.requested += 1
                    completed += 1
                    journal.write(pair.query_id, pair.document_id, grade, error, raw)
                    key = (pair.query_id, pair.document_id)
                    if grade is not None:
                        results[key] = replace(pair, predicted=grade, raw_output=raw, error=None)
                    else:
                        stats.errors += 1
                        stats.by_error[error] = stats.by_error.get(error, 0) + 1
                        results[key] = replace(pair, predicted=None, raw_output=raw, error=error)
                if (
                    max_failure_rate is not None
                    and completed >= min(min_pairs_before_abort, len(todo))
                    and stats.errors / completed > max_failure_rate
                ):
                    aborted = stats.errors / completed
                    for fut in pending:
                        fut.cancel()
                    break
                refill()
    finally:
        journal.close()

    if aborted is not None:
        raise RunAborted(
            f"failure rate {aborted:.1%} exceeds {max_failure_rate:.1%}",
            partial=assemble(),
            failure_rate=aborted,
        )
    return assemble()


# ---------------------------------------------------------------- throughput


@dataclass(frozen=True)
class ThroughputReport:
    label: str
    prompt_count: int
    mean_prompt_length_tokens: float
    mean_predicted_length_tokens: float
    wall_seconds: float
    prompts_per_second: float
    approximate_tokens: bool = False

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "prompt_count": self.prompt_count,
            "mean_prompt_length_tokens": self.mean_prompt_length_tokens,
            "mean_predicted_length_tokens": self.mean_predicted_length_tokens,
            "wall_seconds": self.wall_seconds,
            "prompts_per_second": self.prompts_per_second,
            "approximate_tokens": self.approximate_tokens,
        }


def bench_throughput(
    groups: Sequence[QueryGroup],
    config: PromptConfig,
    backend: Backend,
    shots: Sequence[FewShotExample] = (),
    label: str | None = None,
) -> ThroughputReport:
    """Send every pair once through ``backend`` and time the whole batch.

    Parse failures are not retried here: the goal is raw serving speed.
    """
    prompts = [render_prompt(g.query, d, config, shots) for g in groups for d in g.documents]
    if not prompts:
        raise ValueError("no prompts to benchmark")
    if len(prompts) < 100:
        warnings.warn(f"only {len(prompts)} prompts; throughput estimate will be noisy", stacklevel=2)
    max_tokens = backend.config.output_tokens(config.use_cot)

    def one(p: RenderedPrompt) -> tuple[int, int, bool]:
        msgs = p.messages()
        c = backend.complete(msgs, max_tokens)
        approx = c.prompt_tokens is None or c.completion_tokens is None
        pt = c.prompt_tokens if c.prompt_tokens is not None else sum(approx_tokens(m["content"]) for m in msgs)
        ct = c.completion_tokens if c.completion_tokens is not None else approx_tokens(c.text)
        return pt, ct, approx

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=backend.config.max_in_flight) as pool:
        rows = list(pool.map(one, prompts))
    wall = time.perf_counter() - start
    n = len(rows)
    return ThroughputReport(
        label=label or config.name,
        prompt_count=n,
        mean_prompt_length_tokens=sum(r[0] for r in rows) / n,
        mean_predicted_length_tokens=sum(r[1] for r in rows) / n,
        wall_seconds=wall,
        prompts_per_second=n / wall,
        approximate_tokens=any(r[2] for r in rows),
    )


def throughput_table(reports: Iterable[ThroughputReport]) -> str:
    reports = list(reports)
    width = max(12, *(len(r.label) + 2 for r in reports))
    head = f"{'Prompting method':<28}" + "".join(f"{r.label:>{width}}" for r in reports)
    rows = [
        ("Prompt length", [f"{r.mean_prompt_length_tokens:.0f}" for r in reports]),
        ("Predicted token length", [f"{r.mean_predicted_length_tokens:.0f}" for r in reports]),
        ("Throughput (prompts/sec)", [f"{r.prompts_per_second:.2f}" for r in reports]),
    ]
    lines = [head] + [f"{name:<28}" + "".join(f"{v:>{width}}" for v in vals) for name, vals in rows]
    if any(r.approximate_tokens for r in reports):
        lines.append("(token lengths approximated as chars/4)")
    return "\n".join(lines)
