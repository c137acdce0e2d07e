"""Command-line entry point.

Every subcommand writes its outputs plus one ``manifest.json`` into ``--out``.
Options can also come from a JSON file given with ``--config``; keys are the
option names with dashes replaced by underscores, and explicit flags win.

Exit codes: 0 success, 1 usage or validation error, 2 runtime or backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .agreement import agreement_report, agreement_table, confusion_table
from .core import (
    QueryGroup,
    dump_ranking_dataset,
    eval_records,
    export_finetune_corpus,
    load_eval_dataset,
    load_ranking_dataset,
    RankingDataset,
    validate_dataset,
)
from .errors import (
    BalanceError,
    ConfigurationError,
    DatasetError,
    DivergenceError,
    EmptyDatasetError,
    EmptyInputError,
    IncompleteJudgmentsError,
    JudgeError,
    RelJudgeError,
    RunAborted,
    UndefinedResultError,
    ValidationSplitError,
)
from .judge import (
    BackendConfig,
    BatchStats,
    OpenAICompatBackend,
    apply_record,
    StubBackend,
    bench_throughput,
    judge_batch,
    read_journal,
    throughput_table,
)
from .noise_sim import CONDITIONS, SimConfig, run_comparison
from .prompting import PromptConfig, fewshot_pool, select_fewshot
from .rank_eval import evaluate_run, load_ranked_lists, rank_eval_table
from .rescaler import judgments_from_journal, rescale_dataset

log = logging.getLogger("reljudge")

USAGE_ERRORS = (
    FileNotFoundError,
    BalanceError,
    ConfigurationError,
    DatasetError,
    EmptyDatasetError,
    EmptyInputError,
    IncompleteJudgmentsError,
    UndefinedResultError,
    ValidationSplitError,
)
RUNTIME_ERRORS = (RunAborted, JudgeError, DivergenceError, OSError)

# short names for the four prompting methods of the throughput table
BENCH_PRESETS = {
    "score": PromptConfig(),
    "cot": PromptConfig(use_cot=True),
    "f4": PromptConfig(few_shot=4),
    "f8": PromptConfig(few_shot=8),
}


class UsageError(RelJudgeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    tool_version: str = __version__
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: str | None = None
    exit_code: int | None = None

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        p = out_dir / "manifest.json"
        _write_json(p, self.__dict__)
        return p


# ---------------------------------------------------------------- shared flags


def _add_prompt_flags(p: argparse.ArgumentParser, url_default: bool = False, intent_default: bool = False) -> None:
    g = p.add_argument_group("prompt")
    g.add_argument("--url", action=argparse.BooleanOptionalAction, default=url_default, help="include the URL line")
    g.add_argument("--intent", action=argparse.BooleanOptionalAction, default=intent_default,
                   help="include the query-intent block")
    g.add_argument("--cot", action=argparse.BooleanOptionalAction, default=False, help="ask for step-by-step reasoning")
    g.add_argument("--few-shot", type=int, choices=(0, 4, 8), default=0)
    g.add_argument("--shots", help="JSONL pool of gold-labelled pairs to draw few-shot examples from")
    g.add_argument("--shot-seed", type=int, default=0)
    g.add_argument("--truncate", type=int, default=250, help="content characters kept")


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backend")
    g.add_argument("--backend", choices=("openai", "stub"), default="openai")
    g.add_argument("--endpoint", help="base URL of an OpenAI-compatible server, e.g. http://localhost:8000/v1")
    g.add_argument("--model", help="served model name")
    g.add_argument("--temperature", type=float, default=0.0)
    g.add_argument("--max-tokens", type=int, help="default 8, or 512 with --cot")
    g.add_argument("--max-in-flight", type=int, default=1)
    g.add_argument("--timeout", type=float, default=60.0)
    g.add_argument("--retry-limit", type=int, default=2)
    g.add_argument("--backend-seed", type=int, default=0)
    g.add_argument("--prefill-delay", type=float, default=0.0, help="stub only: seconds per prompt token")
    g.add_argument("--decode-delay", type=float, default=0.0, help="stub only: seconds per generated token")


def _prompt_config(a: argparse.Namespace, **over) -> PromptConfig:
    kw = dict(use_url=a.url, use_intent=a.intent, use_cot=a.cot, few_shot=a.few_shot, content_truncation=a.truncate)
    kw.update(over)
    try:
        return PromptConfig(**kw)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None


def _shots(a: argparse.Namespace, k: int):
    if k == 0:
        return []
    if not a.shots:
        raise UsageError(f"--few-shot {k} needs --shots")
    return select_fewshot(fewshot_pool(load_eval_dataset(a.shots)), k, a.shot_seed)


def _backend(a: argparse.Namespace):
    if a.backend == "stub":
        cfg = BackendConfig("stub://", a.model or "stub", a.temperature, a.max_tokens, a.max_in_flight,
                            a.timeout, a.retry_limit, a.backend_seed)
        return StubBackend(config=cfg, prefill_delay=a.prefill_delay, decode_delay=a.decode_delay)
    if not a.endpoint or not a.model:
        raise UsageError("--endpoint and --model are required with --backend openai")
    try:
        cfg = BackendConfig(a.endpoint, a.model, a.temperature, a.max_tokens, a.max_in_flight,
                            a.timeout, a.retry_limit, a.backend_seed)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    return OpenAICompatBackend(cfg)


def _backend_snapshot(a: argparse.Namespace) -> dict:
    keys = ("backend", "endpoint", "model", "temperature", "max_tokens", "max_in_flight", "timeout",
            "retry_limit", "backend_seed", "prefill_delay", "decode_delay")
    return {k: getattr(a, k) for k in keys}


def _with_predictions(groups: list[QueryGroup], journal: dict) -> list[QueryGroup]:
    out = []
    for g in groups:
        out.append(g.with_pairs(
            apply_record(p, journal[(p.query_id, p.document_id)]) if (p.query_id, p.document_id) in journal else p
            for p in g.pairs
        ))
    return out


def _labeled_records(groups: list[QueryGroup]):
    for rec, pair in zip(eval_records(groups), (p for g in groups for p in g.pairs)):
        rec["predicted"] = int(pair.predicted) if pair.predicted is not None else None
        if pair.error:
            rec["error"] = pair.error
        yield rec


# ---------------------------------------------------------------- commands


def cmd_label(a: argparse.Namespace, m: RunManifest) -> int:
    out = Path(a.out)
    journal = out / "journal.jsonl"
    if journal.exists() and not a.resume:
        raise UsageError(f"{journal} exists; pass --resume to continue it")
    groups = load_eval_dataset(a.input)
    cfg = _prompt_config(a)
    shots = _shots(a, cfg.few_shot)
    backend = _backend(a)
    m.config.update(prompt=cfg.as_dict(), backend=_backend_snapshot(a), max_failure_rate=a.max_failure_rate)
    m.seeds.update(shot_seed=a.shot_seed, backend_seed=a.backend_seed)
    out.mkdir(parents=True, exist_ok=True)
    stats = BatchStats()
    code = 0
    try:
        labeled = judge_batch(groups, cfg, backend, shots, journal, a.max_failure_rate, stats=stats)
    except RunAborted as exc:
        log.error("%s", exc)
        labeled, code = exc.partial, 2
    labeled_path = out / "labeled.jsonl"
    with open(labeled_path, "w", encoding="utf-8") as fh:
        for rec in _labeled_records(labeled):
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    m.outputs.update(journal=str(journal), labeled=str(labeled_path))
    m.config["stats"] = stats.__dict__
    print(f"judged {stats.requested} pairs ({stats.resumed} restored from journal, {stats.errors} errors)")
    return code


def cmd_agree(a: argparse.Namespace, m: RunManifest) -> int:
    gold = load_eval_dataset(a.gold)
    labels = a.label or []
    reports = []
    for i, jp in enumerate(a.journal):
        label = labels[i] if i < len(labels) else Path(jp).parent.name or Path(jp).stem
        reports.append(agreement_report(_with_predictions(gold, read_journal(jp)), label))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    text = agreement_table(reports) + "\n"
    for r in reports:
        text += f"\nconfusion ({r.label}):\n{confusion_table(r)}\n"
        if r.excluded_count:
            text += f"{r.excluded_count} of {r.pair_count + r.excluded_count} pairs ({r.excluded_fraction:.0%}) excluded: no valid prediction\n"
    (out / "agreement.txt").write_text(text, encoding="utf-8")
    _write_json(out / "agreement.json", [r.as_dict() for r in reports])
    m.inputs.update({f"journal{i + 1}": j for i, j in enumerate(a.journal)})
    m.outputs.update(table=str(out / "agreement.txt"), report=str(out / "agreement.json"))
    print(text, end="")
    return 0


def cmd_rescale(a: argparse.Namespace, m: RunManifest) -> int:
    ds = load_ranking_dataset(a.input)
    judgments = judgments_from_journal(a.journal)
    examples, report = rescale_dataset(ds, judgments)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    grouped: dict[str, list] = {}
    for ex in examples:
        grouped.setdefault(ex.query_id, []).append(ex)
    dump_ranking_dataset(RankingDataset(grouped, ds.split), out / "rescaled.jsonl")
    _write_json(out / "rescale_report.json", report.as_dict())
    text = report.table(a.label) + "\n"
    (out / "rescale_report.txt").write_text(text, encoding="utf-8")
    m.inputs["journal"] = a.journal
    m.outputs.update(dataset=str(out / "rescaled.jsonl"), report=str(out / "rescale_report.json"))
    print(text, end="")
    return 0


def cmd_eval(a: argparse.Namespace, m: RunManifest) -> int:
    lists = load_ranked_lists(a.input)
    ks = tuple(a.k or (5, 10, 30))
    report = evaluate_run(lists, ks, a.threshold, a.iterations, a.level, a.seed, a.gain)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", report.as_dict())
    text = rank_eval_table([("-", a.label, report)]) + "\n"
    if report.skipped_queries:
        text += f"{report.skipped_queries} queries without relevant documents left out of NDCG\n"
    (out / "eval.txt").write_text(text, encoding="utf-8")
    m.config.update(ks=list(ks), threshold=a.threshold, iterations=a.iterations, level=a.level, gain=a.gain)
    m.seeds["bootstrap"] = a.seed
    m.outputs.update(report=str(out / "eval.json"), table=str(out / "eval.txt"))
    print(text, end="")
    return 0


def cmd_bench(a: argparse.Namespace, m: RunManifest) -> int:
    groups = load_eval_dataset(a.input)
    names = [n.strip() for n in a.methods.split(",") if n.strip()]
    unknown = [n for n in names if n not in BENCH_PRESETS]
    if unknown:
        raise UsageError(f"unknown method(s) {unknown}; choose from {sorted(BENCH_PRESETS)}")
    if a.limit:
        groups = _take_pairs(groups, a.limit)
    backend = _backend(a)
    reports = []
    for n in names:
        cfg = _prompt_config(a, **{k: v for k, v in BENCH_PRESETS[n].as_dict().items() if k in ("use_cot", "few_shot")})
        reports.append(bench_throughput(groups, cfg, backend, _shots(a, cfg.few_shot), label=n.upper()))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    text = throughput_table(reports) + "\n"
    (out / "throughput.txt").write_text(text, encoding="utf-8")
    _write_json(out / "throughput.json", [r.as_dict() for r in reports])
    m.config.update(methods=names, backend=_backend_snapshot(a))
    m.outputs.update(table=str(out / "throughput.txt"), report=str(out / "throughput.json"))
    print(text, end="")
    return 0


def _take_pairs(groups: list[QueryGroup], n: int) -> list[QueryGroup]:
    out, left = [], n
    for g in groups:
        if left <= 0:
            break
        k = min(left, len(g.pairs))
        out.append(QueryGroup(g.query, g.pairs[:k], g.documents[:k]))
        left -= k
    return out


def cmd_simulate(a: argparse.Namespace, m: RunManifest) -> int:
    cfg = SimConfig.from_file(a.sim_config) if a.sim_config else SimConfig()
    cfg = cfg.with_overrides(
        fhn_rate=a.fhn_rate,
        seed=a.seed,
        n_train_queries=a.n_train,
        n_val_queries=a.n_val,
        bootstrap_iterations=a.bootstrap_iterations,
        epochs=a.epochs,
        learning_rate=a.lr,
    )
    conditions = tuple(c.strip() for c in a.conditions.split(",")) if a.conditions else CONDITIONS
    bad = [c for c in conditions if c not in CONDITIONS]
    if bad or "none" not in conditions or "oracle" not in conditions:
        raise UsageError(f"conditions must include none and oracle and come from {CONDITIONS}")
    report = run_comparison(cfg, conditions)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    d = report.as_dict()
    if not a.keep_loss_history:
        d.pop("loss_history")
    _write_json(out / "comparison.json", d)
    text = report.table() + "\n"
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    m.config.update(sim=cfg.as_dict(), conditions=list(conditions))
    m.seeds["sim"] = cfg.seed
    m.outputs.update(report=str(out / "comparison.json"), table=str(out / "comparison.txt"))
    print(text, end="")
    return 0


def cmd_export_finetune(a: argparse.Namespace, m: RunManifest) -> int:
    groups = load_eval_dataset(a.input)
    stats = validate_dataset(groups)
    cfg = _prompt_config(a)
    if cfg.few_shot:
        raise UsageError("the fine-tuning corpus is rendered without few-shot examples")
    train, val = export_finetune_corpus(groups, a.train_size, a.val_size, a.seed, a.out, cfg)
    m.config.update(prompt=cfg.as_dict(), train_size=a.train_size, val_size=a.val_size, source_stats=stats.as_dict())
    m.seeds["sample"] = a.seed
    m.outputs.update(train=str(train), validation=str(val))
    print(f"wrote {train} and {val}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reljudge", description="LLM relevance judging and hard-negative rescaling toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", help="JSON file of option defaults (flags win)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.set_defaults(func=fn)
        return sp

    sp = add("label", cmd_label, "judge every pair of an evaluation dataset")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--resume", action="store_true", help="continue an existing journal in --out")
    sp.add_argument("--max-failure-rate", type=float, help="abort (exit 2) above this share of failed pairs")
    _add_prompt_flags(sp)
    _add_backend_flags(sp)

    sp = add("agree", cmd_agree, "agreement of one or more journals with gold grades")
    sp.add_argument("--gold", required=True)
    sp.add_argument("--journal", action="append", required=True, help="repeat to compare runs side by side")
    sp.add_argument("--label", action="append", help="column name per journal")

    sp = add("rescale", cmd_rescale, "split hard negatives into SLN/HN/FHN using judge grades")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--journal", required=True)
    sp.add_argument("--label", default="judge")

    sp = add("eval", cmd_eval, "NDCG@k and MRR with bootstrap intervals")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--k", type=int, action="append", help="cutoff; repeatable (default 5, 10, 30)")
    sp.add_argument("--threshold", type=int, default=4, help="minimum gain counted as relevant by MRR")
    sp.add_argument("--iterations", type=int, default=1000)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--gain", choices=("exponential", "linear"), default="exponential")
    sp.add_argument("--label", default="run")

    sp = add("bench", cmd_bench, "throughput of prompting methods against one backend")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--methods", default="score,cot,f4,f8")
    sp.add_argument("--limit", type=int, help="use only the first N pairs")
    _add_prompt_flags(sp)
    _add_backend_flags(sp)

    sp = add("simulate", cmd_simulate, "desk-scale rescaling comparison on synthetic data")
    sp.add_argument("--sim-config", help="JSON SimConfig file")
    sp.add_argument("--fhn-rate", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-val", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--bootstrap-iterations", type=int)
    sp.add_argument("--conditions", help=f"comma list from {','.join(CONDITIONS)}")
    sp.add_argument("--keep-loss-history", action="store_true")

    sp = add("export-finetune", cmd_export_finetune, "class-balanced fine-tuning corpus")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--train-size", type=int, default=1000)
    sp.add_argument("--val-size", type=int, default=250)
    sp.add_argument("--seed", type=int, default=0)
    _add_prompt_flags(sp, url_default=True, intent_default=True)
    return p


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.exit(1, f"reljudge: cannot read --config: {exc}\n")
        if not isinstance(defaults, dict):
            parser.exit(1, "reljudge: --config must hold a JSON object\n")
        sp = _subparser(parser, args.command)
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            parser.exit(1, f"reljudge: unknown --config keys for {args.command}: {unknown}\n")
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    inputs = {k: str(snapshot[k]) for k in ("input", "gold", "config", "sim_config", "shots") if snapshot.get(k)}
    manifest = RunManifest(args.command, {"args": snapshot}, inputs)
    try:
        code = args.func(args, manifest)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"reljudge {args.command}: {exc}", file=sys.stderr)
        code = 1
    except RUNTIME_ERRORS as exc:
        print(f"reljudge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = 2
    if code == 1:
        # nothing was produced; leave any earlier manifest in --out alone
        return code
    manifest.finished = datetime.now(timezone.utc).isoformat()
    manifest.exit_code = code
    try:
        manifest.write(Path(args.out))
    except OSError as exc:
        print(f"reljudge: cannot write manifest: {exc}", file=sys.stderr)
        code = code or 2
    return code


if __name__ == "__main__":
    sys.exit(main())
