"""``parld`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command that
talks to a provider writes ``manifest.json`` into its run directory before
the first call, which is enough for ``replay-check`` to re-execute it.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import io
import json
import logging
import os
import secrets
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import yaml

from . import datasets
from .engine import DiagnosisEngine, SessionRunError, SessionRunResult, run_many
from .evaluation import config_label, emit_report, eval_config, score_runs
from .llm import (
    Cassette,
    CompletionRequest,
    HttpProvider,
    Provider,
    ProviderError,
    RecordingProvider,
    ReplayProvider,
    ScriptedProvider,
    template_of,
)
from .models import EngineConfig, Session, Split
from .prompts import default_registry
from .simulation import (
    POLICIES,
    EpisodeError,
    SimEpisode,
    compute_sim_metrics,
    run_episode,
    sim_metrics_table,
    simulation_pool,
)

log = logging.getLogger("parld")

HARNESS_ENV = "PARLD_TEST_HARNESS"
MANIFEST = "manifest.json"
DEFAULT_MAX_REFLECT = {"mathdial": 2, "comta": 1}
ABLATIONS = {
    "full": {"enable_previewer": True, "enable_reflector": True},
    "no_p": {"enable_previewer": False, "enable_reflector": True},
    "no_r": {"enable_previewer": True, "enable_reflector": False},
    "no_pr": {"enable_previewer": False, "enable_reflector": False},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse's default exit code is 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="engine config file (JSON or YAML)")
    g.add_argument("--out", default="runs", help="output root directory (default: runs)")
    g.add_argument("--workers", type=int, default=1, help="parallel sessions")
    g.add_argument("--max-reflect", type=int, help="reflection budget per turn (default 2 MathDial, 1 CoMTA)")
    g.add_argument("--model", help="chat model name")
    g.add_argument("--provider", default="http", help="http | replay")
    g.add_argument("--cassette", help="cassette file: recorded to with http, read with replay")
    g.add_argument("--script", help=argparse.SUPPRESS)
    g.add_argument("--run-id", help=argparse.SUPPRESS)
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _data_args(p: argparse.ArgumentParser, split: bool = True) -> None:
    p.add_argument("--dataset", required=True, help="canonical *.sessions.jsonl file")
    if split:
        p.add_argument("--split", choices=[s.value for s in Split] + ["all"], default="all")
    p.add_argument("--limit", type=int, help="use only the first N sessions")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="parld", description="Conversational learning diagnosis toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="convert a raw dataset to canonical sessions")
    p.add_argument("--source", required=True, choices=["mathdial", "comta", "canonical"])
    p.add_argument("--input", required=True, help="raw dataset file or directory")
    p.add_argument("--output", required=True, help="destination *.sessions.jsonl")
    p.add_argument("--split", default="all", help="MathDial split: train, test or all")
    p.add_argument("--goal-filter", action="store_true", help="CoMTA: keep only ids listed in --sidecar")
    p.add_argument("--sidecar", help="CoMTA goal-clarity id list")

    p = sub.add_parser("kc-tag", parents=[common], help="attach knowledge concepts to KC-less questions")
    _data_args(p, split=False)
    p.add_argument("--cache", required=True, help="*.kc-cache.json file")
    p.add_argument("--output", required=True, help="destination *.sessions.jsonl")

    for name, helptext in (("diagnose", "run the diagnosis pipeline"), ("evaluate", "final-turn prediction ACC/F1")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        _data_args(p)
        p.add_argument("--no-previewer", action="store_true")
        p.add_argument("--no-reflector", action="store_true")
        if name == "diagnose":
            p.add_argument("--reflection-signal", choices=["none", "final_label"], default=None)

    p = sub.add_parser("ablate", parents=[common], help="evaluate under the four ablation configs")
    _data_args(p)

    p = sub.add_parser("simulate", parents=[common], help="tutoring simulation with a simulated student")
    _data_args(p)
    p.add_argument("--policies", default=",".join(POLICIES), help="comma list of parld, da, dr")
    p.add_argument("--student-model", help="model for the simulated student (default: --model)")

    p = sub.add_parser("replay-check", parents=[common], help="re-run a recorded run from its cassette")
    p.add_argument("--run", required=True, help="run directory containing manifest.json")
    return parser


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _dump(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def new_run_id() -> str:
    return f"{datetime.now(timezone.utc):%Y%m%dT%H%M%SZ}-{secrets.token_hex(3)}"


def load_config_file(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) if Path(path).suffix.lower() in (".yaml", ".yml") else json.loads(text)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return data


def resolve_config(args: argparse.Namespace, sessions: Sequence[Session]) -> EngineConfig:
    """defaults < dataset default budget < config file < flags."""
    values: dict[str, Any] = EngineConfig().to_dict()
    sources = {s.meta.get("source", "") for s in sessions}
    if len(sources) == 1 and (src := next(iter(sources))) in DEFAULT_MAX_REFLECT:
        values["max_num"] = DEFAULT_MAX_REFLECT[src]
    if args.config:
        values.update(load_config_file(args.config))
    if args.model:
        values["model_name"] = args.model
    if args.max_reflect is not None:
        values["max_num"] = args.max_reflect
    if getattr(args, "no_previewer", False):
        values["enable_previewer"] = False
    if getattr(args, "no_reflector", False):
        values["enable_reflector"] = False
    if getattr(args, "reflection_signal", None):
        values["reflection_signal"] = args.reflection_signal
    try:
        return EngineConfig.from_dict(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def load_script(path: str | Path) -> Callable[[CompletionRequest], str]:
    """Scripted backend for the test harness: template id -> list of replies,
    answered in rotation."""
    table: dict[str, list[str]] = json.loads(Path(path).read_text(encoding="utf-8"))
    counters: dict[str, int] = {}

    def handler(request: CompletionRequest) -> str:
        tid = template_of(request)
        replies = table.get(tid)
        if not replies:
            raise ProviderError(f"script has no reply for template {tid!r}")
        i = counters.get(tid, 0)
        counters[tid] = i + 1
        return replies[i % len(replies)]

    return handler


def build_provider(args: argparse.Namespace) -> Provider:
    kind = args.provider
    if kind == "scripted":
        if os.environ.get(HARNESS_ENV) != "1" or not args.script:
            raise UsageError("--provider must be http or replay")
        base: Provider = ScriptedProvider(handler=load_script(args.script))
    elif kind == "replay":
        if not args.cassette:
            raise UsageError("--provider replay needs --cassette")
        if not Path(args.cassette).exists():
            raise UsageError(f"cassette {args.cassette} does not exist")
        return ReplayProvider(Cassette.load(args.cassette))
    elif kind == "http":
        base = HttpProvider()
    else:
        raise UsageError("--provider must be http or replay")
    if args.cassette:
        return RecordingProvider(base, Cassette.load(args.cassette))
    return base


def load_dataset(args: argparse.Namespace) -> list[Session]:
    path = Path(args.dataset)
    if not path.exists():
        raise UsageError(f"dataset {path} does not exist")
    sessions = datasets.read_sessions(path)
    split = getattr(args, "split", "all")
    if split != "all":
        sessions = [s for s in sessions if s.split.value == split]
    if args.limit is not None:
        sessions = sessions[: args.limit]
    return sessions


def _require_kcs(sessions: Sequence[Session]) -> None:
    missing = [s.session_id for s in sessions if not s.question.kcs]
    if missing:
        raise RuntimeError(f"{len(missing)} session(s) have no KCs (first: {missing[0]}); run `parld kc-tag` first")


def start_run(args: argparse.Namespace, argv: Sequence[str], config: EngineConfig, extra: dict | None = None) -> Path:
    run_id = args.run_id or new_run_id()
    run_dir = Path(args.out) / run_id
    run_dir.mkdir(parents=True, exist_ok=False)
    manifest = {
        "run_id": run_id,
        "command": args.command,
        "argv": list(argv),
        "config": config.to_dict(),
        "template_versions": default_registry().versions(),
        "dataset": str(args.dataset),
        "dataset_digest": file_digest(args.dataset),
        **(extra or {}),
    }
    _write_json(run_dir / MANIFEST, manifest)
    return run_dir


def write_session_outputs(run_dir: Path, outcomes: Sequence[SessionRunResult | SessionRunError]) -> None:
    with (run_dir / "summary.jsonl").open("w", encoding="utf-8") as summary:
        for outcome in outcomes:
            with (run_dir / f"{outcome.session_id}.trace.jsonl").open("w", encoding="utf-8") as fh:
                for trace in outcome.memory.traces:
                    fh.write(_dump(trace.to_dict()) + "\n")
            if isinstance(outcome, SessionRunError):
                summary.write(_dump({"session_id": outcome.session_id, "error": str(outcome.cause)}) + "\n")
            else:
                summary.write(_dump(outcome.summary()) + "\n")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace, argv: Sequence[str]) -> int:
    if args.source == "mathdial":
        sessions, report = datasets.load_mathdial(args.input, split=args.split)
    elif args.source == "comta":
        sessions, report = datasets.load_comta(args.input, goal_filter=args.goal_filter, sidecar=args.sidecar)
    else:
        sessions, report = datasets.load_canonical(args.input)
    datasets.write_sessions(args.output, sessions)
    report_path = Path(str(args.output) + ".report.json")
    _write_json(report_path, report.to_dict())
    print(f"emitted {report.emitted} session(s), dropped {len(report.dropped)} of {report.total_raw} -> {args.output}")
    return 0


def cmd_kc_tag(args: argparse.Namespace, argv: Sequence[str]) -> int:
    sessions = load_dataset(args)
    config = resolve_config(args, sessions)
    provider = build_provider(args)
    tagged, report = datasets.tag_kcs(sessions, provider, args.cache, config)
    datasets.write_sessions(args.output, tagged)
    print(
        f"tagged {len(report.tagged)}, from cache {len(report.from_cache)}, failed {len(report.failed)} -> {args.output}"
    )
    return 0 if not report.failed else 2


def cmd_diagnose(args: argparse.Namespace, argv: Sequence[str]) -> int:
    sessions = load_dataset(args)
    _require_kcs(sessions)
    config = resolve_config(args, sessions)
    provider = build_provider(args)
    run_dir = start_run(args, argv, config)
    outcomes = run_many(DiagnosisEngine(provider, config), sessions, args.workers)
    write_session_outputs(run_dir, outcomes)
    failed = sum(isinstance(o, SessionRunError) for o in outcomes)
    print(f"diagnosed {len(outcomes) - failed}/{len(outcomes)} session(s) -> {run_dir}")
    return 0 if not failed else 2


def _evaluate_into(run_dir: Path, sessions, provider, config: EngineConfig, workers: int):
    config = eval_config(config)
    outcomes = run_many(DiagnosisEngine(provider, config), sessions, workers)
    write_session_outputs(run_dir, outcomes)
    records, report = score_runs(sessions, outcomes, config)
    emit_report(report, records, run_dir)
    return report


def cmd_evaluate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    sessions = load_dataset(args)
    _require_kcs(sessions)
    config = eval_config(resolve_config(args, sessions))
    provider = build_provider(args)
    run_dir = start_run(args, argv, config)
    report = _evaluate_into(run_dir, sessions, provider, config, args.workers)
    fmt = lambda v: "n/a" if v is None else f"{v:.2f}"  # noqa: E731
    print(f"n={report.n} ACC={fmt(report.acc)} F1={fmt(report.f1)} failed={len(report.failed)} -> {run_dir}")
    return 0


def cmd_ablate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    sessions = load_dataset(args)
    _require_kcs(sessions)
    base = eval_config(resolve_config(args, sessions))
    provider = build_provider(args)
    run_dir = start_run(args, argv, base, {"variants": list(ABLATIONS)})
    rows = []
    for name, flags in ABLATIONS.items():
        sub = run_dir / name
        sub.mkdir()
        report = _evaluate_into(sub, sessions, provider, replace(base, **flags), args.workers)
        rows.append({"variant": name, "label": config_label(report.config_snapshot), **report.to_dict()})
    _write_json(run_dir / "ablation.json", rows)
    fmt = lambda v: "n/a" if v is None else f"{v:.2f}"  # noqa: E731
    lines = ["# Ablation", "", "| Variant | n | ACC | F1 |", "|---|---|---|---|"]
    lines += [f"| {r['label']} | {r['n']} | {fmt(r['acc'])} | {fmt(r['f1'])} |" for r in rows]
    lines += ["", "Evaluation runs without a reflection signal, so reflector-on and reflector-off rows match."]
    (run_dir / "ablation.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines[2:-2]))
    return 0


def cmd_simulate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    unknown = [p for p in policies if p not in POLICIES]
    if unknown or not policies:
        raise UsageError(f"--policies must be a comma list drawn from {','.join(POLICIES)}")
    sessions = load_dataset(args)
    pool = simulation_pool(sessions)
    _require_kcs(pool)
    config = resolve_config(args, pool)
    provider = build_provider(args)
    run_dir = start_run(args, argv, config, {"policies": policies, "student_model": args.student_model or ""})

    jobs = [(s, p) for s in pool for p in policies]

    def one(job) -> SimEpisode:
        session, policy = job
        try:
            return run_episode(session, policy, provider, config, student_model=args.student_model)
        except EpisodeError as exc:
            log.error("%s", exc)
            return exc.episode

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as ex:
            episodes = list(ex.map(one, jobs))
    else:
        episodes = [one(j) for j in jobs]

    with (run_dir / "episodes.jsonl").open("w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(_dump(ep.to_dict()) + "\n")
    grouped = {p: [e for e in episodes if e.policy == p] for p in policies}
    metrics = compute_sim_metrics(grouped)
    _write_json(run_dir / "sim_metrics.json", [m.to_dict() for m in metrics])
    table = sim_metrics_table(metrics)
    (run_dir / "sim_report.md").write_text("# Tutoring simulation\n\n" + table + "\n", encoding="utf-8")
    print(table)
    return 0


def _compare_dirs(a: Path, b: Path) -> list[str]:
    names = lambda d: {p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file() and p.name != MANIFEST}  # noqa: E731
    left, right = names(a), names(b)
    diffs = sorted(left ^ right)
    for rel in sorted(left & right):
        if (a / rel).read_bytes() != (b / rel).read_bytes():
            diffs.append(rel)
    return diffs


def cmd_replay_check(args: argparse.Namespace, argv: Sequence[str]) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / MANIFEST
    if not manifest_path.exists():
        raise UsageError(f"{manifest_path} not found")
    if not args.cassette:
        raise UsageError("replay-check needs --cassette")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if Path(manifest["dataset"]).exists() and file_digest(manifest["dataset"]) != manifest["dataset_digest"]:
        raise RuntimeError(f"dataset {manifest['dataset']} changed since the run was recorded")

    with tempfile.TemporaryDirectory(prefix="parld-replay-") as tmp:
        cfg_path = Path(tmp) / "config.json"
        _write_json(cfg_path, manifest["config"])
        rerun = _strip_flags(manifest["argv"], {"--provider", "--cassette", "--out", "--config", "--run-id", "--script"})
        rerun += [
            "--provider", "replay", "--cassette", str(args.cassette), "--out", str(Path(tmp) / "out"),
            "--config", str(cfg_path), "--run-id", manifest["run_id"],
        ]
        with contextlib.redirect_stdout(io.StringIO()):
            code = dispatch(rerun)
        if code != 0:
            print(f"replay failed with exit code {code}", file=sys.stderr)
            return 2
        diffs = _compare_dirs(run_dir, Path(tmp) / "out" / manifest["run_id"])
    if diffs:
        print("different: " + ", ".join(diffs))
        return 2
    print("identical")
    return 0


def _strip_flags(argv: Sequence[str], flags: set[str]) -> list[str]:
    out: list[str] = []
    skip = False
    for tok in argv:
        if skip:
            skip = False
            continue
        name = tok.split("=", 1)[0]
        if name in flags:
            skip = "=" not in tok
            continue
        out.append(tok)
    return out


COMMANDS = {
    "ingest": cmd_ingest,
    "kc-tag": cmd_kc_tag,
    "diagnose": cmd_diagnose,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "simulate": cmd_simulate,
    "replay-check": cmd_replay_check,
}


def dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"parld: error: {exc}", file=sys.stderr)
        return 1
    except (ProviderError, RuntimeError, OSError, ValueError) as exc:
        print(f"parld: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main(argv: Sequence[str] | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
