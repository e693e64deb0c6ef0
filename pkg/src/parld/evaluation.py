"""Final-turn performance prediction: ACC / F1 over a set of sessions."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .engine import DiagnosisEngine, SessionRunError, SessionRunResult, run_many
from .models import EngineConfig, ReflectionSignal, Session

log = logging.getLogger(__name__)

F1_NOTE = "F1 is binary F1 of the positive class (mastered = 1); 0/0 is reported as 0."


@dataclass(frozen=True)
class EvalRecord:
    session_id: str
    predicted: int
    label: int
    rationale: str = ""

    def __post_init__(self) -> None:
        if self.predicted not in (0, 1) or self.label not in (0, 1):
            raise ValueError("predicted and label must be 0 or 1")


@dataclass
class MetricsReport:
    n: int
    acc: float | None
    f1: float | None
    confusion: dict[str, int]
    config_snapshot: dict[str, Any] = field(default_factory=dict)
    failed: list[dict[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "acc": self.acc,
            "f1": self.f1,
            "confusion": dict(self.confusion),
            "config_snapshot": dict(self.config_snapshot),
            "failed": list(self.failed),
            "f1_definition": F1_NOTE,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricsReport":
        return cls(
            n=int(data["n"]),
            acc=data["acc"],
            f1=data["f1"],
            confusion={k: int(v) for k, v in data["confusion"].items()},
            config_snapshot=dict(data.get("config_snapshot", {})),
            failed=list(data.get("failed", [])),
        )


def compute_metrics(
    records: Sequence[EvalRecord], config_snapshot: Mapping[str, Any] | None = None
) -> MetricsReport:
    tp = sum(1 for r in records if r.predicted == 1 and r.label == 1)
    fp = sum(1 for r in records if r.predicted == 1 and r.label == 0)
    fn = sum(1 for r in records if r.predicted == 0 and r.label == 1)
    tn = sum(1 for r in records if r.predicted == 0 and r.label == 0)
    n = len(records)
    if n == 0:
        acc = f1 = None
    else:
        acc = 100.0 * (tp + tn) / n
        denom = 2 * tp + fp + fn
        f1 = 100.0 * (2 * tp) / denom if denom else 0.0
    return MetricsReport(
        n=n,
        acc=acc,
        f1=f1,
        confusion={"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        config_snapshot=dict(config_snapshot or {}),
    )


def eval_config(config: EngineConfig) -> EngineConfig:
    """Final-turn prediction runs without chain reflection."""
    if config.reflection_signal is not ReflectionSignal.NONE:
        log.warning("evaluation forces reflection_signal=none (was %s)", config.reflection_signal.value)
        return replace(config, reflection_signal=ReflectionSignal.NONE)
    return config


def score_runs(
    sessions: Sequence[Session],
    outcomes: Sequence[SessionRunResult | SessionRunError],
    config: EngineConfig,
) -> tuple[list[EvalRecord], MetricsReport]:
    records: list[EvalRecord] = []
    failed: list[dict[str, str]] = []
    for session, outcome in zip(sessions, outcomes):
        if isinstance(outcome, SessionRunError):
            failed.append({"session_id": session.session_id, "error": str(outcome.cause)})
            continue
        pred = outcome.final_prediction
        records.append(EvalRecord(session.session_id, pred.label.as_int, session.final_label, pred.rationale))
    report = compute_metrics(records, config.to_dict())
    report.failed = failed
    return records, report


def evaluate(
    sessions: Sequence[Session],
    engine: DiagnosisEngine,
    workers: int = 1,
) -> tuple[list[EvalRecord], MetricsReport]:
    config = eval_config(engine.config)
    if config is not engine.config:
        engine = DiagnosisEngine(engine.provider, config, engine.registry)
    outcomes = run_many(engine, sessions, workers)
    return score_runs(sessions, outcomes, config)


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def config_label(config: Mapping[str, Any]) -> str:
    p, r = config.get("enable_previewer", True), config.get("enable_reflector", True)
    if p and r:
        return "ParLD"
    if not p and not r:
        return "w/o P+R"
    return "w/o P" if not p else "w/o R"


def emit_report(report: MetricsReport, records: Sequence[EvalRecord], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    records_path = out / "records.csv"
    with records_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["session_id", "predicted", "label"])
        for r in records:
            writer.writerow([r.session_id, r.predicted, r.label])

    cfg = report.config_snapshot
    c = report.confusion
    lines = [
        "# Performance prediction",
        "",
        F1_NOTE,
        "",
        "| Model | n | ACC | F1 |",
        "|---|---|---|---|",
        f"| {config_label(cfg)} ({cfg.get('model_name', '?')}) | {report.n} | {_fmt(report.acc)} | {_fmt(report.f1)} |",
        "",
        f"Confusion: tp={c['tp']} fp={c['fp']} fn={c['fn']} tn={c['tn']}",
    ]
    if report.failed:
        lines += ["", f"Failed sessions (excluded from n): {len(report.failed)}"]
        lines += [f"- {f['session_id']}: {f['error']}" for f in report.failed]
    report_path = out / "report.md"
    report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [metrics_path, records_path, report_path]
