"""Adapters from raw MathDial / CoMTA files to canonical session records.

Canonical sessions are JSON lines (``*.sessions.jsonl``), one
``Session.to_dict()`` per line. Malformed raw records never abort a batch;
they are dropped and listed in the ``IngestReport``.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Literal

from .llm import CompletionRequest, Provider, complete_structured
from .llm.structured import StructuredOutputError
from .models import (
    META_LEADING_STUDENT,
    META_TRUNCATED_FINAL,
    DialogueTurn,
    EngineConfig,
    KnowledgeConcept,
    Question,
    Session,
    Split,
    ValidationError,
)
from .prompts import PromptRegistry, default_registry

log = logging.getLogger(__name__)

Source = Literal["mathdial", "comta", "canonical"]

MATHDIAL_TOTAL = 2861
COMTA_TOTAL = 188
COMTA_GOAL_SUBSET = 116


@dataclass
class IngestReport:
    source: Source
    total_raw: int = 0
    emitted: int = 0
    dropped: list[tuple[str, str]] = field(default_factory=list)

    def drop(self, raw_id: str, reason: str) -> None:
        log.info("%s: dropping %s (%s)", self.source, raw_id, reason)
        self.dropped.append((raw_id, reason))

    def merge(self, other: "IngestReport") -> "IngestReport":
        return IngestReport(
            self.source,
            self.total_raw + other.total_raw,
            self.emitted + other.emitted,
            self.dropped + other.dropped,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "source": self.source,
            "total_raw": self.total_raw,
            "emitted": self.emitted,
            "dropped": [{"raw_id": r, "reason": why} for r, why in self.dropped],
        }


def pair_turns(utterances: Iterable[tuple[bool, str]]) -> tuple[list[DialogueTurn], dict[str, str]]:
    """Group ``(is_tutor, text)`` utterances into (tutor, student) turns.

    Consecutive utterances by the same speaker are joined with a newline. A
    transcript that opens with the student gets an empty tutor utterance on
    turn 1; one that ends with the tutor gets an empty final student
    utterance. Both cases are flagged in the returned meta.
    """
    turns: list[DialogueTurn] = []
    tutor: list[str] = []
    student: list[str] = []

    def flush() -> None:
        turns.append(DialogueTurn(len(turns) + 1, "\n".join(tutor), "\n".join(student)))
        tutor.clear()
        student.clear()

    for is_tutor, text in utterances:
        text = text.strip()
        if not text:
            continue
        if is_tutor:
            if student:
                flush()
            tutor.append(text)
        else:
            student.append(text)
    if tutor or student:
        flush()
    meta: dict[str, str] = {}
    if turns and turns[0].tutor_utterance == "":
        meta[META_LEADING_STUDENT] = "true"
    if turns and turns[-1].student_utterance == "":
        meta[META_TRUNCATED_FINAL] = "true"
    return turns, meta


_NUMBER_RE = re.compile(r"-?\d[\d,]*(?:\.\d+)?|-?\.\d+")


def final_number(text: str) -> str | None:
    """Last number in ``text`` with thousands separators removed."""
    if "####" in text:
        text = text.rsplit("####", 1)[1]
    found = _NUMBER_RE.findall(text)
    if not found:
        return None
    value = found[-1].replace(",", "")
    if "." in value:
        value = value.rstrip("0").rstrip(".") or "0"
    return value


# --------------------------------------------------------------------------
# MathDial
# --------------------------------------------------------------------------

_MOVE_RE = re.compile(r"^\s*\((?:[a-z_\- ]+)\)\s*", re.IGNORECASE)


def parse_mathdial_conversation(conversation: str) -> list[tuple[bool, str]]:
    out: list[tuple[bool, str]] = []
    for chunk in conversation.split("|EOM|"):
        if not chunk.strip():
            continue
        if ":" not in chunk:
            raise ValueError(f"utterance without speaker: {chunk[:40]!r}")
        speaker, text = chunk.split(":", 1)
        out.append((speaker.strip().lower() == "teacher", _MOVE_RE.sub("", text, count=1)))
    return out


def _student_name(conversation: str) -> str:
    for chunk in conversation.split("|EOM|"):
        speaker = chunk.split(":", 1)[0].strip()
        if speaker and speaker.lower() != "teacher":
            return speaker
    return ""


def mathdial_label(value: Any) -> int:
    """``self-correctness`` annotation to a binary mastery label.

    Only a plain "Yes" counts as mastered; "Yes, but I had to reveal the
    answer" means the student did not get there alone.
    """
    text = str(value).strip().lower()
    if text == "yes":
        return 1
    if text.startswith("no") or text.startswith("yes,"):
        return 0
    raise ValueError(f"unrecognized self-correctness value {value!r}")


def _mathdial_record(rec: dict[str, Any], split: Split, lineno: int) -> Session:
    for key in ("question", "ground_truth", "conversation"):
        if not str(rec.get(key) or "").strip():
            raise ValueError(f"missing {key}")
    if "self-correctness" not in rec:
        raise ValueError("missing self-correctness annotation")
    label = mathdial_label(rec["self-correctness"])
    turns, meta = pair_turns(parse_mathdial_conversation(rec["conversation"]))
    if not turns:
        raise ValueError("empty conversation")
    qid = str(rec.get("qid", lineno))
    solution = str(rec["ground_truth"])
    meta.update(
        source="mathdial",
        student_profile=str(rec.get("student_profile", "")),
        solution=solution,
        student_incorrect_solution=str(rec.get("student_incorrect_solution", "")),
        self_correctness=str(rec["self-correctness"]),
    )
    question = Question(id=f"mathdial-{qid}", text=str(rec["question"]), answer=final_number(solution) or solution.strip())
    return Session(
        session_id=f"mathdial-{split.value}-{lineno:05d}",
        student_id=_student_name(rec["conversation"]),
        question=question,
        turns=tuple(turns),
        final_label=label,
        split=split,
        meta=meta,
    )


def _read_jsonl(path: Path, report: IngestReport, id_prefix: str) -> Iterable[tuple[int, str, dict | None]]:
    with path.open(encoding="utf-8") as fh:
        lineno = 0
        for line in fh:
            if not line.strip():
                continue
            lineno += 1
            report.total_raw += 1
            raw_id = f"{id_prefix}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                report.drop(raw_id, f"invalid JSON: {exc.msg}")
                continue
            if not isinstance(rec, dict):
                report.drop(raw_id, "record is not an object")
                continue
            yield lineno, raw_id, rec


def _read_csv(path: Path, report: IngestReport, id_prefix: str) -> Iterable[tuple[int, str, dict | None]]:
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 1):
            report.total_raw += 1
            yield lineno, f"{id_prefix}:{lineno}", row


def _read_records(path: Path, report: IngestReport) -> Iterable[tuple[int, str, dict | None]]:
    reader = _read_csv if path.suffix.lower() == ".csv" else _read_jsonl
    return reader(path, report, path.name)


def _split_file(directory: Path, name: str) -> Path:
    for suffix in (".jsonl", ".csv"):
        if (directory / f"{name}{suffix}").exists():
            return directory / f"{name}{suffix}"
    return directory / f"{name}.jsonl"


def load_mathdial(path: str | Path, split: str = "all") -> tuple[list[Session], IngestReport]:
    """Load MathDial from one ``.jsonl``/``.csv`` file or a directory holding
    ``train`` / ``test`` files in either format. ``split`` is ``train``,
    ``test`` or ``all``.
    """
    path = Path(path)
    if split not in ("train", "test", "all"):
        raise ValueError(f"bad split {split!r}")
    if path.is_dir():
        wanted = ["train", "test"] if split == "all" else [split]
        files = [(_split_file(path, name), Split(name)) for name in wanted]
        missing = [str(f) for f, _ in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing MathDial file(s): {missing}")
    else:
        guess = Split.TEST if "test" in path.name else Split.TRAIN if "train" in path.name else Split.UNSPLIT
        files = [(path, Split(split) if split != "all" else guess)]

    sessions: list[Session] = []
    report = IngestReport("mathdial")
    for file, file_split in files:
        for lineno, raw_id, rec in _read_records(file, report):
            try:
                sessions.append(_mathdial_record(rec, file_split, lineno))
            except (ValueError, KeyError, TypeError) as exc:
                report.drop(raw_id, str(exc))
    report.emitted = len(sessions)
    return sessions, report


# --------------------------------------------------------------------------
# CoMTA
# --------------------------------------------------------------------------

_COMTA_TUTOR_ROLES = {"assistant", "tutor", "teacher", "system"}


def read_id_list(path: str | Path) -> list[str]:
    """Sidecar id list: a JSON array or one id per line (``#`` comments allowed)."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.strip()
    if stripped.startswith("["):
        return [str(x) for x in json.loads(stripped)]
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.strip().startswith("#")]


def _comta_record(rec: dict[str, Any], index: int) -> tuple[str, Session]:
    raw_id = str(rec.get("test_id", rec.get("id", index)))
    data = rec.get("data")
    if not isinstance(data, list) or not data:
        raise ValueError("missing conversation data")
    if "expected_result" not in rec:
        raise ValueError("missing expected_result")
    utterances = []
    for msg in data:
        role = str(msg.get("role", "")).lower()
        utterances.append((role in _COMTA_TUTOR_ROLES, str(msg.get("content", ""))))
    turns, meta = pair_turns(utterances)
    if not turns:
        raise ValueError("empty conversation")
    first_student = next((text for is_tutor, text in utterances if not is_tutor and text.strip()), "")
    question_text = str(rec.get("question") or first_student)
    meta.update(
        source="comta",
        math_level=str(rec.get("math_level", "")),
        expected_result=str(rec["expected_result"]),
    )
    label = 1 if str(rec["expected_result"]).strip().lower() == "answer accepted" else 0
    session = Session(
        session_id=f"comta-{raw_id}",
        student_id=str(rec.get("student_id", "")),
        question=Question(id=f"comta-{raw_id}", text=question_text, answer=str(rec.get("answer", ""))),
        turns=tuple(turns),
        final_label=label,
        split=Split.UNSPLIT,
        meta=meta,
    )
    return raw_id, session


def load_comta(
    path: str | Path, goal_filter: bool = False, sidecar: str | Path | None = None
) -> tuple[list[Session], IngestReport]:
    """Load CoMTA (a JSON array, or JSON lines). With ``goal_filter`` only the
    conversations listed in the ``sidecar`` id file are emitted."""
    path = Path(path)
    if goal_filter and (sidecar is None or not Path(sidecar).exists()):
        raise FileNotFoundError("goal filter requested but the sidecar id list is missing")
    goal_ids = set(read_id_list(sidecar)) if sidecar is not None else None

    text = path.read_text(encoding="utf-8")
    report = IngestReport("comta")
    records: list[Any]
    if text.lstrip().startswith("["):
        records = json.loads(text)
    else:
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    records.append(ValueError(f"invalid JSON at line {lineno}: {exc.msg}"))

    sessions: list[Session] = []
    seen_ids: set[str] = set()
    for index, rec in enumerate(records):
        report.total_raw += 1
        if isinstance(rec, Exception) or not isinstance(rec, dict):
            report.drop(f"comta:{index}", str(rec) if isinstance(rec, Exception) else "record is not an object")
            continue
        try:
            raw_id, session = _comta_record(rec, index)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            report.drop(f"comta:{index}", str(exc))
            continue
        seen_ids.update({raw_id, session.session_id})
        if goal_ids is not None:
            clear = raw_id in goal_ids or session.session_id in goal_ids
            session = replace(session, meta={**session.meta, "goal_clear": "true" if clear else "false"})
            if goal_filter and not clear:
                report.drop(raw_id, "no clear conversational goal")
                continue
        sessions.append(session)
    if goal_ids is not None:
        for unknown in sorted(goal_ids - seen_ids):
            log.warning("sidecar lists id %r which is not in %s; ignored", unknown, path)
    report.emitted = len(sessions)
    return sessions, report


# --------------------------------------------------------------------------
# Canonical format
# --------------------------------------------------------------------------


def write_sessions(path: str | Path, sessions: Iterable[Session]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def load_canonical(path: str | Path) -> tuple[list[Session], IngestReport]:
    report = IngestReport("canonical")
    sessions: list[Session] = []
    path = Path(path)
    for lineno, raw_id, rec in _read_jsonl(path, report, path.name):
        try:
            sessions.append(Session.from_dict(rec))
        except (ValidationError, ValueError, KeyError, TypeError) as exc:
            report.drop(raw_id, str(exc))
    report.emitted = len(sessions)
    return sessions, report


def read_sessions(path: str | Path) -> list[Session]:
    sessions, report = load_canonical(path)
    if report.dropped:
        raise ValidationError(f"{path}: {len(report.dropped)} invalid record(s), first: {report.dropped[0]}")
    return sessions


# --------------------------------------------------------------------------
# KC tagging
# --------------------------------------------------------------------------


@dataclass
class TagReport:
    tagged: list[str] = field(default_factory=list)
    from_cache: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, list[str]]:
        return {"tagged": self.tagged, "from_cache": self.from_cache, "failed": self.failed}


class KcCache:
    """Question id -> KC list, persisted as ``*.kc-cache.json``."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self.data: dict[str, list[dict[str, str]]] = {}
        if self.path is not None and self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))

    def get(self, question_id: str) -> tuple[KnowledgeConcept, ...] | None:
        entry = self.data.get(question_id)
        if entry is None:
            return None
        return tuple(KnowledgeConcept.from_dict(k) for k in entry)

    def put(self, question_id: str, kcs: tuple[KnowledgeConcept, ...]) -> None:
        with self._lock:
            self.data[question_id] = [k.to_dict() for k in kcs]
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
                tmp.replace(self.path)


def tag_kcs(
    sessions: Iterable[Session],
    provider: Provider,
    cache_path: str | Path | None = None,
    config: EngineConfig | None = None,
    registry: PromptRegistry | None = None,
) -> tuple[list[Session], TagReport]:
    """Give every KC-less question 1-5 KCs from the tagger prompt.

    Results are cached by question id, so a second pass makes no calls.
    Questions that already carry KCs are returned unchanged.
    """
    config = config or EngineConfig()
    template = (registry or default_registry()).get("kc_tagger")
    cache = KcCache(cache_path)
    report = TagReport()
    out: list[Session] = []
    for session in sessions:
        q = session.question
        if q.kcs:
            out.append(session)
            continue
        kcs = cache.get(q.id)
        if kcs is not None:
            report.from_cache.append(q.id)
        else:
            slots = {"question": q.text}
            solution = session.meta.get("solution") or q.answer
            if solution:
                slots["answer"] = solution
            request = CompletionRequest(
                model=config.model_name,
                messages=tuple(template.render(slots)),
                temperature=config.temperature,
                max_tokens=config.max_tokens,
                json_mode=template.json_mode,
                tag=template.tag,
            )
            try:
                result = complete_structured(provider, request, "kc_tags", config.structured_retry_limit)
            except StructuredOutputError as exc:
                log.warning("KC tagging failed for %s: %s", q.id, exc)
                report.failed.append(q.id)
                out.append(session)
                continue
            kcs = tuple(KnowledgeConcept(name) for name in result.value.kcs)
            cache.put(q.id, kcs)
            report.tagged.append(q.id)
        out.append(replace(session, question=replace(q, kcs=kcs)))
    return out, report
