"""Domain records for conversational learning diagnosis.

Every record is a frozen dataclass. Anything that "changes" (memory, states)
is replaced by a new value, so records can be shared between worker threads.
Each record has ``to_dict`` / ``from_dict`` for the JSON artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence


class ValidationError(ValueError):
    """A record violates one of its invariants."""


class MasteryLevel(str, Enum):
    GOOD = "Good"
    FAIR = "Fair"
    POOR = "Poor"
    UNKNOWN = "Unknown"

    @classmethod
    def parse(cls, value: str, *, allow_unknown: bool = True) -> "MasteryLevel":
        text = str(value).strip()
        for level in cls:
            if level.value.lower() == text.lower():
                if level is cls.UNKNOWN and not allow_unknown:
                    break
                return level
        raise ValidationError(f"unknown mastery level {value!r}")


class PredictionLabel(str, Enum):
    MASTERED = "Mastered"
    NOT_MASTERED = "NotMastered"

    @property
    def as_int(self) -> int:
        return 1 if self is PredictionLabel.MASTERED else 0

    @classmethod
    def from_int(cls, value: int) -> "PredictionLabel":
        return cls.MASTERED if int(value) == 1 else cls.NOT_MASTERED


class Judgment(str, Enum):
    ACCURATE = "Accurate"
    INACCURATE = "Inaccurate"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"
    UNSPLIT = "unsplit"


class ReflectionSignal(str, Enum):
    NONE = "none"
    PER_TURN_CORRECTNESS = "per_turn_correctness"
    FINAL_LABEL = "final_label"


# --------------------------------------------------------------------------
# Session data
# --------------------------------------------------------------------------


def normalize_kc_id(kc_id: str) -> str:
    return str(kc_id).strip()


@dataclass(frozen=True)
class KnowledgeConcept:
    id: str
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "id", normalize_kc_id(self.id))
        if not self.id:
            raise ValidationError("knowledge concept id must be non-empty")
        if not self.name:
            object.__setattr__(self, "name", self.id)

    def to_dict(self) -> dict[str, str]:
        return {"id": self.id, "name": self.name}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KnowledgeConcept":
        return cls(id=data["id"], name=data.get("name", ""))


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    answer: str = ""
    kcs: tuple[KnowledgeConcept, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kcs", tuple(self.kcs))
        if not self.text.strip():
            raise ValidationError(f"question {self.id!r} has empty text")
        ids = [kc.id for kc in self.kcs]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"question {self.id!r} has duplicate KC ids")

    @property
    def kc_ids(self) -> tuple[str, ...]:
        return tuple(kc.id for kc in self.kcs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "answer": self.answer,
            "kcs": [kc.to_dict() for kc in self.kcs],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Question":
        return cls(
            id=str(data["id"]),
            text=data["text"],
            answer=data.get("answer", ""),
            kcs=tuple(KnowledgeConcept.from_dict(k) for k in data.get("kcs", [])),
        )


@dataclass(frozen=True)
class DialogueTurn:
    index: int
    tutor_utterance: str
    student_utterance: str

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValidationError(f"turn index must be >= 1, got {self.index}")

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "tutor": self.tutor_utterance, "student": self.student_utterance}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DialogueTurn":
        return cls(
            index=int(data["index"]),
            tutor_utterance=data.get("tutor", ""),
            student_utterance=data.get("student", ""),
        )


# meta flags set by the dataset adapters
META_LEADING_STUDENT = "leading_student"
META_TRUNCATED_FINAL = "truncated_final_turn"


@dataclass(frozen=True)
class Session:
    session_id: str
    student_id: str
    question: Question
    turns: tuple[DialogueTurn, ...]
    final_label: int
    split: Split = Split.UNSPLIT
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in dict(self.meta).items()})
        self.validate()

    def validate(self) -> None:
        if self.final_label not in (0, 1):
            raise ValidationError(f"session {self.session_id}: final_label must be 0 or 1")
        expected = list(range(1, len(self.turns) + 1))
        if [t.index for t in self.turns] != expected:
            raise ValidationError(f"session {self.session_id}: turn indices must be 1..T without gaps")
        last = len(self.turns)
        for turn in self.turns:
            if turn.tutor_utterance == "" and not (
                turn.index == 1 and self.meta.get(META_LEADING_STUDENT) == "true"
            ) and not (turn.index == last and self.meta.get(META_TRUNCATED_FINAL) == "true"):
                raise ValidationError(f"session {self.session_id}: turn {turn.index} has empty tutor utterance")
            if turn.student_utterance == "" and not (
                turn.index == last and self.meta.get(META_TRUNCATED_FINAL) == "true"
            ):
                raise ValidationError(f"session {self.session_id}: turn {turn.index} has empty student utterance")

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "student_id": self.student_id,
            "question": self.question.to_dict(),
            "turns": [t.to_dict() for t in self.turns],
            "final_label": self.final_label,
            "split": self.split.value,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Session":
        return cls(
            session_id=str(data["session_id"]),
            student_id=str(data.get("student_id", "")),
            question=Question.from_dict(data["question"]),
            turns=tuple(DialogueTurn.from_dict(t) for t in data["turns"]),
            final_label=int(data["final_label"]),
            split=Split(data.get("split", "unsplit")),
            meta=data.get("meta", {}),
        )


# --------------------------------------------------------------------------
# Diagnosis records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KcDiagnosis:
    level: MasteryLevel
    explanation: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "level", MasteryLevel(self.level))
        if self.level is not MasteryLevel.UNKNOWN and not self.explanation.strip():
            raise ValidationError("explanation must be non-empty for a diagnosed KC")

    def to_dict(self) -> dict[str, str]:
        return {"level": self.level.value, "explanation": self.explanation}


@dataclass(frozen=True)
class CognitiveState:
    turn_index: int
    entries: Mapping[str, KcDiagnosis]

    def __post_init__(self) -> None:
        if self.turn_index < 0:
            raise ValidationError("turn_index must be >= 0")
        object.__setattr__(self, "entries", dict(self.entries))

    def covers(self, question: Question) -> bool:
        return set(self.entries) == set(question.kc_ids)

    def to_dict(self, kc_order: Sequence[str] | None = None) -> dict[str, Any]:
        keys = list(kc_order) if kc_order is not None else sorted(self.entries)
        extra = sorted(set(self.entries) - set(keys))
        return {
            "turn_index": self.turn_index,
            "entries": {k: self.entries[k].to_dict() for k in [*keys, *extra] if k in self.entries},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CognitiveState":
        entries = {}
        for key, value in data["entries"].items():
            try:
                level = MasteryLevel.parse(value["level"])
            except ValidationError:
                raise ValidationError(
                    f"entry {key!r} has unknown mastery level {value['level']!r}"
                ) from None
            entries[key] = KcDiagnosis(level, value.get("explanation", ""))
        return cls(turn_index=int(data["turn_index"]), entries=entries)


UNKNOWN_EXPLANATION = "no evidence yet"
CARRIED_FORWARD = "carried forward"


def initial_state(question: Question) -> CognitiveState:
    """All-Unknown state used as the prior for turn 1."""
    if not question.kcs:
        raise ValidationError("question has no KCs")
    return CognitiveState(
        turn_index=0,
        entries={
            kc.id: KcDiagnosis(MasteryLevel.UNKNOWN, UNKNOWN_EXPLANATION) for kc in question.kcs
        },
    )


def serialize_state(state: CognitiveState, kc_order: Sequence[str] | None = None) -> str:
    """Canonical JSON text of a state.

    Keys follow ``kc_order`` (normally the question's KC list), falling back
    to sorted order, so equal states always serialize to identical bytes.
    """
    return json.dumps(state.to_dict(kc_order), ensure_ascii=False, indent=2)


def deserialize_state(text: str) -> CognitiveState:
    return CognitiveState.from_dict(json.loads(text))


def describe_state(state: CognitiveState, kc_order: Sequence[str] | None = None) -> str:
    """One ``kc: Level - explanation`` line per KC, for human-facing prompts."""
    keys = list(kc_order) if kc_order is not None else sorted(state.entries)
    return "\n".join(
        f"{k}: {state.entries[k].level.value} - {state.entries[k].explanation}"
        for k in keys
        if k in state.entries
    )


@dataclass(frozen=True)
class BehaviorItem:
    description: str
    kc_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "kc_ids", tuple(normalize_kc_id(k) for k in self.kc_ids))
        if not self.description.strip():
            raise ValidationError("behavior description must be non-empty")
        if not self.kc_ids:
            raise ValidationError("behavior item must reference at least one KC")

    def to_dict(self) -> dict[str, Any]:
        return {"description": self.description, "kc_ids": list(self.kc_ids)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BehaviorItem":
        return cls(description=data["description"], kc_ids=tuple(data["kc_ids"]))


ZONES = ("mastered", "acquirable", "inaccessible")


@dataclass(frozen=True)
class ZpdBehaviorSchema:
    turn_index: int
    mastered: tuple[BehaviorItem, ...] = ()
    acquirable: tuple[BehaviorItem, ...] = ()
    inaccessible: tuple[BehaviorItem, ...] = ()

    def __post_init__(self) -> None:
        for zone in ZONES:
            object.__setattr__(self, zone, tuple(getattr(self, zone)))
        if self.turn_index < 1:
            raise ValidationError("schema turn_index must be >= 1")
        if not (self.mastered or self.acquirable or self.inaccessible):
            raise ValidationError("ZPD schema has no behaviors in any zone")
        seen: set[BehaviorItem] = set()
        for zone in ZONES:
            for item in getattr(self, zone):
                if item in seen:
                    raise ValidationError(f"behavior duplicated across zones: {item.description!r}")
                seen.add(item)

    def items(self) -> Iterable[tuple[str, BehaviorItem]]:
        for zone in ZONES:
            for item in getattr(self, zone):
                yield zone, item

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"turn_index": self.turn_index}
        for zone in ZONES:
            out[zone] = [i.to_dict() for i in getattr(self, zone)]
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ZpdBehaviorSchema":
        return cls(
            turn_index=int(data["turn_index"]),
            **{z: tuple(BehaviorItem.from_dict(i) for i in data.get(z, [])) for z in ZONES},
        )


@dataclass(frozen=True)
class PerformancePrediction:
    turn_index: int
    label: PredictionLabel
    rationale: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", PredictionLabel(self.label))
        if not self.rationale.strip():
            raise ValidationError("prediction rationale must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"turn_index": self.turn_index, "label": self.label.value, "rationale": self.rationale}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PerformancePrediction":
        return cls(int(data["turn_index"]), PredictionLabel(data["label"]), data["rationale"])


@dataclass(frozen=True)
class ReflectionResult:
    judgment: Judgment
    critique: str
    attempt: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "judgment", Judgment(self.judgment))
        if self.attempt < 1:
            raise ValidationError("reflection attempt must be >= 1")
        if self.judgment is Judgment.INACCURATE and not self.critique.strip():
            raise ValidationError("an Inaccurate judgment needs a critique")

    def to_dict(self) -> dict[str, Any]:
        return {"judgment": self.judgment.value, "critique": self.critique, "attempt": self.attempt}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReflectionResult":
        return cls(Judgment(data["judgment"]), data["critique"], int(data["attempt"]))


@dataclass(frozen=True)
class Exchange:
    """Audit entry for one provider call."""

    template_id: str
    template_version: str
    request_key: str
    response_digest: str

    def to_dict(self) -> dict[str, str]:
        return {
            "template_id": self.template_id,
            "template_version": self.template_version,
            "request_key": self.request_key,
            "response_digest": self.response_digest,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Exchange":
        return cls(**{k: str(data[k]) for k in ("template_id", "template_version", "request_key", "response_digest")})


@dataclass(frozen=True)
class TurnTrace:
    turn_index: int
    dialogue: DialogueTurn
    schema: ZpdBehaviorSchema | None
    states: tuple[CognitiveState, ...]
    predictions: tuple[PerformancePrediction, ...]
    reflections: tuple[ReflectionResult, ...] = ()
    raw_llm_exchanges: tuple[Exchange, ...] = ()
    observed: int | None = None
    kc_order: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("states", "predictions", "reflections", "raw_llm_exchanges", "kc_order"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.states) != len(self.predictions):
            raise ValidationError("trace needs one prediction per state")
        if not self.states:
            raise ValidationError("trace has no states")
        reruns = len(self.states) - 1
        # the last reflection may be Accurate, which ends the loop without a rerun
        if len(self.reflections) not in (reruns, reruns + 1):
            raise ValidationError("reflections do not match the number of reruns")

    @property
    def final_state(self) -> CognitiveState:
        return self.states[-1]

    @property
    def final_prediction(self) -> PerformancePrediction:
        return self.predictions[-1]

    def to_dict(self) -> dict[str, Any]:
        order = list(self.kc_order) or None
        return {
            "turn_index": self.turn_index,
            "dialogue": self.dialogue.to_dict(),
            "schema": self.schema.to_dict() if self.schema else None,
            "states": [s.to_dict(order) for s in self.states],
            "predictions": [p.to_dict() for p in self.predictions],
            "reflections": [r.to_dict() for r in self.reflections],
            "raw_llm_exchanges": [e.to_dict() for e in self.raw_llm_exchanges],
            "observed": self.observed,
            "kc_order": list(self.kc_order),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TurnTrace":
        return cls(
            turn_index=int(data["turn_index"]),
            dialogue=DialogueTurn.from_dict(data["dialogue"]),
            schema=ZpdBehaviorSchema.from_dict(data["schema"]) if data.get("schema") else None,
            states=tuple(CognitiveState.from_dict(s) for s in data["states"]),
            predictions=tuple(PerformancePrediction.from_dict(p) for p in data["predictions"]),
            reflections=tuple(ReflectionResult.from_dict(r) for r in data.get("reflections", [])),
            raw_llm_exchanges=tuple(Exchange.from_dict(e) for e in data.get("raw_llm_exchanges", [])),
            observed=data.get("observed"),
            kc_order=tuple(data.get("kc_order", [])),
        )


@dataclass(frozen=True)
class ConversationMemory:
    """Append-only buffer of turn traces for one conversation."""

    session_id: str = ""
    traces: tuple[TurnTrace, ...] = ()

    def __len__(self) -> int:
        return len(self.traces)

    @property
    def last(self) -> TurnTrace | None:
        return self.traces[-1] if self.traces else None


def memory_append(memory: ConversationMemory, trace: TurnTrace) -> ConversationMemory:
    if trace.turn_index != len(memory.traces) + 1:
        raise ValidationError(
            f"non-contiguous trace: expected turn {len(memory.traces) + 1}, got {trace.turn_index}"
        )
    return ConversationMemory(memory.session_id, (*memory.traces, trace))


def memory_purge(memory: ConversationMemory, session_id: str | None = None) -> ConversationMemory:
    return ConversationMemory(memory.session_id if session_id is None else session_id, ())


@dataclass(frozen=True)
class EngineConfig:
    model_name: str = "gpt-4.1"
    temperature: float = 0.0
    max_num: int = 2
    enable_previewer: bool = True
    enable_reflector: bool = True
    reflection_signal: ReflectionSignal = ReflectionSignal.NONE
    structured_retry_limit: int = 2
    memory_char_budget: int = 24_000
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "reflection_signal", ReflectionSignal(self.reflection_signal))
        if self.max_num < 0:
            raise ValidationError("max_num must be >= 0")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.structured_retry_limit < 0:
            raise ValidationError("structured_retry_limit must be >= 0")

    @property
    def reflection_active(self) -> bool:
        return self.enable_reflector and self.reflection_signal is not ReflectionSignal.NONE

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_name": self.model_name,
            "temperature": self.temperature,
            "max_num": self.max_num,
            "enable_previewer": self.enable_previewer,
            "enable_reflector": self.enable_reflector,
            "reflection_signal": self.reflection_signal.value,
            "structured_retry_limit": self.structured_retry_limit,
            "memory_char_budget": self.memory_char_budget,
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EngineConfig":
        known = cls().to_dict().keys()
        unknown = set(data) - set(known)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))
