"""Text renderings of domain records used as prompt slot values."""

from __future__ import annotations

import json
from typing import Sequence

from .models import (
    CognitiveState,
    ConversationMemory,
    DialogueTurn,
    Question,
    TurnTrace,
    ZpdBehaviorSchema,
    serialize_state,
)

EMPTY_UTTERANCE = "(empty utterance)"


def format_kcs(question: Question) -> str:
    return "\n".join(f"{kc.id}: {kc.name}" for kc in question.kcs)


def format_question(question: Question) -> str:
    return question.text.strip()


def format_turn(turn: DialogueTurn) -> str:
    tutor = turn.tutor_utterance.strip() or EMPTY_UTTERANCE
    student = turn.student_utterance.strip() or EMPTY_UTTERANCE
    return f"Tutor: {tutor}\nStudent: {student}"


def format_transcript(turns: Sequence[DialogueTurn]) -> str:
    if not turns:
        return "(no turns yet)"
    return "\n".join(f"[Turn {t.index}]\n{format_turn(t)}" for t in turns)


def format_schema(schema: ZpdBehaviorSchema) -> str:
    body = schema.to_dict()
    body.pop("turn_index")
    return json.dumps({k.capitalize(): v for k, v in body.items()}, ensure_ascii=False, indent=2)


def format_state(state: CognitiveState, question: Question) -> str:
    return serialize_state(state, question.kc_ids)


def _trace_full(trace: TurnTrace, question: Question) -> str:
    lines = [f"## Turn {trace.turn_index}", format_turn(trace.dialogue)]
    if trace.schema is not None:
        lines += ["ZPD-Behavior schema:", format_schema(trace.schema)]
    for i, (state, pred) in enumerate(zip(trace.states, trace.predictions)):
        label = "Cognitive state" if i == 0 else f"Cognitive state (rerun {i})"
        lines += [f"{label}:", format_state(state, question)]
        lines.append(f"Prediction: {pred.label.value} - {pred.rationale}")
    for r in trace.reflections:
        lines.append(f"Reflection {r.attempt}: {r.judgment.value} - {r.critique}")
    if trace.observed is not None:
        lines.append(f"Observed: {'correct' if trace.observed else 'not correct'}")
    return "\n".join(lines)


def _trace_line(trace: TurnTrace) -> str:
    levels = ", ".join(f"{k}={v.level.value}" for k, v in trace.final_state.entries.items())
    return f"## Turn {trace.turn_index} (summary): {levels}; predicted {trace.final_prediction.label.value}"


def format_memory(memory: ConversationMemory, question: Question, char_budget: int = 24_000, keep_last: int = 3) -> str:
    """Full traces while they fit in ``char_budget``; otherwise the last
    ``keep_last`` traces in full plus one summary line per earlier trace."""
    if not memory.traces:
        return "(empty)"
    full = [_trace_full(t, question) for t in memory.traces]
    text = "\n\n".join(full)
    if len(text) <= char_budget:
        return text
    head = [_trace_line(t) for t in memory.traces[:-keep_last]]
    return "\n".join(head) + "\n\n" + "\n\n".join(full[-keep_last:])
