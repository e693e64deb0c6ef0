from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from parld.models import (
    CognitiveState,
    ConversationMemory,
    DialogueTurn,
    EngineConfig,
    KcDiagnosis,
    KnowledgeConcept,
    MasteryLevel,
    PerformancePrediction,
    PredictionLabel,
    Question,
    ReflectionResult,
    Session,
    TurnTrace,
    ValidationError,
    deserialize_state,
    describe_state,
    initial_state,
    memory_append,
    memory_purge,
    serialize_state,
)

from conftest import make_question, make_session


def _trace(i: int, n_states: int = 1, n_reflections: int = 0) -> TurnTrace:
    q = make_question()
    states = [initial_state(q)] * n_states
    preds = [PerformancePrediction(i, PredictionLabel.NOT_MASTERED, "r")] * n_states
    refl = [ReflectionResult("Inaccurate", "c", k + 1) for k in range(n_reflections)]
    return TurnTrace(i, DialogueTurn(i, "t", "s"), None, states, preds, refl)


def test_kc_id_trimmed_and_name_defaults():
    kc = KnowledgeConcept("  Subtraction ")
    assert kc.id == "Subtraction" and kc.name == "Subtraction"
    with pytest.raises(ValidationError):
        KnowledgeConcept("   ")


def test_question_rejects_duplicate_kcs_and_empty_text():
    with pytest.raises(ValidationError):
        Question("q", "text", kcs=(KnowledgeConcept("A"), KnowledgeConcept("A")))
    with pytest.raises(ValidationError):
        Question("q", "  ")


def test_session_turn_gaps_and_label():
    s = make_session(3)
    with pytest.raises(ValidationError):
        Session("x", "u", s.question, (s.turns[0], s.turns[2]), 0)
    with pytest.raises(ValidationError):
        Session("x", "u", s.question, s.turns, 2)


def test_empty_utterance_only_when_flagged():
    q = make_question()
    turns = (DialogueTurn(1, "hi", "hello"), DialogueTurn(2, "bye", ""))
    with pytest.raises(ValidationError):
        Session("x", "u", q, turns, 0)
    s = Session("x", "u", q, turns, 0, meta={"truncated_final_turn": "true"})
    assert s.turns[-1].student_utterance == ""


def test_session_round_trip():
    s = make_session(2)
    assert Session.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_initial_state_all_unknown():
    q = make_question()
    s0 = initial_state(q)
    assert s0.turn_index == 0 and s0.covers(q)
    assert {d.level for d in s0.entries.values()} == {MasteryLevel.UNKNOWN}
    with pytest.raises(ValidationError, match="no KCs"):
        initial_state(Question("q", "text"))


def test_serialization_is_insertion_order_independent():
    a = CognitiveState(1, {"B": KcDiagnosis("Good", "x"), "A": KcDiagnosis("Poor", "y")})
    b = CognitiveState(1, {"A": KcDiagnosis("Poor", "y"), "B": KcDiagnosis("Good", "x")})
    assert serialize_state(a) == serialize_state(b)
    assert serialize_state(a, ["B", "A"]) == serialize_state(b, ["B", "A"])
    assert deserialize_state(serialize_state(a)) == a


@given(st.dictionaries(st.text(min_size=1).filter(str.strip), st.sampled_from(["Good", "Fair", "Poor"]), min_size=1))
def test_state_round_trip_property(levels):
    state = CognitiveState(2, {k.strip(): KcDiagnosis(v, "e") for k, v in levels.items()})
    assert deserialize_state(serialize_state(state)) == state


def test_deserialize_names_bad_entry():
    text = json.dumps({"turn_index": 1, "entries": {"Subtraction": {"level": "Great", "explanation": "x"}}})
    with pytest.raises(ValidationError, match="Subtraction.*Great"):
        deserialize_state(text)


def test_describe_state_line_format():
    state = CognitiveState(1, {"Subtraction": KcDiagnosis("Poor", "borrowing error")})
    assert describe_state(state) == "Subtraction: Poor - borrowing error"


def test_memory_append_contiguous_and_purge():
    m = ConversationMemory("s")
    m = memory_append(m, _trace(1))
    m = memory_append(m, _trace(2))
    assert [t.turn_index for t in m.traces] == [1, 2]
    with pytest.raises(ValidationError, match="non-contiguous"):
        memory_append(m, _trace(4))
    assert len(memory_purge(m)) == 0
    assert memory_purge(m, "other").session_id == "other"


def test_trace_reflection_invariant():
    _trace(1, n_states=3, n_reflections=2)
    _trace(1, n_states=1, n_reflections=1)  # an Accurate verdict ends the loop without rerun
    with pytest.raises(ValidationError):
        _trace(1, n_states=1, n_reflections=2)


def test_trace_round_trip():
    t = _trace(1, n_states=2, n_reflections=1)
    assert TurnTrace.from_dict(json.loads(json.dumps(t.to_dict()))) == t


def test_engine_config_round_trip_and_unknown_keys():
    cfg = EngineConfig(max_num=5, enable_previewer=False, reflection_signal="final_label")
    assert EngineConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.reflection_active
    assert not EngineConfig(reflection_signal="final_label", enable_reflector=False).reflection_active
    with pytest.raises(ValidationError, match="unknown config keys"):
        EngineConfig.from_dict({"max_reflections": 3})
    with pytest.raises(ValidationError):
        EngineConfig(max_num=-1)
