from __future__ import annotations

import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parld.engine import DiagnosisEngine, SessionRunError, run_many
from parld.llm import Cassette, ProviderError, RecordingProvider, ReplayProvider, ScriptedProvider, template_of
from parld.models import (
    CARRIED_FORWARD,
    ConversationMemory,
    EngineConfig,
    MasteryLevel,
    ReflectionSignal,
    initial_state,
)

from conftest import KCS, make_handler, make_session, prediction_json, state_json

PER_TURN = ReflectionSignal.PER_TURN_CORRECTNESS
TURN_RE = re.compile(r"(previewer,)?analyzer,reasoner(,reflector(,analyzer,reasoner)?)*")


def _engine(provider, **cfg) -> DiagnosisEngine:
    return DiagnosisEngine(provider, EngineConfig(**cfg))


def test_three_turn_pipeline_structure(scripted):
    p = scripted()
    result = _engine(p).run_session(make_session(3))
    assert p.call_tags == ["previewer", "analyzer", "reasoner"] * 3
    assert [t.turn_index for t in result.memory.traces] == [1, 2, 3]
    q = make_session(3).question
    for trace in result.memory.traces:
        assert len(trace.states) == 1 and not trace.reflections
        assert all(s.covers(q) for s in trace.states)
        assert trace.schema is not None and trace.schema.turn_index == trace.turn_index
    assert result.final_prediction.turn_index == 3
    assert [e.template_id for e in result.exchange_log] == p.call_tags


def test_state_threading_through_prompts():
    levels = iter(["Good", "Fair", "Poor"])
    handler = make_handler()

    def h(req):
        if template_of(req) == "analyzer":
            return state_json(KCS, next(levels))
        return handler(req)

    p = ScriptedProvider(handler=h)
    result = _engine(p, enable_previewer=False).run_session(make_session(3))
    analyzer_prompts = [r.messages[-1].content for r in p.requests if template_of(r) == "analyzer"]
    assert '"Unknown"' in analyzer_prompts[0]
    assert '"Good"' in analyzer_prompts[1] and '"Fair"' in analyzer_prompts[2]
    assert [t.final_state.entries["Subtraction"].level.value for t in result.memory.traces] == ["Good", "Fair", "Poor"]


@pytest.mark.parametrize("max_num", [0, 1, 2, 5])
def test_reflection_budget_exhausted_on_mismatch(scripted, max_num):
    p = scripted(prediction="not_mastered", judgment="inaccurate")
    eng = _engine(p, max_num=max_num, reflection_signal=PER_TURN)
    result = eng.run_session(make_session(2), observed=[1, 1])
    for trace in result.memory.traces:
        assert len(trace.reflections) == max_num
        assert len(trace.states) == max_num + 1 == len(trace.predictions)
    per_turn = ["previewer", "analyzer", "reasoner"] + ["reflector", "analyzer", "reasoner"] * max_num
    assert p.call_tags == per_turn * 2


def test_no_reflection_when_prediction_matches(scripted):
    p = scripted(prediction="mastered")
    result = _engine(p, max_num=5, reflection_signal=PER_TURN).run_session(make_session(3), observed=[1, 1, 1])
    assert all(not t.reflections for t in result.memory.traces)
    assert "reflector" not in p.call_tags


def test_accurate_judgment_ends_loop_without_rerun(scripted):
    p = scripted(judgment="accurate")
    result = _engine(p, max_num=3, reflection_signal=PER_TURN).run_session(make_session(1), observed=[1])
    trace = result.memory.traces[0]
    assert len(trace.reflections) == 1 and len(trace.states) == 1
    assert p.call_tags == ["previewer", "analyzer", "reasoner", "reflector"]


def test_rerun_gets_critique_and_rejected_state(scripted):
    p = scripted()
    _engine(p, max_num=1, reflection_signal=PER_TURN).run_session(make_session(1), observed=[1])
    rerun = [r for r in p.requests if template_of(r) == "analyzer"][1].messages[-1].content
    assert "overlooked the multiplication error" in rerun
    assert "Previous diagnosis" in rerun
    reflector = [r for r in p.requests if template_of(r) == "reflector"][0].messages[-1].content
    assert "did not answer correctly" not in reflector and "answered correctly" in reflector


def test_final_label_signal_uses_session_label(scripted):
    p = scripted(prediction="not_mastered")
    result = _engine(p, max_num=1, reflection_signal=ReflectionSignal.FINAL_LABEL).run_session(
        make_session(2, label=1)
    )
    assert [t.observed for t in result.memory.traces] == [1, 1]
    assert all(len(t.reflections) == 1 for t in result.memory.traces)


def test_reflector_disabled_never_reflects(scripted):
    p = scripted()
    _engine(p, enable_reflector=False, reflection_signal=PER_TURN).run_session(make_session(2), observed=[1, 1])
    assert "reflector" not in p.call_tags


def test_without_previewer_no_schema_anywhere(scripted):
    p = scripted()
    result = _engine(p, enable_previewer=False).run_session(make_session(2))
    assert "previewer" not in p.call_tags
    assert all(t.schema is None for t in result.memory.traces)
    for r in p.requests:
        if template_of(r) == "analyzer":
            assert "ZPD" not in "".join(m.content for m in r.messages)


def test_unknown_kc_dropped_and_missing_kc_carried_forward():
    handler = make_handler()
    outputs = iter(
        [
            json.dumps({"subtraction": {"level": "Good", "explanation": "ok"}, "Algebra": {"level": "Poor", "explanation": "x"}}),
            json.dumps({"Multiplication": {"level": "Fair", "explanation": "ok"}}),
        ]
    )

    def h(req):
        return next(outputs) if template_of(req) == "analyzer" else handler(req)

    result = _engine(ScriptedProvider(handler=h), enable_previewer=False).run_session(make_session(2))
    s1, s2 = (t.final_state for t in result.memory.traces)
    assert set(s1.entries) == set(KCS)
    assert s1.entries["Subtraction"].level is MasteryLevel.GOOD
    assert s1.entries["Multiplication"].explanation == CARRIED_FORWARD
    assert s2.entries["Subtraction"].level is MasteryLevel.GOOD and s2.entries["Subtraction"].explanation == CARRIED_FORWARD


def test_foreign_only_output_retries_then_fails_with_partial_memory():
    handler = make_handler()
    turn = {"n": 0}

    def h(req):
        if template_of(req) == "analyzer":
            turn["n"] += 1
            if turn["n"] > 1:
                return json.dumps({"Algebra": {"level": "Poor", "explanation": "x"}})
        return handler(req)

    p = ScriptedProvider(handler=h)
    with pytest.raises(SessionRunError) as info:
        _engine(p, enable_previewer=False, structured_retry_limit=2).run_session(make_session(3))
    err = info.value
    assert len(err.memory.traces) == 1
    assert p.call_tags == ["analyzer", "reasoner", "analyzer", "analyzer", "analyzer"]
    assert [e.template_id for e in err.exchanges] == p.call_tags


def test_preview_drops_foreign_behaviors():
    handler = make_handler()
    schema = {
        "mastered": [{"description": "adds", "kc_ids": ["Addition"]}],
        "acquirable": [{"description": "multiplies with help", "kc_ids": ["Multiplication"]}],
    }

    def h(req):
        return json.dumps(schema) if template_of(req) == "previewer" else handler(req)

    result = _engine(ScriptedProvider(handler=h)).run_session(make_session(1))
    s = result.memory.traces[0].schema
    assert not s.mastered and [i.description for i in s.acquirable] == ["multiplies with help"]


def test_provider_exhaustion_wrapped_with_progress():
    per_turn = [json.dumps({"Subtraction": {"level": "Poor", "explanation": "e"}, "Multiplication": {"level": "Poor", "explanation": "e"}}), prediction_json()]
    p = ScriptedProvider(per_turn * 2)
    with pytest.raises(SessionRunError) as info:
        _engine(p, enable_previewer=False).run_session(make_session(3, sid="abc"))
    assert info.value.session_id == "abc" and len(info.value.memory.traces) == 2


def test_memory_is_session_scoped(scripted):
    p = scripted()
    eng = _engine(p, max_num=1, reflection_signal=PER_TURN)
    eng.run_session(make_session(2, sid="a"), observed=[1, 1])
    p.requests.clear()
    result = eng.run_session(make_session(1, sid="b"), observed=[1])
    assert result.memory.session_id == "b" and len(result.memory.traces) == 1
    reflector = [r for r in p.requests if template_of(r) == "reflector"][0].messages[-1].content
    assert "## Turn 2" not in reflector


def test_run_turn_rejects_out_of_order_turn(scripted):
    s = make_session(2)
    with pytest.raises(ValueError):
        _engine(scripted()).run_turn(ConversationMemory(), initial_state(s.question), s.turns[1], s.question)


def test_run_many_preserves_order_and_reports_failures(scripted):
    handler = make_handler()

    def h(req):
        if "BROKEN" in req.messages[-1].content:
            raise ProviderError("boom")
        return handler(req)

    sessions = [make_session(2, sid=f"s{i}") for i in range(6)]
    bad = make_session(1, sid="bad")
    bad = type(bad)(**{**bad.__dict__, "turns": (type(bad.turns[0])(1, "BROKEN", "x"),)})
    sessions.insert(3, bad)
    outcomes = run_many(_engine(ScriptedProvider(handler=h)), sessions, workers=4)
    assert [o.session_id for o in outcomes] == [s.session_id for s in sessions]
    assert isinstance(outcomes[3], SessionRunError)
    assert sum(isinstance(o, SessionRunError) for o in outcomes) == 1


def test_replay_gives_identical_result(tmp_path, scripted):
    path = tmp_path / "run.cassette.jsonl"
    live = RecordingProvider(scripted(), Cassette(path))
    cfg = dict(max_num=2, reflection_signal=PER_TURN)
    first = _engine(live, **cfg).run_session(make_session(3), observed=[1, 0, 1])
    second = _engine(ReplayProvider(Cassette.load(path)), **cfg).run_session(make_session(3), observed=[1, 0, 1])
    assert json.dumps(first.summary(), sort_keys=True) == json.dumps(second.summary(), sort_keys=True)
    assert [t.to_dict() for t in first.memory.traces] == [t.to_dict() for t in second.memory.traces]


@settings(max_examples=60, deadline=None)
@given(
    max_num=st.integers(0, 4),
    judgments=st.lists(st.sampled_from(["accurate", "inaccurate"]), min_size=1, max_size=30),
    observed=st.lists(st.sampled_from([0, 1]), min_size=3, max_size=3),
    preds=st.lists(st.sampled_from(["mastered", "not_mastered"]), min_size=1, max_size=30),
)
def test_reflection_bound_and_call_order_property(max_num, judgments, observed, preds):
    j_iter, p_iter = iter(judgments * 20), iter(preds * 20)
    base = make_handler()

    def h(req):
        tid = template_of(req)
        if tid == "reflector":
            body = {"judgment": next(j_iter), "critique": "c"}
            return json.dumps(body)
        if tid == "reasoner":
            return prediction_json(next(p_iter))
        return base(req)

    p = ScriptedProvider(handler=h)
    result = _engine(p, max_num=max_num, reflection_signal=PER_TURN).run_session(make_session(3), observed=observed)
    start = 0
    for trace, obs in zip(result.memory.traces, observed):
        assert len(trace.reflections) <= max_num
        n = len(trace.raw_llm_exchanges)
        tags = ",".join(e.template_id for e in trace.raw_llm_exchanges)
        assert TURN_RE.fullmatch(tags), tags
        assert tags == ",".join(p.call_tags[start : start + n])
        start += n
        if trace.final_prediction.label.as_int != obs:
            last = trace.reflections[-1] if trace.reflections else None
            assert len(trace.reflections) == max_num or (last is not None and last.judgment.value == "Accurate")
