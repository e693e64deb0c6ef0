from __future__ import annotations

import json
from typing import Callable

import pytest

from parld.llm import CompletionRequest, ScriptedProvider, template_of
from parld.models import DialogueTurn, KnowledgeConcept, Question, Session

KCS = ("Subtraction", "Multiplication")


def make_question(kcs=KCS, answer="280", qid="q1") -> Question:
    return Question(
        id=qid,
        text="Mark has 8 boxes of 35 ml. How much does he have in total?",
        answer=answer,
        kcs=tuple(KnowledgeConcept(k) for k in kcs),
    )


def make_session(n_turns=3, label=0, sid="s1", kcs=KCS, answer="280", source="mathdial") -> Session:
    turns = tuple(
        DialogueTurn(i, f"Tutor message {i}: can you walk me through step {i}?", f"Student reply {i}: I think 35")
        for i in range(1, n_turns + 1)
    )
    return Session(
        session_id=sid,
        student_id="kayla",
        question=make_question(kcs, answer, qid=f"q-{sid}"),
        turns=turns,
        final_label=label,
        meta={"source": source, "student_profile": "Kayla is a 7th grade student who mixes up operations."},
    )


def state_json(kcs=KCS, level="Poor") -> str:
    return json.dumps({k: {"level": level, "explanation": f"{k} evidence"} for k in kcs})


def schema_json(kcs=KCS) -> str:
    return json.dumps(
        {
            "mastered": [{"description": "copies the given numbers", "kc_ids": [kcs[0]]}],
            "acquirable": [{"description": "sets up the product with a hint", "kc_ids": [kcs[-1]]}],
            "inaccessible": [],
        }
    )


def prediction_json(label="not_mastered") -> str:
    return json.dumps({"prediction": label, "rationale": "based on the state"})


def reflection_json(judgment="inaccurate") -> str:
    body = {"judgment": judgment}
    if judgment == "inaccurate":
        body["critique"] = "the analyzer overlooked the multiplication error"
    return json.dumps(body)


def make_handler(
    *,
    kcs=KCS,
    level="Poor",
    prediction: str | Callable[[CompletionRequest], str] = "not_mastered",
    judgment="inaccurate",
    tutor="Let's look at the boxes again.",
    student="I think 35",
    correct=False,
    tags=("Subtraction", "Multiplication"),
) -> Callable[[CompletionRequest], str]:
    """A scripted backend that returns a valid reply for every template."""

    def handler(request: CompletionRequest) -> str:
        tid = template_of(request)
        if tid == "previewer":
            return schema_json(kcs)
        if tid in ("analyzer", "direct_analyzer"):
            return state_json(kcs, level)
        if tid == "reasoner":
            return prediction_json(prediction(request) if callable(prediction) else prediction)
        if tid == "reflector":
            return reflection_json(judgment)
        if tid.startswith("tutor_"):
            return tutor
        if tid == "simulated_student":
            return student(request) if callable(student) else student
        if tid == "correctness_judge":
            return json.dumps({"correct": correct})
        if tid == "kc_tagger":
            return json.dumps({"kcs": list(tags)})
        raise AssertionError(f"unexpected template {tid}")

    return handler


@pytest.fixture
def scripted():
    def build(**kwargs) -> ScriptedProvider:
        return ScriptedProvider(handler=make_handler(**kwargs))

    return build


# -- acceptance reporting ---------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        if rep.skipped:
            reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
            result = ("SKIP", title, reason.removeprefix("Skipped: "))
        elif rep.failed:
            result = ("FAIL", title, rep.longreprtext.strip().splitlines()[-1] if rep.longreprtext else "")
        else:
            result = ("PASS", title, "")
        # several tests may share a criterion; the worst outcome wins
        previous = _CRITERIA.get(number)
        if previous is None or _RANK[result[0]] > _RANK[previous[0]]:
            _CRITERIA[number] = result


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, note = _CRITERIA[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  ({note})" if note else ""))
