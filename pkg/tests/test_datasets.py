from __future__ import annotations

import json

import pytest

from parld import datasets
from parld.datasets import (
    final_number,
    load_canonical,
    load_comta,
    load_mathdial,
    mathdial_label,
    pair_turns,
    read_sessions,
    tag_kcs,
    write_sessions,
)
from parld.llm import ScriptedProvider

from conftest import make_handler, make_session


def mathdial_record(label="No", question="Mark buys 8 boxes of 35 ml. Total?", **extra):
    rec = {
        "qid": 7,
        "scenario": 1,
        "question": question,
        "ground_truth": "8 * 35 = 280\n#### 280",
        "student_incorrect_solution": "8 + 35 = 43",
        "student_profile": "Kayla is a 7th grade student.",
        "teacher_described_confusion": "adds instead of multiplying",
        "self-correctness": label,
        "self-typical-confusion": 4,
        "self-typical-interactions": 4,
        "conversation": "Teacher: (probing)How did you get 43?|EOM|Kayla: I added 8 and 35.|EOM|"
        "Teacher: (focus)Each box has 35 ml.|EOM|Teacher: How many boxes?|EOM|Kayla: 8 boxes, so 280.",
    }
    rec.update(extra)
    return rec


def write_jsonl(path, records):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in records), encoding="utf-8")


def test_pair_turns_concatenates_same_speaker():
    turns, meta = pair_turns([(True, "a"), (True, "b"), (False, "c"), (False, "d"), (True, "e")])
    assert [(t.tutor_utterance, t.student_utterance) for t in turns] == [("a\nb", "c\nd"), ("e", "")]
    assert meta == {"truncated_final_turn": "true"}
    turns, meta = pair_turns([(False, "hi"), (True, "hello"), (False, "x")])
    assert turns[0].tutor_utterance == "" and meta == {"leading_student": "true"}


@pytest.mark.parametrize(
    "text,expected",
    [("8 * 35 = 280\n#### 280", "280"), ("total 1,250 dollars", "1250"), ("2.50 then 3.0", "3"), ("none", None)],
)
def test_final_number(text, expected):
    assert final_number(text) == expected


@pytest.mark.parametrize(
    "value,label", [("Yes", 1), ("yes", 1), ("No", 0), ("Yes, but I had to reveal the answer", 0), ("No, never", 0)]
)
def test_mathdial_label(value, label):
    assert mathdial_label(value) == label


def test_mathdial_label_rejects_unknown():
    with pytest.raises(ValueError):
        mathdial_label("maybe")


def test_load_mathdial_file(tmp_path):
    path = tmp_path / "test.jsonl"
    write_jsonl(path, [mathdial_record(), "{not json", mathdial_record("Yes"), mathdial_record(conversation="")])
    sessions, report = load_mathdial(path)
    assert report.total_raw == 4 and report.emitted == 2 and len(report.dropped) == 2
    assert report.emitted + len(report.dropped) == report.total_raw
    s = sessions[0]
    assert s.session_id == "mathdial-test-00001" and s.split.value == "test"
    assert s.question.answer == "280" and s.question.id == "mathdial-7"
    assert s.student_id == "Kayla"
    assert [t.tutor_utterance for t in s.turns] == ["How did you get 43?", "Each box has 35 ml.\nHow many boxes?"]
    assert s.meta["source"] == "mathdial" and s.meta["student_profile"].startswith("Kayla")
    assert [x.final_label for x in sessions] == [0, 1]


def test_load_mathdial_directory_preserves_order(tmp_path):
    write_jsonl(tmp_path / "train.jsonl", [mathdial_record(question=f"train {i}?") for i in range(3)])
    write_jsonl(tmp_path / "test.jsonl", [mathdial_record(question=f"test {i}?") for i in range(2)])
    sessions, report = load_mathdial(tmp_path)
    assert [s.question.text for s in sessions] == ["train 0?", "train 1?", "train 2?", "test 0?", "test 1?"]
    assert report.total_raw == 5
    only_test, _ = load_mathdial(tmp_path, split="test")
    assert {s.split.value for s in only_test} == {"test"}


def comta_record(i, result="Answer Accepted"):
    return {
        "test_id": i,
        "math_level": "Algebra",
        "expected_result": result,
        "data": [
            {"role": "user", "content": f"Solve 2x + {i} = 10"},
            {"role": "assistant", "content": "What could you do first?"},
            {"role": "user", "content": "subtract"},
            {"role": "assistant", "content": "Good, then?"},
            {"role": "user", "content": "divide by 2"},
        ],
    }


def test_load_comta_with_and_without_goal_filter(tmp_path):
    path = tmp_path / "comta.json"
    path.write_text(json.dumps([comta_record(i, "Answer Accepted" if i % 2 else "Not Accepted") for i in range(6)] + [{"test_id": 99}]))
    sidecar = tmp_path / "goal_ids.txt"
    sidecar.write_text("# clear goals\n1\n2\n3\n")
    all_sessions, report = load_comta(path)
    assert report.total_raw == 7 and report.emitted == 6
    s = all_sessions[1]
    assert s.question.text == "Solve 2x + 1 = 10" and s.final_label == 1
    assert s.meta["leading_student"] == "true" and s.turns[0].tutor_utterance == ""
    kept, report = load_comta(path, goal_filter=True, sidecar=sidecar)
    assert [x.session_id for x in kept] == ["comta-1", "comta-2", "comta-3"]
    assert report.emitted + len(report.dropped) == report.total_raw
    with pytest.raises(FileNotFoundError):
        load_comta(path, goal_filter=True, sidecar=tmp_path / "missing.txt")


def test_canonical_round_trip_is_identity(tmp_path):
    sessions = [make_session(2, sid="a"), make_session(3, sid="b")]
    p1, p2 = tmp_path / "a.sessions.jsonl", tmp_path / "b.sessions.jsonl"
    write_sessions(p1, sessions)
    loaded, report = load_canonical(p1)
    assert loaded == sessions and not report.dropped
    write_sessions(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_read_sessions_rejects_invalid_records(tmp_path):
    p = tmp_path / "x.sessions.jsonl"
    bad = make_session(1).to_dict()
    bad["final_label"] = 5
    write_jsonl(p, [make_session(1).to_dict(), bad])
    with pytest.raises(ValueError, match="invalid record"):
        read_sessions(p)


def test_tag_kcs_caches_and_skips_tagged(tmp_path):
    untagged = [make_session(1, sid=f"s{i}", kcs=()) for i in range(3)]
    tagged = make_session(1, sid="t")
    p = ScriptedProvider(handler=make_handler(tags=["Multiplication", "Unit conversion"]))
    cache = tmp_path / "q.kc-cache.json"
    out, report = tag_kcs([*untagged, tagged], p, cache)
    assert len(p.requests) == 3 and len(report.tagged) == 3
    assert out[0].question.kc_ids == ("Multiplication", "Unit conversion")
    assert out[3] == tagged
    p2 = ScriptedProvider()
    again, report2 = tag_kcs(untagged, p2, cache)
    assert not p2.requests and len(report2.from_cache) == 3
    assert [s.question for s in again] == [s.question for s in out[:3]]


def test_tag_kcs_failure_leaves_question_untagged(tmp_path):
    p = ScriptedProvider(["nonsense"] * 3)
    out, report = tag_kcs([make_session(1, kcs=())], p, None)
    assert report.failed == ["q-s1"] and out[0].question.kcs == ()
    assert not datasets.KcCache(None).data


def test_load_mathdial_csv_matches_jsonl(tmp_path):
    import csv

    recs = [mathdial_record(), mathdial_record("Yes", question="Another?")]
    write_jsonl(tmp_path / "test.jsonl", recs)
    csv_dir = tmp_path / "csv"
    csv_dir.mkdir()
    with (csv_dir / "test.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(recs[0]))
        writer.writeheader()
        writer.writerows(recs)
    from_jsonl, _ = load_mathdial(tmp_path / "test.jsonl")
    from_csv, report = load_mathdial(csv_dir, split="test")
    assert report.total_raw == 2
    assert [s.to_dict() for s in from_csv] == [s.to_dict() for s in from_jsonl]
