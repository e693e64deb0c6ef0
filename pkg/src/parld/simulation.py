"""Tutoring-support simulation with a simulated student.

Three tutor policies are compared on the same sessions:

- ``parld``: the diagnosis engine runs after every student reply and its
  cognitive state conditions the next tutor message;
- ``da`` (direct analyze): one stateless analysis call per turn, then an
  instruction call;
- ``dr`` (direct respond): the tutor answers from the transcript alone.

Turn 1 replays the original first turn; policies take over from turn 2. An
episode ends when the student's reply is judged correct or when the original
number of turns is used up.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Iterable, Literal, Mapping, Sequence

from .engine import DiagnosisEngine, match_kc
from .formatting import format_kcs, format_question, format_transcript
from .llm import CompletionRequest, Provider, ProviderError, canonical_key, complete_structured, content_digest
from .llm.structured import CognitiveStateOut, StructuredOutputError
from .models import (
    CognitiveState,
    ConversationMemory,
    DialogueTurn,
    EngineConfig,
    Exchange,
    KcDiagnosis,
    MasteryLevel,
    Question,
    ReflectionSignal,
    Session,
    describe_state,
    initial_state,
    memory_append,
)
from .prompts import PromptRegistry, default_registry

log = logging.getLogger(__name__)

Policy = Literal["parld", "da", "dr"]
POLICIES: tuple[Policy, ...] = ("parld", "da", "dr")
NUMERIC_TOLERANCE = 1e-6


# --------------------------------------------------------------------------
# Answer checking
# --------------------------------------------------------------------------

_NUM_RE = re.compile(
    r"(?<![\w.])-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:\s*/\s*\d+(?:\.\d+)?)?|(?<![\w.])-?\.\d+"
)
_ANSWER_PHRASE_RE = re.compile(r"(?:answer|result)\s*(?:is|=|:)\s*(.+)$", re.IGNORECASE | re.DOTALL)


def extract_numbers(text: str) -> list[float]:
    """Numbers in reading order; thousands commas dropped, ``a/b`` read as a fraction."""
    out: list[float] = []
    for token in _NUM_RE.findall(text.replace("−", "-")):
        token = token.replace(",", "").replace(" ", "")
        try:
            if "/" in token:
                num, den = token.split("/")
                if float(den) == 0:
                    continue
                out.append(float(Fraction(num) / Fraction(den)))
            else:
                out.append(float(token))
        except (ValueError, ZeroDivisionError):
            continue
    return out


def _norm_text(text: str) -> str:
    return re.sub(r"[^\w]+", " ", text.lower()).strip()


def numeric_answer(answer: str) -> float | None:
    """The value of ``answer`` when it is a single number (units and commas allowed)."""
    nums = extract_numbers(answer)
    return nums[0] if len(nums) == 1 else None


def rule_based_correct(utterance: str, answer: str) -> bool | None:
    """Deterministic check; ``None`` when no answer can be extracted."""
    target = numeric_answer(answer)
    if target is not None:
        nums = extract_numbers(utterance)
        if not nums:
            return None
        return abs(nums[-1] - target) <= NUMERIC_TOLERANCE
    want = _norm_text(answer)
    if not want:
        return None
    phrase = _ANSWER_PHRASE_RE.search(utterance)
    got = _norm_text(phrase.group(1) if phrase else utterance)
    if got == want:
        return True
    return False if phrase else None


def judge_correct(
    student_utterance: str,
    question: Question,
    provider: Provider | None = None,
    config: EngineConfig | None = None,
    registry: PromptRegistry | None = None,
    exchanges: list[Exchange] | None = None,
) -> bool | None:
    """Is the student's reply a correct final answer?

    Rule-based extraction first; the correctness-judge prompt only when that
    finds nothing. Returns ``None`` when no verdict could be reached.
    """
    if not question.answer.strip():
        raise ValueError(f"question {question.id} has no reference answer")
    verdict = rule_based_correct(student_utterance, question.answer)
    if verdict is not None or provider is None:
        return verdict
    config = config or EngineConfig()
    template = (registry or default_registry()).get("correctness_judge")
    request = _request(template, config, {
        "question": question.text,
        "answer": question.answer,
        "utterance": student_utterance.strip() or "(empty)",
    })
    try:
        result = complete_structured(provider, request, "correctness", config.structured_retry_limit)
    except StructuredOutputError as exc:
        log.warning("correctness judge failed: %s", exc)
        _audit(exchanges, template, exc.exchanges)
        return None
    _audit(exchanges, template, result.exchanges)
    return bool(result.value.correct)


# --------------------------------------------------------------------------
# Prompted actors
# --------------------------------------------------------------------------


def _request(template, config: EngineConfig, slots: Mapping[str, str], model: str | None = None) -> CompletionRequest:
    return CompletionRequest(
        model=model or config.model_name,
        messages=tuple(template.render(slots)),
        temperature=config.temperature,
        max_tokens=config.max_tokens,
        json_mode=template.json_mode,
        tag=template.tag,
    )


def _audit(exchanges: list[Exchange] | None, template, pairs: Iterable) -> None:
    if exchanges is None:
        return
    for req, resp in pairs:
        exchanges.append(Exchange(template.id, template.version, canonical_key(req), content_digest(resp.content)))


def _text_call(provider, template, config, slots, exchanges, model=None) -> str:
    request = _request(template, config, slots, model)
    response = provider.complete(request)
    _audit(exchanges, template, [(request, response)])
    return response.content.strip()


def simulate_student(
    profile: str,
    transcript: Sequence[DialogueTurn],
    tutor_utterance: str,
    provider: Provider,
    question: Question,
    config: EngineConfig | None = None,
    registry: PromptRegistry | None = None,
    exchanges: list[Exchange] | None = None,
    model: str | None = None,
) -> str:
    if not tutor_utterance.strip():
        raise ValueError("tutor utterance is empty")
    template = (registry or default_registry()).get("simulated_student")
    slots = {
        "profile": profile.strip() or "A middle-school student.",
        "question": format_question(question),
        "transcript": format_transcript(transcript),
        "tutor_utterance": tutor_utterance.strip(),
    }
    return _text_call(provider, template, config or EngineConfig(), slots, exchanges, model)


def direct_analysis(
    transcript: Sequence[DialogueTurn],
    question: Question,
    provider: Provider,
    config: EngineConfig,
    registry: PromptRegistry | None = None,
    exchanges: list[Exchange] | None = None,
) -> CognitiveState:
    """Stateless per-turn analysis used by the ``da`` policy."""
    template = (registry or default_registry()).get("direct_analyzer")
    turn_index = transcript[-1].index if transcript else 0
    prior = initial_state(question)

    def to_state(out: CognitiveStateOut) -> CognitiveState:
        entries = dict(prior.entries)
        matched = False
        for raw_id, entry in out.root.items():
            kc = match_kc(raw_id, question)
            if kc is not None:
                entries[kc] = KcDiagnosis(MasteryLevel(entry.level), entry.explanation)
                matched = True
        if not matched:
            raise ValueError(f"no entry matched the KC ids {list(question.kc_ids)}")
        return CognitiveState(turn_index=turn_index, entries=entries)

    request = _request(template, config, {
        "question": format_question(question),
        "kcs": format_kcs(question),
        "transcript": format_transcript(transcript),
    })
    try:
        result = complete_structured(provider, request, "cognitive_state", config.structured_retry_limit, to_state)
    except StructuredOutputError as exc:
        _audit(exchanges, template, exc.exchanges)
        raise
    _audit(exchanges, template, result.exchanges)
    return result.value


def next_tutor_utterance(
    policy: Policy,
    transcript: Sequence[DialogueTurn],
    question: Question,
    state: CognitiveState | None,
    provider: Provider,
    config: EngineConfig | None = None,
    registry: PromptRegistry | None = None,
    exchanges: list[Exchange] | None = None,
) -> str:
    config = config or EngineConfig()
    registry = registry or default_registry()
    base = {"question": format_question(question), "transcript": format_transcript(transcript)}
    if policy == "parld":
        if state is None:
            raise ValueError("the parld policy needs a cognitive state")
        slots = {**base, "state_summary": describe_state(state, question.kc_ids)}
        return _text_call(provider, registry.get("tutor_instruction_parld"), config, slots, exchanges)
    if policy == "da":
        analysis = direct_analysis(transcript, question, provider, config, registry, exchanges)
        slots = {**base, "analysis": describe_state(analysis, question.kc_ids)}
        return _text_call(provider, registry.get("tutor_instruction_da"), config, slots, exchanges)
    if policy == "dr":
        return _text_call(provider, registry.get("tutor_direct_respond"), config, base, exchanges)
    raise ValueError(f"unknown policy {policy!r}")


# --------------------------------------------------------------------------
# Episodes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimEpisode:
    session_id: str
    policy: Policy
    transcript: tuple[DialogueTurn, ...]
    solved: bool
    turns_used: int
    turn_budget: int
    unjudged: bool = False
    states: tuple[CognitiveState, ...] = ()
    exchanges: tuple[Exchange, ...] = ()
    error: str = ""

    def __post_init__(self) -> None:
        if self.turns_used > self.turn_budget:
            raise ValueError("episode exceeded its turn budget")

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "policy": self.policy,
            "transcript": [t.to_dict() for t in self.transcript],
            "solved": self.solved,
            "turns_used": self.turns_used,
            "turn_budget": self.turn_budget,
            "unjudged": self.unjudged,
            "states": [s.to_dict() for s in self.states],
            "exchanges": [e.to_dict() for e in self.exchanges],
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimEpisode":
        return cls(
            session_id=data["session_id"],
            policy=data["policy"],
            transcript=tuple(DialogueTurn.from_dict(t) for t in data["transcript"]),
            solved=bool(data["solved"]),
            turns_used=int(data["turns_used"]),
            turn_budget=int(data["turn_budget"]),
            unjudged=bool(data.get("unjudged", False)),
            states=tuple(CognitiveState.from_dict(s) for s in data.get("states", [])),
            exchanges=tuple(Exchange.from_dict(e) for e in data.get("exchanges", [])),
            error=data.get("error", ""),
        )


class EpisodeError(RuntimeError):
    """A provider failure stopped an episode; ``episode`` holds what was played."""

    def __init__(self, episode: SimEpisode, cause: Exception):
        super().__init__(f"episode {episode.session_id}/{episode.policy} aborted: {cause}")
        self.episode = episode
        self.cause = cause


def simulation_pool(sessions: Iterable[Session]) -> list[Session]:
    """Sessions whose original student never reached the answer and that can be judged."""
    return [s for s in sessions if s.final_label == 0 and s.question.answer.strip() and s.turns]


def run_episode(
    session: Session,
    policy: Policy,
    provider: Provider,
    config: EngineConfig | None = None,
    student_provider: Provider | None = None,
    student_model: str | None = None,
    registry: PromptRegistry | None = None,
) -> SimEpisode:
    config = config or EngineConfig()
    registry = registry or default_registry()
    student_provider = student_provider or provider
    question = session.question
    budget = len(session.turns)
    profile = session.meta.get("student_profile", "")
    exchanges: list[Exchange] = []
    states: list[CognitiveState] = []

    engine = None
    memory = ConversationMemory(session.session_id)
    state = None
    if policy == "parld":
        engine = DiagnosisEngine(
            provider, replace(config, reflection_signal=ReflectionSignal.PER_TURN_CORRECTNESS), registry
        )
        state = initial_state(question)

    first = session.turns[0]
    student = first.student_utterance
    if not student.strip():
        student = simulate_student(
            profile, [], first.tutor_utterance, student_provider, question, config, registry, exchanges, student_model
        )
    transcript = [DialogueTurn(1, first.tutor_utterance, student)]

    def finish(solved: bool, unjudged: bool = False, error: str = "") -> SimEpisode:
        return SimEpisode(
            session_id=session.session_id,
            policy=policy,
            transcript=tuple(transcript),
            solved=solved,
            turns_used=len(transcript),
            turn_budget=budget,
            unjudged=unjudged,
            states=tuple(states),
            exchanges=tuple(exchanges),
            error=error,
        )

    try:
        while True:
            verdict = judge_correct(transcript[-1].student_utterance, question, provider, config, registry, exchanges)
            if verdict is None:
                return finish(False, unjudged=True)
            if verdict:
                return finish(True)
            if len(transcript) >= budget:
                return finish(False)
            if engine is not None:
                trace, state = engine.run_turn(memory, state, transcript[-1], question, observed=0, exchanges=exchanges)
                memory = memory_append(memory, trace)
                states.append(state)
            tutor = next_tutor_utterance(policy, transcript, question, state, provider, config, registry, exchanges)
            student = simulate_student(
                profile, transcript, tutor, student_provider, question, config, registry, exchanges, student_model
            )
            transcript.append(DialogueTurn(len(transcript) + 1, tutor, student))
    except ProviderError as exc:
        raise EpisodeError(finish(False, error=str(exc)), exc) from exc


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass
class SimMetrics:
    policy: str
    n: int
    solved: int
    cr: float | None
    avg_t: float | None
    int_avg_t: float | None
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "policy": self.policy,
            "n": self.n,
            "solved": self.solved,
            "cr": self.cr,
            "avg_t": self.avg_t,
            "int_avg_t": self.int_avg_t,
            "excluded": list(self.excluded),
        }


def _mean(values: Sequence[int]) -> float | None:
    return sum(values) / len(values) if values else None


def compute_sim_metrics(episodes: Mapping[str, Sequence[SimEpisode]]) -> list[SimMetrics]:
    """CR, Avg. T and Int. Avg. T per policy.

    Every policy must cover the same session ids. Sessions left unjudged (or
    aborted) under any policy are excluded from all policies and listed in
    ``excluded``.
    """
    by_policy: dict[str, dict[str, SimEpisode]] = {}
    for policy, eps in episodes.items():
        index = {e.session_id: e for e in eps}
        if len(index) != len(eps):
            raise ValueError(f"policy {policy} has duplicate session ids")
        by_policy[policy] = index
    id_sets = {p: set(idx) for p, idx in by_policy.items()}
    reference = next(iter(id_sets.values()), set())
    if any(ids != reference for ids in id_sets.values()):
        raise ValueError("policies were evaluated on different session sets")

    excluded = sorted({sid for idx in by_policy.values() for sid, e in idx.items() if e.unjudged or e.error})
    kept = sorted(reference - set(excluded))
    solved_sets = {p: {sid for sid in kept if idx[sid].solved} for p, idx in by_policy.items()}
    common = set.intersection(*solved_sets.values()) if solved_sets else set()

    out = []
    for policy, idx in by_policy.items():
        solved = solved_sets[policy]
        out.append(
            SimMetrics(
                policy=policy,
                n=len(kept),
                solved=len(solved),
                cr=100.0 * len(solved) / len(kept) if kept else None,
                avg_t=_mean([idx[s].turns_used for s in sorted(solved)]),
                int_avg_t=_mean([idx[s].turns_used for s in sorted(common)]),
                excluded=excluded,
            )
        )
    return out


def sim_metrics_table(metrics: Sequence[SimMetrics]) -> str:
    def f(v: float | None) -> str:
        return "n/a" if v is None else f"{v:.2f}"

    lines = ["| Policy | n | CR | Avg. T | Int. Avg. T |", "|---|---|---|---|---|"]
    lines += [f"| {m.policy} | {m.n} | {f(m.cr)} | {f(m.avg_t)} | {f(m.int_avg_t)} |" for m in metrics]
    return "\n".join(lines)


def dump_episodes(episodes: Iterable[SimEpisode]) -> str:
    return "".join(json.dumps(e.to_dict(), ensure_ascii=False) + "\n" for e in episodes)
