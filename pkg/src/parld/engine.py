"""Preview -> analyze -> reason chain with bounded chain reflection.

One ``DiagnosisEngine`` wraps a provider, a prompt registry and an
``EngineConfig``. It holds no per-session state, so one engine can serve many
sessions from a thread pool; everything per-session travels in the
``ConversationMemory`` value that ``run_session`` threads through the turns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from .formatting import format_kcs, format_memory, format_question, format_schema, format_state, format_turn
from .llm import CompletionRequest, Provider, ProviderError, canonical_key, complete_structured, content_digest
from .llm.structured import CognitiveStateOut, PredictionOut, ReflectionOut, StructuredOutputError, ZpdSchemaOut
from .models import (
    CARRIED_FORWARD,
    BehaviorItem,
    CognitiveState,
    ConversationMemory,
    DialogueTurn,
    EngineConfig,
    Exchange,
    Judgment,
    KcDiagnosis,
    MasteryLevel,
    PerformancePrediction,
    PredictionLabel,
    Question,
    ReflectionResult,
    ReflectionSignal,
    Session,
    TurnTrace,
    ValidationError,
    ZONES,
    ZpdBehaviorSchema,
    initial_state,
    memory_append,
    memory_purge,
)
from .prompts import PromptRegistry, default_registry

log = logging.getLogger(__name__)


class SessionRunError(RuntimeError):
    """A provider failure aborted a session; carries what was done so far."""

    def __init__(self, session_id: str, memory: ConversationMemory, exchanges: list[Exchange], cause: Exception):
        super().__init__(f"session {session_id} aborted at turn {len(memory.traces) + 1}: {cause}")
        self.session_id = session_id
        self.memory = memory
        self.exchanges = exchanges
        self.cause = cause


@dataclass(frozen=True)
class SessionRunResult:
    session_id: str
    memory: ConversationMemory
    final_prediction: PerformancePrediction
    config_snapshot: EngineConfig
    exchange_log: tuple[Exchange, ...] = ()

    def __post_init__(self) -> None:
        last = self.memory.last
        if last is None or self.final_prediction.turn_index != last.turn_index:
            raise ValidationError("final prediction must come from the last trace")

    @property
    def final_state(self) -> CognitiveState:
        assert self.memory.last is not None
        return self.memory.last.final_state

    def summary(self) -> dict[str, Any]:
        last = self.memory.last
        assert last is not None
        return {
            "session_id": self.session_id,
            "turns": len(self.memory.traces),
            "final_prediction": self.final_prediction.to_dict(),
            "final_state": self.final_state.to_dict(list(last.kc_order) or None),
            "reflections": sum(len(t.reflections) for t in self.memory.traces),
            "config": self.config_snapshot.to_dict(),
            "exchange_log": [e.to_dict() for e in self.exchange_log],
        }


def match_kc(raw_id: str, question: Question) -> str | None:
    """Resolve an LLM-produced KC id against the question's KC ids.

    Exact match after trimming first, then one case-insensitive pass.
    """
    key = str(raw_id).strip()
    if key in question.kc_ids:
        return key
    lowered = {kc.lower(): kc for kc in question.kc_ids}
    return lowered.get(key.lower())


class DiagnosisEngine:
    def __init__(
        self,
        provider: Provider,
        config: EngineConfig | None = None,
        registry: PromptRegistry | None = None,
    ) -> None:
        self.provider = provider
        self.config = config or EngineConfig()
        self.registry = registry or default_registry()

    # -- plumbing ---------------------------------------------------------

    def _call(
        self,
        template_id: str,
        slots: dict[str, str],
        schema_id: str,
        exchanges: list[Exchange] | None,
        postprocess: Callable[[Any], Any] | None = None,
    ) -> Any:
        template = self.registry.get(template_id)
        request = CompletionRequest(
            model=self.config.model_name,
            messages=tuple(template.render(slots)),
            temperature=self.config.temperature,
            max_tokens=self.config.max_tokens,
            json_mode=template.json_mode,
            tag=template.tag,
        )

        def audit(pairs):
            if exchanges is not None:
                for req, resp in pairs:
                    exchanges.append(
                        Exchange(template.id, template.version, canonical_key(req), content_digest(resp.content))
                    )

        try:
            result = complete_structured(
                self.provider, request, schema_id, self.config.structured_retry_limit, postprocess
            )
        except StructuredOutputError as exc:
            audit(exc.exchanges)
            raise
        audit(result.exchanges)
        return result.value

    # -- agents -----------------------------------------------------------

    def preview_behavior(
        self, prev_state: CognitiveState, question: Question, exchanges: list[Exchange] | None = None
    ) -> ZpdBehaviorSchema:
        if not prev_state.covers(question):
            raise ValidationError("prior state does not cover the question's KCs")
        turn_index = prev_state.turn_index + 1

        def to_schema(out: ZpdSchemaOut) -> ZpdBehaviorSchema:
            zones: dict[str, list[BehaviorItem]] = {z: [] for z in ZONES}
            seen: set[BehaviorItem] = set()
            for zone in ZONES:
                for raw in getattr(out, zone):
                    resolved = [match_kc(k, question) for k in raw.kc_ids]
                    if any(r is None for r in resolved):
                        log.warning(
                            "turn %d: dropping %s behavior with foreign KC ids %s",
                            turn_index, zone, [k for k, r in zip(raw.kc_ids, resolved) if r is None],
                        )
                        continue
                    item = BehaviorItem(raw.description, tuple(dict.fromkeys(resolved)))
                    if item in seen:
                        log.warning("turn %d: dropping duplicate behavior %r", turn_index, raw.description)
                        continue
                    seen.add(item)
                    zones[zone].append(item)
            # raises ValidationError (a ValueError) when nothing survives, which triggers a retry
            return ZpdBehaviorSchema(turn_index=turn_index, **{z: tuple(v) for z, v in zones.items()})

        slots = {
            "question": format_question(question),
            "kcs": format_kcs(question),
            "state": format_state(prev_state, question),
        }
        return self._call("previewer", slots, "zpd_schema", exchanges, to_schema)

    def analyze_state(
        self,
        prev_state: CognitiveState,
        schema: ZpdBehaviorSchema | None,
        turn: DialogueTurn,
        question: Question,
        critique: ReflectionResult | None = None,
        *,
        rejected_state: CognitiveState | None = None,
        memory: ConversationMemory | None = None,
        exchanges: list[Exchange] | None = None,
    ) -> CognitiveState:
        if not prev_state.covers(question):
            raise ValidationError("prior state does not cover the question's KCs")

        def to_state(out: CognitiveStateOut) -> CognitiveState:
            found: dict[str, KcDiagnosis] = {}
            for raw_id, entry in out.root.items():
                kc = match_kc(raw_id, question)
                if kc is None:
                    log.warning("turn %d: ignoring unknown KC %r in analyzer output", turn.index, raw_id)
                    continue
                found.setdefault(kc, KcDiagnosis(MasteryLevel(entry.level), entry.explanation))
            if not found:
                raise ValueError(f"no entry matched the KC ids {list(question.kc_ids)}")
            entries: dict[str, KcDiagnosis] = {}
            for kc in question.kc_ids:
                if kc in found:
                    entries[kc] = found[kc]
                else:
                    log.warning("turn %d: analyzer omitted KC %r; carrying prior entry forward", turn.index, kc)
                    entries[kc] = KcDiagnosis(prev_state.entries[kc].level, CARRIED_FORWARD)
            return CognitiveState(turn_index=turn.index, entries=entries)

        slots = {
            "question": format_question(question),
            "kcs": format_kcs(question),
            "prev_state": format_state(prev_state, question),
            "dialogue": format_turn(turn),
        }
        if schema is not None:
            slots["schema"] = format_schema(schema)
        if critique is not None:
            slots["critique"] = critique.critique or "(no critique given)"
            if rejected_state is not None:
                slots["rejected_state"] = format_state(rejected_state, question)
            if memory is not None and memory.traces:
                slots["memory"] = format_memory(memory, question, self.config.memory_char_budget)
        return self._call("analyzer", slots, "cognitive_state", exchanges, to_state)

    def reason_performance(
        self, state: CognitiveState, question: Question, exchanges: list[Exchange] | None = None
    ) -> PerformancePrediction:
        if not state.covers(question):
            raise ValidationError("state does not cover the question's KCs")

        def to_prediction(out: PredictionOut) -> PerformancePrediction:
            label = PredictionLabel.MASTERED if out.prediction == "mastered" else PredictionLabel.NOT_MASTERED
            return PerformancePrediction(state.turn_index, label, out.rationale)

        slots = {
            "question": format_question(question),
            "kcs": format_kcs(question),
            "state": format_state(state, question),
        }
        return self._call("reasoner", slots, "prediction", exchanges, to_prediction)

    def reflect_chain(
        self,
        memory: ConversationMemory,
        question: Question,
        observed: int | None = None,
        attempt: int = 1,
        exchanges: list[Exchange] | None = None,
    ) -> ReflectionResult:
        last = memory.last
        if last is None:
            raise ValidationError("reflection needs a non-empty memory")

        def to_result(out: ReflectionOut) -> ReflectionResult:
            judgment = Judgment.ACCURATE if out.judgment == "accurate" else Judgment.INACCURATE
            return ReflectionResult(judgment, out.critique, attempt)

        slots = {
            "question": format_question(question),
            "kcs": format_kcs(question),
            "memory": format_memory(memory, question, self.config.memory_char_budget),
        }
        if observed is not None:
            slots["observed"] = (
                "the student answered correctly" if observed else "the student did not answer correctly"
            )
        return self._call("reflector", slots, "reflection", exchanges, to_result)

    # -- orchestration ----------------------------------------------------

    def run_turn(
        self,
        memory: ConversationMemory,
        prev_state: CognitiveState,
        turn: DialogueTurn,
        question: Question,
        observed: int | None = None,
        exchanges: list[Exchange] | None = None,
    ) -> tuple[TurnTrace, CognitiveState]:
        """One turn: preview (if enabled), analyze, reason, then reflect and
        rerun analyze/reason while the prediction disagrees with ``observed``,
        at most ``max_num`` times."""
        if turn.index != len(memory.traces) + 1:
            raise ValidationError(f"turn {turn.index} does not follow memory of {len(memory.traces)} traces")
        calls: list[Exchange] = []
        try:
            trace = self._turn(memory, prev_state, turn, question, observed, calls)
        finally:
            if exchanges is not None:
                exchanges.extend(calls)
        return trace, trace.final_state

    def _turn(
        self,
        memory: ConversationMemory,
        prev_state: CognitiveState,
        turn: DialogueTurn,
        question: Question,
        observed: int | None,
        calls: list[Exchange],
    ) -> TurnTrace:
        cfg = self.config

        schema = self.preview_behavior(prev_state, question, calls) if cfg.enable_previewer else None
        states = [self.analyze_state(prev_state, schema, turn, question, exchanges=calls)]
        predictions = [self.reason_performance(states[-1], question, calls)]
        reflections: list[ReflectionResult] = []

        def partial() -> TurnTrace:
            return TurnTrace(
                turn_index=turn.index,
                dialogue=turn,
                schema=schema,
                states=tuple(states),
                predictions=tuple(predictions),
                reflections=tuple(reflections),
                raw_llm_exchanges=tuple(calls),
                observed=observed,
                kc_order=question.kc_ids,
            )

        if cfg.reflection_active and observed is not None:
            while predictions[-1].label.as_int != observed and len(reflections) < cfg.max_num:
                context = memory_append(memory, partial())
                result = self.reflect_chain(context, question, observed, len(reflections) + 1, calls)
                reflections.append(result)
                if result.judgment is Judgment.ACCURATE:
                    break
                states.append(
                    self.analyze_state(
                        prev_state, schema, turn, question, result,
                        rejected_state=states[-1], memory=context, exchanges=calls,
                    )
                )
                predictions.append(self.reason_performance(states[-1], question, calls))

        return partial()

    def run_session(
        self, session: Session, observed: Sequence[int | None] | None = None
    ) -> SessionRunResult:
        """Diagnose every turn of ``session`` in order.

        ``observed`` supplies per-turn correctness for the
        ``per_turn_correctness`` signal; the ``final_label`` signal uses the
        session label on every turn; ``none`` never reflects.
        """
        if not session.turns:
            raise ValidationError(f"session {session.session_id} has no turns")
        question = session.question
        signal = self.config.reflection_signal
        if signal is ReflectionSignal.FINAL_LABEL:
            signals: list[int | None] = [session.final_label] * len(session.turns)
        elif signal is ReflectionSignal.PER_TURN_CORRECTNESS and observed is not None:
            if len(observed) != len(session.turns):
                raise ValidationError("need one observation per turn")
            signals = list(observed)
        else:
            signals = [None] * len(session.turns)

        memory = memory_purge(ConversationMemory(), session.session_id)
        state = initial_state(question)
        exchanges: list[Exchange] = []
        for turn, obs in zip(session.turns, signals):
            try:
                trace, state = self.run_turn(memory, state, turn, question, obs, exchanges)
            except ProviderError as exc:
                raise SessionRunError(session.session_id, memory, exchanges, exc) from exc
            memory = memory_append(memory, trace)
        assert memory.last is not None
        return SessionRunResult(
            session_id=session.session_id,
            memory=memory,
            final_prediction=memory.last.final_prediction,
            config_snapshot=self.config,
            exchange_log=tuple(exchanges),
        )


def run_many(
    engine: DiagnosisEngine,
    sessions: Sequence[Session],
    workers: int = 1,
) -> list[SessionRunResult | SessionRunError]:
    """Run every session; failures come back in place as ``SessionRunError``.

    Output order matches input order whatever the worker count.
    """

    def one(session: Session) -> SessionRunResult | SessionRunError:
        try:
            return engine.run_session(session)
        except SessionRunError as exc:
            log.error("%s", exc)
            return exc

    if workers <= 1:
        return [one(s) for s in sessions]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, sessions))
