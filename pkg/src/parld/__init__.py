"""Conversational learning diagnosis: preview, analyze, reason and reflect
over multi-turn tutoring dialogues."""

from __future__ import annotations

from .datasets import load_canonical, load_comta, load_mathdial, read_sessions, write_sessions
from .engine import DiagnosisEngine, SessionRunError, SessionRunResult, run_many
from .evaluation import EvalRecord, MetricsReport, compute_metrics, emit_report, evaluate
from .models import (
    CognitiveState,
    ConversationMemory,
    DialogueTurn,
    EngineConfig,
    KnowledgeConcept,
    MasteryLevel,
    PredictionLabel,
    Question,
    ReflectionSignal,
    Session,
    TurnTrace,
    initial_state,
)
from .llm import HttpProvider, ReplayProvider
from .simulation import SimEpisode, SimMetrics, compute_sim_metrics, judge_correct, run_episode

__version__ = "0.1.0"

__all__ = [
    "CognitiveState",
    "ConversationMemory",
    "DiagnosisEngine",
    "DialogueTurn",
    "EngineConfig",
    "EvalRecord",
    "HttpProvider",
    "KnowledgeConcept",
    "MasteryLevel",
    "MetricsReport",
    "PredictionLabel",
    "Question",
    "ReflectionSignal",
    "ReplayProvider",
    "Session",
    "SessionRunError",
    "SessionRunResult",
    "SimEpisode",
    "SimMetrics",
    "TurnTrace",
    "compute_metrics",
    "compute_sim_metrics",
    "emit_report",
    "evaluate",
    "initial_state",
    "judge_correct",
    "load_canonical",
    "load_comta",
    "load_mathdial",
    "read_sessions",
    "run_episode",
    "run_many",
    "write_sessions",
]
