"""Parse model output into validated objects, re-asking on failure."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Literal

from pydantic import BaseModel, ConfigDict, Field, RootModel, ValidationError, field_validator, model_validator

from .types import ChatMessage, CompletionRequest, CompletionResponse, ProviderError
from .providers import Provider

SchemaId = Literal["zpd_schema", "cognitive_state", "prediction", "reflection", "kc_tags", "correctness"]

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


class StructuredOutputError(ProviderError):
    """No attempt produced a valid object. ``attempts`` keeps every raw reply."""

    def __init__(
        self,
        schema_id: str,
        attempts: list[str],
        errors: list[str],
        exchanges: list[tuple[CompletionRequest, CompletionResponse]] | None = None,
    ) -> None:
        super().__init__(
            f"structured-output failure for {schema_id} after {len(attempts)} attempt(s): {errors[-1] if errors else ''}"
        )
        self.schema_id = schema_id
        self.attempts = attempts
        self.errors = errors
        self.exchanges = exchanges or []


def extract_json(text: str) -> Any:
    text = (text or "").strip()
    if not text:
        raise ValueError("empty model output")
    fenced = _FENCE_RE.findall(text)
    candidates = [f.strip() for f in fenced] + [text]
    for cand in candidates:
        try:
            return json.loads(cand)
        except json.JSONDecodeError:
            pass
        for opener, closer in ("{}", "[]"):
            start, end = cand.find(opener), cand.rfind(closer)
            if start != -1 and end > start:
                try:
                    return json.loads(cand[start : end + 1])
                except json.JSONDecodeError:
                    continue
    raise ValueError("no JSON object found in model output")


# --------------------------------------------------------------------------
# Output schemas
# --------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="ignore", str_strip_whitespace=True)


class BehaviorOut(_Strict):
    description: str = Field(min_length=1)
    kc_ids: list[str] = Field(min_length=1)

    @model_validator(mode="before")
    @classmethod
    def _aliases(cls, data: Any) -> Any:
        if isinstance(data, dict) and "kc_ids" not in data:
            for alt in ("kcs", "kc", "kc_id", "knowledge_concepts"):
                if alt in data:
                    value = data[alt]
                    data = {**data, "kc_ids": value if isinstance(value, list) else [value]}
                    break
        return data


class ZpdSchemaOut(_Strict):
    mastered: list[BehaviorOut] = []
    acquirable: list[BehaviorOut] = []
    inaccessible: list[BehaviorOut] = []

    @model_validator(mode="before")
    @classmethod
    def _lower_zones(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = {str(k).strip().lower(): v for k, v in data.items()}
            for wrapper in ("zpd_schema", "schema", "zones"):
                if isinstance(data.get(wrapper), dict):
                    data = {str(k).strip().lower(): v for k, v in data[wrapper].items()}
        return data

    @model_validator(mode="after")
    def _not_empty(self) -> "ZpdSchemaOut":
        if not (self.mastered or self.acquirable or self.inaccessible):
            raise ValueError("all three zones are empty; list at least one behavior")
        return self


class KcLevelOut(_Strict):
    level: Literal["Good", "Fair", "Poor"]
    explanation: str = Field(min_length=1)

    @field_validator("level", mode="before")
    @classmethod
    def _title(cls, v: Any) -> Any:
        return v.strip().capitalize() if isinstance(v, str) else v


class CognitiveStateOut(RootModel[dict[str, KcLevelOut]]):
    @model_validator(mode="before")
    @classmethod
    def _unwrap(cls, data: Any) -> Any:
        if isinstance(data, dict):
            for wrapper in ("cognitive_state", "state"):
                if len(data) == 1 and isinstance(data.get(wrapper), dict):
                    return data[wrapper]
        return data

    @model_validator(mode="after")
    def _not_empty(self) -> "CognitiveStateOut":
        if not self.root:
            raise ValueError("cognitive state is empty; give one entry per KC")
        return self


def _label_token(v: Any) -> str:
    return re.sub(r"[\s_\-]+", "", str(v)).lower()


class PredictionOut(_Strict):
    prediction: Literal["mastered", "not_mastered"]
    rationale: str = Field(min_length=1)

    @field_validator("prediction", mode="before")
    @classmethod
    def _norm(cls, v: Any) -> Any:
        token = _label_token(v)
        if token in ("mastered", "1", "true"):
            return "mastered"
        if token in ("notmastered", "unmastered", "0", "false"):
            return "not_mastered"
        return v


class ReflectionOut(_Strict):
    judgment: Literal["accurate", "inaccurate"]
    critique: str = ""

    @field_validator("judgment", mode="before")
    @classmethod
    def _norm(cls, v: Any) -> Any:
        token = _label_token(v)
        if token in ("accurate", "correct", "yes", "true"):
            return "accurate"
        if token in ("inaccurate", "notaccurate", "incorrect", "no", "false"):
            return "inaccurate"
        return v

    @model_validator(mode="after")
    def _critique_required(self) -> "ReflectionOut":
        if self.judgment == "inaccurate" and not self.critique:
            raise ValueError("an inaccurate judgment needs a non-empty critique")
        return self


class KcTagsOut(_Strict):
    kcs: list[str] = Field(min_length=1, max_length=5)

    @model_validator(mode="before")
    @classmethod
    def _bare_list(cls, data: Any) -> Any:
        if isinstance(data, list):
            data = {"kcs": data}
        if isinstance(data, dict) and "kcs" in data:
            items = []
            for item in data["kcs"]:
                if isinstance(item, dict):
                    item = item.get("id") or item.get("name") or ""
                items.append(item)
            data = {**data, "kcs": items}
        return data

    @field_validator("kcs")
    @classmethod
    def _clean(cls, v: list[str]) -> list[str]:
        out: list[str] = []
        for item in v:
            item = item.strip()
            if not item:
                raise ValueError("empty KC name")
            if item not in out:
                out.append(item)
        return out


class CorrectnessOut(_Strict):
    correct: bool


SCHEMAS: dict[str, type[BaseModel]] = {
    "zpd_schema": ZpdSchemaOut,
    "cognitive_state": CognitiveStateOut,
    "prediction": PredictionOut,
    "reflection": ReflectionOut,
    "kc_tags": KcTagsOut,
    "correctness": CorrectnessOut,
}


# --------------------------------------------------------------------------
# Retry loop
# --------------------------------------------------------------------------


@dataclass
class StructuredResult:
    value: Any
    attempts: int
    exchanges: list[tuple[CompletionRequest, CompletionResponse]] = field(default_factory=list)


def corrective_message(error: str) -> ChatMessage:
    return ChatMessage(
        "user",
        "Your previous reply could not be used: "
        f"{error}\nReply again with only the corrected JSON object.",
    )


def _describe(exc: Exception) -> str:
    if isinstance(exc, ValidationError):
        return "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'value'}: {err['msg']}" for err in exc.errors()
        )
    return str(exc)


def complete_structured(
    provider: Provider,
    request: CompletionRequest,
    schema_id: str,
    retry_limit: int = 2,
    postprocess: Callable[[Any], Any] | None = None,
) -> StructuredResult:
    """Ask for a ``schema_id`` object, re-asking up to ``retry_limit`` times.

    Each retry appends the failed reply and a corrective user message carrying
    the validation error. ``postprocess`` can reject a parsed object by raising
    ``ValueError``, which counts as one more failed attempt.
    """
    if schema_id not in SCHEMAS:
        raise KeyError(f"unknown schema id {schema_id!r}")
    model = SCHEMAS[schema_id]
    raw: list[str] = []
    errors: list[str] = []
    exchanges: list[tuple[CompletionRequest, CompletionResponse]] = []
    current = request
    for attempt in range(1, retry_limit + 2):
        response = provider.complete(current)
        exchanges.append((current, response))
        raw.append(response.content)
        try:
            value = model.model_validate(extract_json(response.content))
            if postprocess is not None:
                value = postprocess(value)
        except (ValueError, ValidationError) as exc:
            errors.append(_describe(exc))
            current = current.with_message(ChatMessage("assistant", response.content)).with_message(
                corrective_message(errors[-1])
            )
            continue
        return StructuredResult(value=value, attempts=attempt, exchanges=exchanges)
    raise StructuredOutputError(schema_id, raw, errors, exchanges)
