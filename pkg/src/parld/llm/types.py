from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Literal, Mapping

Role = Literal["system", "user", "assistant"]
ProviderName = Literal["http", "scripted", "replay"]


class ProviderError(RuntimeError):
    """Base class for failures raised by a completion backend."""


class TransportError(ProviderError):
    """The HTTP backend gave up after its retries."""


class CassetteMiss(ProviderError):
    def __init__(self, digest: str) -> None:
        super().__init__(f"cassette miss for request digest {digest}")
        self.digest = digest


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad chat role {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise ValueError(f"{self.role} message must have content")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int | None = None
    json_mode: bool = False
    # "template_id@version"; part of the cassette key so template drift is a miss
    tag: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("request has no messages")
        if self.messages[0].role != "system":
            raise ValueError("first message must have role 'system'")

    def with_message(self, message: ChatMessage) -> "CompletionRequest":
        return CompletionRequest(
            model=self.model,
            messages=(*self.messages, message),
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            json_mode=self.json_mode,
            tag=self.tag,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [m.to_dict() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "json_mode": self.json_mode,
            "tag": self.tag,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CompletionRequest":
        return cls(
            model=data["model"],
            messages=tuple(ChatMessage(m["role"], m["content"]) for m in data["messages"]),
            temperature=float(data.get("temperature", 0.0)),
            max_tokens=data.get("max_tokens"),
            json_mode=bool(data.get("json_mode", False)),
            tag=data.get("tag", ""),
        )


@dataclass(frozen=True)
class CompletionResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    provider: ProviderName = "scripted"

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "content": self.content,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }
