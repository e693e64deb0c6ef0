from .cassette import Cassette, DuplicateKeyError, canonical_key, content_digest, record
from .providers import (
    HttpProvider,
    Provider,
    RecordingProvider,
    ReplayProvider,
    ScriptedProvider,
    TokenBucket,
    template_of,
)
from .structured import StructuredOutputError, StructuredResult, complete_structured, extract_json
from .types import (
    CassetteMiss,
    ChatMessage,
    CompletionRequest,
    CompletionResponse,
    ProviderError,
    TransportError,
)

__all__ = [
    "Cassette",
    "CassetteMiss",
    "ChatMessage",
    "CompletionRequest",
    "CompletionResponse",
    "DuplicateKeyError",
    "HttpProvider",
    "Provider",
    "ProviderError",
    "RecordingProvider",
    "ReplayProvider",
    "ScriptedProvider",
    "StructuredOutputError",
    "StructuredResult",
    "TokenBucket",
    "TransportError",
    "canonical_key",
    "complete",
    "complete_structured",
    "content_digest",
    "extract_json",
    "record",
    "template_of",
]


def complete(provider: Provider, request: CompletionRequest) -> CompletionResponse:
    return provider.complete(request)
