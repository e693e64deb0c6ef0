"""Record/replay storage for chat completions.

A cassette is a JSON-lines file with one ``{key, request, response}`` record
per line. Keys are SHA-256 digests of the canonicalized request, so a replay
only hits when the prompt, model and decoding settings are unchanged.
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Any

from .types import CompletionRequest, CompletionResponse


def _normalize(value: Any) -> Any:
    if isinstance(value, str):
        return " ".join(value.split())
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _normalize(value[k]) for k in sorted(value, key=str)}
    return value


def canonical_request(request: CompletionRequest) -> str:
    return json.dumps(
        _normalize(request.to_dict()), sort_keys=True, ensure_ascii=True, separators=(",", ":")
    )


def canonical_key(request: CompletionRequest) -> str:
    return hashlib.sha256(canonical_request(request).encode("utf-8")).hexdigest()


def content_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class DuplicateKeyError(KeyError):
    pass


class Cassette:
    """Ordered, keyed store of recorded exchanges.

    When ``path`` is given every new record is appended to the file as it is
    made; writes go through a lock so concurrent sessions can share one
    cassette.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, dict[str, Any]] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path) -> "Cassette":
        cassette = cls(path)
        p = Path(path)
        if p.exists():
            with p.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    if rec["key"] in cassette._entries:
                        raise DuplicateKeyError(f"{p}:{lineno}: duplicate key {rec['key']}")
                    cassette._entries[rec["key"]] = rec
        return cassette

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def keys(self) -> list[str]:
        return list(self._entries)

    def lookup(self, request: CompletionRequest) -> CompletionResponse | None:
        rec = self._entries.get(canonical_key(request))
        if rec is None:
            return None
        resp = rec["response"]
        return CompletionResponse(
            content=resp["content"],
            prompt_tokens=int(resp.get("prompt_tokens", 0)),
            completion_tokens=int(resp.get("completion_tokens", 0)),
            provider="replay",
        )

    def record(self, request: CompletionRequest, response: CompletionResponse) -> str:
        key = canonical_key(request)
        rec = {"key": key, "request": request.to_dict(), "response": response.to_dict()}
        with self._lock:
            if key in self._entries:
                raise DuplicateKeyError(f"request {key} is already recorded")
            self._entries[key] = rec
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
        return key


def record(request: CompletionRequest, response: CompletionResponse, cassette: Cassette) -> Cassette:
    """Add one exchange to ``cassette``; raises ``DuplicateKeyError`` on a repeat."""
    cassette.record(request, response)
    return cassette
