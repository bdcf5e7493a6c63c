"""Chat-model clients: an OpenAI-compatible HTTP client and a scripted mock.

Credentials are always referenced by environment-variable name, never stored
inline. The scripted mock dispatches on prompt matchers, consumes each entry
at most once, and fails loudly when its script runs out.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import httpx

Message = tuple[str, str]  # (role, text)


class ModelError(RuntimeError):
    """Transport or protocol failure while talking to a model."""

    def __init__(self, message: str, status: int | None = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class ScriptExhaustedError(ModelError):
    """The scripted mock received a prompt with no unconsumed matching entry."""


@dataclass
class ModelReply:
    text: str
    metadata: dict[str, Any] = field(default_factory=dict)


class ChatModel(Protocol):
    name: str

    def complete(self, messages: Sequence[Message]) -> ModelReply: ...


@dataclass(frozen=True)
class ChatModelRef:
    """Serializable pointer to an OpenAI-compatible chat endpoint."""

    model_name: str
    base_url_env: str = "OPENAI_BASE_URL"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float | None = None
    max_tokens: int | None = None

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"model_name": self.model_name}
        if self.base_url_env != "OPENAI_BASE_URL":
            doc["base_url_env"] = self.base_url_env
        if self.api_key_env != "OPENAI_API_KEY":
            doc["api_key_env"] = self.api_key_env
        if self.temperature is not None:
            doc["temperature"] = self.temperature
        if self.max_tokens is not None:
            doc["max_tokens"] = self.max_tokens
        return doc

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "ChatModelRef":
        return cls(
            model_name=doc["model_name"],
            base_url_env=doc.get("base_url_env", "OPENAI_BASE_URL"),
            api_key_env=doc.get("api_key_env", "OPENAI_API_KEY"),
            temperature=doc.get("temperature"),
            max_tokens=doc.get("max_tokens"),
        )


class OpenAIChatModel:
    """Minimal chat-completions client for any OpenAI-compatible endpoint."""

    def __init__(self, ref: ChatModelRef, *, timeout: float = 120.0):
        self.ref = ref
        self.name = ref.model_name
        self._timeout = timeout

    def complete(self, messages: Sequence[Message]) -> ModelReply:
        base_url = os.environ.get(self.ref.base_url_env, "").rstrip("/")
        api_key = os.environ.get(self.ref.api_key_env, "")
        if not base_url:
            base_url = "https://api.openai.com/v1"
        payload: dict[str, Any] = {
            "model": self.ref.model_name,
            "messages": [{"role": role, "content": text} for role, text in messages],
        }
        if self.ref.temperature is not None:
            payload["temperature"] = self.ref.temperature
        if self.ref.max_tokens is not None:
            payload["max_tokens"] = self.ref.max_tokens

        started = time.monotonic()
        try:
            response = httpx.post(
                f"{base_url}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self._timeout,
            )
        except httpx.HTTPError as exc:
            raise ModelError(f"transport error calling {self.ref.model_name}: {exc}") from exc
        if response.status_code != 200:
            raise ModelError(
                f"model endpoint returned HTTP {response.status_code}",
                status=response.status_code,
                body=response.text[:500],
            )
        try:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
            raise ModelError(f"malformed completion response: {exc}", body=response.text[:500]) from exc
        metadata = {
            "latency_s": round(time.monotonic() - started, 4),
            "usage": body.get("usage", {}),
        }
        return ModelReply(text=text, metadata=metadata)


@dataclass
class ScriptEntry:
    match: str  # "*" or a substring the prompt must contain
    reply: str
    consumed: bool = False


class ScriptedChatModel:
    """Deterministic mock: replies come from an ordered (matcher, reply) script.

    Each entry is consumed at most once; the first unconsumed entry whose
    matcher hits the concatenated prompt text wins. Script consumption is
    atomic per call, so concurrently executing nodes draw distinct entries.
    """

    def __init__(self, entries: Sequence[tuple[str, str]] | Sequence[ScriptEntry], name: str = "scripted"):
        self.name = name
        self._entries = [e if isinstance(e, ScriptEntry) else ScriptEntry(*e) for e in entries]
        self._lock = threading.Lock()
        self.calls: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path, name: str | None = None) -> "ScriptedChatModel":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = raw["script"] if isinstance(raw, dict) else raw
        pairs = [(item.get("match", "*"), item["reply"]) for item in entries]
        return cls(pairs, name=name or Path(path).stem)

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def remaining(self) -> int:
        return sum(1 for e in self._entries if not e.consumed)

    def complete(self, messages: Sequence[Message]) -> ModelReply:
        prompt = "\n".join(text for _, text in messages)
        with self._lock:
            self.calls.append(prompt)
            for entry in self._entries:
                if entry.consumed:
                    continue
                if entry.match == "*" or entry.match in prompt:
                    entry.consumed = True
                    return ModelReply(text=entry.reply, metadata={"matcher": entry.match})
        raise ScriptExhaustedError(
            f"scripted model '{self.name}' has no unconsumed entry matching the prompt "
            f"(first 120 chars: {prompt[:120]!r})"
        )
