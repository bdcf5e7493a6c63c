"""Interaction channels: how a running graph reaches a human (or a script).

A channel answers :class:`InteractionRequest` records. The engine blocks the
asking node (other ready nodes keep executing) until the channel returns a
payload; requests are matched to replies by ``request_id``, so replies may
arrive in any order.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

REPLY_SCHEMAS = ("free_text", "accept_reject", "spec_edit")


class ChannelClosed(RuntimeError):
    """The channel cannot answer (closed stream, exhausted script)."""


@dataclass(frozen=True)
class InteractionRequest:
    request_id: str
    node_id: str
    prompt: str
    schema: str = "free_text"

    def to_doc(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "node_id": self.node_id,
            "prompt": self.prompt,
            "schema": self.schema,
        }


class InteractionChannel(Protocol):
    def ask(self, request: InteractionRequest) -> Any: ...


class AutoAcceptChannel:
    """Non-interactive mode: accept everything, defaults for free-text asks."""

    def ask(self, request: InteractionRequest) -> Any:
        if request.schema in ("accept_reject", "spec_edit"):
            return "accept"
        return ""


class TerminalChannel:
    """Prompt on stdin; an EOF counts as a closed channel."""

    def ask(self, request: InteractionRequest) -> Any:
        print(f"\n[{request.node_id}] {request.prompt}")
        if request.schema == "accept_reject":
            print("Reply 'accept' to approve, or type feedback:")
        try:
            reply = input("> ")
        except EOFError as exc:
            raise ChannelClosed("stdin closed") from exc
        return reply


@dataclass
class ScriptEntry:
    reply: Any
    node: str | None = None  # optional substring filter on the asking node id
    consumed: bool = False


class ScriptedChannel:
    """Deterministic responder: ordered replies, optionally filtered by node.

    Entries are consumed once; a request takes the first unconsumed entry
    whose node filter (if any) matches. Exhaustion behaves as a closed
    channel, which triggers the asking node's closed-channel policy.
    """

    def __init__(self, entries: list[Any] | None = None):
        self._entries: list[ScriptEntry] = []
        self._lock = threading.Lock()
        self.asked: list[InteractionRequest] = []
        for item in entries or []:
            if isinstance(item, ScriptEntry):
                self._entries.append(item)
            elif isinstance(item, dict) and "reply" in item:
                self._entries.append(ScriptEntry(reply=item["reply"], node=item.get("node")))
            else:
                self._entries.append(ScriptEntry(reply=item))

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedChannel":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = raw["replies"] if isinstance(raw, dict) else raw
        return cls(entries)

    def ask(self, request: InteractionRequest) -> Any:
        with self._lock:
            self.asked.append(request)
            for entry in self._entries:
                if entry.consumed:
                    continue
                if entry.node is not None and entry.node not in request.node_id:
                    continue
                entry.consumed = True
                return entry.reply
        raise ChannelClosed(f"scripted channel has no reply left for request '{request.request_id}'")


@dataclass
class _Pending:
    request: InteractionRequest
    event: threading.Event = field(default_factory=threading.Event)
    payload: Any = None
    answered: bool = False


class BrokerChannel:
    """Queue requests for remote clients; first valid response per id wins.

    Used by the serve endpoint: the engine blocks in :meth:`ask` while any
    number of connected clients may observe the pending list and race to
    answer. Duplicate responses are ignored; responses for unknown ids are
    rejected.
    """

    def __init__(self) -> None:
        self._pending: dict[str, _Pending] = {}
        self._lock = threading.Lock()
        self._closed = False
        self.listeners: list[Any] = []  # callables fed new requests, for push streams

    def pending_requests(self) -> list[InteractionRequest]:
        with self._lock:
            return [p.request for p in self._pending.values() if not p.answered]

    def ask(self, request: InteractionRequest) -> Any:
        with self._lock:
            if self._closed:
                raise ChannelClosed("broker is shut down")
            slot = _Pending(request=request)
            self._pending[request.request_id] = slot
            listeners = list(self.listeners)
        for listener in listeners:
            listener(request)
        slot.event.wait()
        with self._lock:
            self._pending.pop(request.request_id, None)
            if not slot.answered:
                raise ChannelClosed("broker shut down while waiting")
            return slot.payload

    def resolve(self, request_id: str, payload: Any) -> tuple[bool, str]:
        """Deliver a response; returns (accepted, reason)."""
        with self._lock:
            slot = self._pending.get(request_id)
            if slot is None:
                return False, f"no pending request with id '{request_id}'"
            if slot.answered:
                return False, "duplicate response ignored"
            if slot.request.schema == "spec_edit" and not isinstance(payload, (dict, str)):
                return False, "spec_edit replies must be an edit object or text"
            slot.answered = True
            slot.payload = payload
            slot.event.set()
            return True, "accepted"

    def close(self) -> None:
        with self._lock:
            self._closed = True
            slots = list(self._pending.values())
        for slot in slots:
            slot.event.set()

    def reopen(self) -> None:
        """Accept requests again after a fail-fast close; listeners persist."""
        with self._lock:
            self._closed = False


def channel_from_mode(mode: str) -> InteractionChannel:
    """Build a channel from a CLI ``--interaction`` mode string."""
    if mode == "auto":
        return AutoAcceptChannel()
    if mode == "terminal":
        return TerminalChannel()
    if mode.startswith("scripted:"):
        return ScriptedChannel.from_file(mode.split(":", 1)[1])
    if mode == "serve":
        return BrokerChannel()
    raise ValueError(f"unknown interaction mode '{mode}'")
