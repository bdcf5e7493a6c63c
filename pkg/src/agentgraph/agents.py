"""Agent behavior: perception (inputs, state, context), reasoning (one model
call plus bounded decode re-asks), action (a decoded output field map).

An agent touches graph state only through the values pulled for it and the
push keys the lifecycle writes back; everything else flows through messages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .context import ContextAdapter, ContextRequest, ContextUnit
from .models import ChatModel, ModelError
from .protocols import DecodeError, ProtocolError, decode_message, encode_message, output_contract

DEFAULT_REASKS = 2


class AgentDecodeError(RuntimeError):
    """Model reply never decoded into the expected fields; carries the raw reply."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass
class AgentConfig:
    name: str
    instructions: str
    input_fields: list[str] = field(default_factory=list)
    output_fields: list[str] = field(default_factory=list)
    pull_keys: dict[str, str] = field(default_factory=dict)
    push_keys: dict[str, str] = field(default_factory=dict)
    protocol: str = "json_schema"
    model: ChatModel | None = None
    context_adapter: ContextAdapter | None = None
    context_top_k: int = 3
    tools: list[dict[str, Any]] = field(default_factory=list)
    tool_table: dict[str, Callable[[dict[str, Any]], Any]] = field(default_factory=dict)
    max_reasks: int = DEFAULT_REASKS
    max_tool_calls: int = 4


def _render_fields(protocol: str, fields: Mapping[str, Any]) -> str:
    """Encode a section; values that the protocol cannot carry are stringified."""
    try:
        return encode_message(protocol, fields)
    except ProtocolError:
        coerced = {
            k: v if isinstance(v, str) else json.dumps(v, sort_keys=True, ensure_ascii=False)
            for k, v in fields.items()
        }
        return encode_message(protocol, coerced)


def build_prompt(
    config: AgentConfig,
    inputs: Mapping[str, Any],
    pulled_state: Mapping[str, Any],
    context: Sequence[ContextUnit] = (),
) -> str:
    """Assemble the prompt: instructions, then context, state, input, and the
    output contract, in that fixed order."""
    sections = [config.instructions.strip()]
    if context:
        lines = [f"- [{unit.source_kind}] {unit.content}" for unit in context]
        sections.append("Context:\n" + "\n".join(lines))
    if pulled_state:
        sections.append("Shared state:\n" + _render_fields(config.protocol, pulled_state))
    declared_inputs = {name: inputs[name] for name in config.input_fields if name in inputs}
    if declared_inputs:
        sections.append("Input:\n" + _render_fields(config.protocol, declared_inputs))
    if config.tools:
        tool_lines = [f"- {tool.get('name', '?')}: {tool.get('description', '')}" for tool in config.tools]
        sections.append(
            "Available tools:\n"
            + "\n".join(tool_lines)
            + '\n\nTo call a tool, reply with exactly {"tool": "<name>", "arguments": {...}} '
            "and nothing else; the result comes back in the next message."
        )
    sections.append("Output contract: " + output_contract(config.protocol, config.output_fields))
    return "\n\n".join(sections)


def gather_context(config: AgentConfig, inputs: Mapping[str, Any]) -> tuple[list[ContextUnit], str | None]:
    """Best-effort context retrieval; never fails the agent."""
    if config.context_adapter is None:
        return [], None
    query_parts = [str(v) for v in inputs.values() if isinstance(v, str)]
    query = " ".join(query_parts) or config.instructions
    try:
        units = config.context_adapter.query(ContextRequest(query=query, top_k=config.context_top_k))
        return list(units), None
    except Exception as exc:  # backing source unavailable: degrade to empty
        return [], f"context source unavailable: {exc}"


def run_agent(
    config: AgentConfig,
    inputs: Mapping[str, Any],
    pulled_state: Mapping[str, Any],
    context: Sequence[ContextUnit] | None = None,
    *,
    emit: Callable[[str, dict[str, Any]], Any] | None = None,
) -> dict[str, Any]:
    """Execute one agent step and return the decoded output field map.

    Missing declared inputs are rendered as absent (with a warning event).
    A reply that fails to decode is re-asked with the decode error appended,
    at most ``config.max_reasks`` times; transport errors propagate to the
    node failure policy.
    """
    if config.model is None:
        raise ModelError(f"agent '{config.name}' has no model attached")
    emit = emit or (lambda kind, payload: None)

    for name in config.input_fields:
        if name not in inputs:
            emit("error", {"severity": "warning", "code": "missing_input", "field": name})

    if context is None:
        context, note = gather_context(config, inputs)
        if note:
            emit("error", {"severity": "warning", "code": "context_unavailable", "detail": note})

    prompt = build_prompt(config, inputs, pulled_state, context)
    messages: list[tuple[str, str]] = [("user", prompt)]

    last_raw = ""
    reasks = 0
    tool_calls = 0
    while True:
        reply = config.model.complete(messages)
        emit(
            "model_call",
            {
                "model": getattr(config.model, "name", "?"),
                "agent": config.name,
                "attempt": reasks,
                "prompt": "\n".join(text for _, text in messages),
                "reply_chars": len(reply.text),
                **reply.metadata,
            },
        )
        last_raw = reply.text

        tool_request = _parse_tool_request(config, reply.text)
        if tool_request is not None and tool_calls < config.max_tool_calls:
            tool_calls += 1
            name, arguments = tool_request
            result_text = _invoke_tool(config, name, arguments, emit)
            messages.append(("assistant", reply.text))
            messages.append(("user", f"Tool '{name}' returned: {result_text}\nNow produce the requested output."))
            continue

        try:
            decoded = decode_message(config.protocol, reply.text, config.output_fields)
        except DecodeError as exc:
            problem = str(exc)
        else:
            if decoded.complete:
                return decoded.fields
            problem = f"missing fields: {', '.join(decoded.missing)}"
        if reasks < config.max_reasks:
            reasks += 1
            messages.append(("assistant", reply.text))
            messages.append(
                (
                    "user",
                    f"Your previous reply could not be used ({problem}). "
                    + output_contract(config.protocol, config.output_fields),
                )
            )
            continue
        raise AgentDecodeError(
            f"agent '{config.name}' got no decodable reply after {config.max_reasks} re-ask(s)", raw=last_raw
        )


def _parse_tool_request(config: AgentConfig, text: str) -> tuple[str, dict[str, Any]] | None:
    """A reply of the shape {"tool": name, "arguments": {...}} asks for a tool,
    provided the name is declared and "tool" is not itself an output field."""
    if not config.tools or "tool" in config.output_fields:
        return None
    try:
        decoded = decode_message("json_schema", text, [])
    except DecodeError:
        return None
    name = decoded.fields.get("tool")
    declared = {t.get("name") for t in config.tools}
    if not isinstance(name, str) or name not in declared:
        return None
    arguments = decoded.fields.get("arguments")
    return name, dict(arguments) if isinstance(arguments, dict) else {}


def _invoke_tool(
    config: AgentConfig,
    name: str,
    arguments: dict[str, Any],
    emit: Callable[[str, dict[str, Any]], Any],
) -> str:
    fn = config.tool_table.get(name)
    if fn is None:
        emit("error", {"severity": "warning", "code": "tool_unregistered", "tool": name})
        return f"error: tool '{name}' is declared but has no registered implementation"
    try:
        result = fn(arguments)
    except Exception as exc:  # the model sees the failure and may recover
        emit("error", {"severity": "warning", "code": "tool_failed", "tool": name, "detail": str(exc)})
        return f"error: {exc}"
    emit("error", {"severity": "info", "code": "tool_call", "tool": name, "arguments": arguments})
    try:
        return json.dumps(result, ensure_ascii=False, default=str)
    except (TypeError, ValueError):
        return str(result)
