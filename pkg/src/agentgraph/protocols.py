"""Message adapters: encode/decode field maps per communication protocol.

Built-in protocols: ``json_schema`` (one JSON object), ``markdown_segments``
(one ``## field`` heading per field) and ``plain_text`` (``field: value``
paragraphs). Custom protocols register under unique names.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

JSON_SCHEMA = "json_schema"
MARKDOWN_SEGMENTS = "markdown_segments"
PLAIN_TEXT = "plain_text"

_FIELD_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.-]*$")
_FENCE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n(.*?)```", re.DOTALL)
_HEADING = re.compile(r"^##\s+(\S+)\s*$")


class ProtocolError(ValueError):
    """Unknown protocol, duplicate registration, or unencodable value."""


class DecodeError(ValueError):
    """Reply could not be decoded into any expected field."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


@dataclass
class DecodedMessage:
    fields: dict[str, Any]
    missing: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.missing


@dataclass(frozen=True)
class ProtocolCodec:
    name: str
    encode: Callable[[Mapping[str, Any]], str]
    decode: Callable[[str, list[str]], DecodedMessage]
    contract: Callable[[list[str]], str]


def _check_names(fields: Mapping[str, Any], *, strict: bool) -> None:
    for name in fields:
        if not isinstance(name, str) or not name:
            raise ProtocolError(f"field names must be non-empty strings, got {name!r}")
        if strict and not _FIELD_NAME.match(name):
            raise ProtocolError(f"field name {name!r} is not encodable under this protocol")


# -- json_schema -------------------------------------------------------------


def _encode_json(fields: Mapping[str, Any]) -> str:
    _check_names(fields, strict=False)
    try:
        return json.dumps(dict(fields), sort_keys=True, ensure_ascii=False, indent=2)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"value not JSON-encodable: {exc}") from exc


def _decode_json(text: str, expected: list[str]) -> DecodedMessage:
    candidates = [text.strip()]
    fenced = _FENCE.search(text)
    if fenced:
        candidates.insert(0, fenced.group(1).strip())
    brace_start, brace_end = text.find("{"), text.rfind("}")
    if brace_start != -1 and brace_end > brace_start:
        candidates.append(text[brace_start : brace_end + 1])

    obj = None
    for candidate in candidates:
        try:
            parsed = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(parsed, dict):
            obj = parsed
            break
    if obj is None:
        raise DecodeError("no JSON object found in reply", raw=text)
    if not expected:
        return DecodedMessage(fields=dict(obj))
    found = {name: obj[name] for name in expected if name in obj}
    missing = [name for name in expected if name not in obj]
    if not found:
        raise DecodeError(f"none of the expected fields {expected} present in reply", raw=text)
    return DecodedMessage(fields=found, missing=missing)


def _contract_json(expected: list[str]) -> str:
    shape = ", ".join(f'"{name}": "..."' for name in expected)
    return f"Reply with a single JSON object of the form {{{shape}}} and nothing else."


# -- markdown_segments -------------------------------------------------------


def _encode_markdown(fields: Mapping[str, Any]) -> str:
    _check_names(fields, strict=True)
    chunks = []
    for name, value in fields.items():
        if not isinstance(value, str):
            raise ProtocolError(f"field '{name}': markdown_segments requires string values")
        if value.endswith("\n"):
            raise ProtocolError(f"field '{name}': trailing newline is not encodable")
        if any(line.startswith("## ") for line in value.splitlines()):
            raise ProtocolError(f"field '{name}': value contains a '## ' heading line")
        chunks.append(f"## {name}\n{value}")
    return "\n\n".join(chunks)


def _decode_markdown(text: str, expected: list[str]) -> DecodedMessage:
    lines = text.splitlines()
    headings: list[tuple[int, str]] = []
    for index, line in enumerate(lines):
        match = _HEADING.match(line)
        if match:
            headings.append((index, match.group(1)))
    segments: dict[str, str] = {}
    for pos, (start, name) in enumerate(headings):
        end = headings[pos + 1][0] if pos + 1 < len(headings) else len(lines)
        body = lines[start + 1 : end]
        if body and body[-1] == "" and pos + 1 < len(headings):
            body = body[:-1]  # blank separator before the next heading
        segments[name.lower()] = "\n".join(body)
    if not expected:
        return DecodedMessage(fields=dict(segments))
    found = {name: segments[name.lower()] for name in expected if name.lower() in segments}
    missing = [name for name in expected if name.lower() not in segments]
    if not found:
        raise DecodeError(f"no '## <field>' heading matched the expected fields {expected}", raw=text)
    return DecodedMessage(fields=found, missing=missing)


def _contract_markdown(expected: list[str]) -> str:
    headings = " ".join(f"'## {name}'" for name in expected)
    return f"Reply in Markdown with exactly one section per field, using the headings {headings}."


# -- plain_text ---------------------------------------------------------------


def _encode_plain(fields: Mapping[str, Any]) -> str:
    _check_names(fields, strict=True)
    chunks = []
    for name, value in fields.items():
        if not isinstance(value, str):
            raise ProtocolError(f"field '{name}': plain_text requires flat string values")
        if "\n\n" in value or value.endswith("\n"):
            raise ProtocolError(f"field '{name}': blank lines are not encodable under plain_text")
        chunks.append(f"{name}: {value}")
    return "\n\n".join(chunks)


def _decode_plain(text: str, expected: list[str]) -> DecodedMessage:
    segments: dict[str, str] = {}
    for paragraph in text.split("\n\n"):
        if not paragraph.strip():
            continue
        head, sep, rest = paragraph.partition(":")
        if not sep or not _FIELD_NAME.match(head.strip()):
            continue
        segments[head.strip()] = rest.removeprefix(" ")
    if not expected:
        return DecodedMessage(fields=dict(segments))
    found = {name: segments[name] for name in expected if name in segments}
    missing = [name for name in expected if name not in segments]
    if not found:
        raise DecodeError(f"no '<field>: value' paragraph matched the expected fields {expected}", raw=text)
    return DecodedMessage(fields=found, missing=missing)


def _contract_plain(expected: list[str]) -> str:
    parts = "; ".join(f"'{name}: <value>'" for name in expected)
    return f"Reply in plain text with one paragraph per field, each starting {parts}, separated by blank lines."


# -- registry -----------------------------------------------------------------

_BUILTINS = {
    JSON_SCHEMA: ProtocolCodec(JSON_SCHEMA, _encode_json, _decode_json, _contract_json),
    MARKDOWN_SEGMENTS: ProtocolCodec(MARKDOWN_SEGMENTS, _encode_markdown, _decode_markdown, _contract_markdown),
    PLAIN_TEXT: ProtocolCodec(PLAIN_TEXT, _encode_plain, _decode_plain, _contract_plain),
}
_custom: dict[str, ProtocolCodec] = {}
_custom_lock = threading.Lock()


def register_protocol(codec: ProtocolCodec) -> None:
    with _custom_lock:
        if codec.name in _BUILTINS or codec.name in _custom:
            raise ProtocolError(f"protocol '{codec.name}' is already registered")
        _custom[codec.name] = codec


def get_protocol(name: str) -> ProtocolCodec:
    codec = _BUILTINS.get(name) or _custom.get(name)
    if codec is None:
        raise ProtocolError(f"unknown protocol '{name}'")
    return codec


def protocol_names() -> list[str]:
    return sorted([*_BUILTINS, *_custom])


def encode_message(protocol: str, fields: Mapping[str, Any]) -> str:
    """Render ``fields`` as text under the named protocol."""
    return get_protocol(protocol).encode(fields)


def decode_message(protocol: str, text: str, expected_fields: list[str]) -> DecodedMessage:
    """Extract ``expected_fields`` from ``text``; raises :class:`DecodeError`
    when none are present."""
    return get_protocol(protocol).decode(text, list(expected_fields))


def output_contract(protocol: str, expected_fields: list[str]) -> str:
    """The instruction sentence telling a model how to shape its reply."""
    return get_protocol(protocol).contract(list(expected_fields))
