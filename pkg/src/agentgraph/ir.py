"""Workflow intermediate representation: parse, validate, serialize, diff.

A workflow document is UTF-8 JSON with top-level keys ``version``, ``nodes``
and ``edges``. Node objects carry ``id``, ``type``, ``input_fields``,
``output_fields``, ``instructions`` and ``config``; edge objects carry
``source``, ``target`` and ``attributes``. ``ENTRY`` and ``EXIT`` are
reserved ids that anchor the graph boundary and are never declared in
``nodes``.

All operations here are pure functions over immutable-in-spirit values and
are safe to call concurrently.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

ENTRY = "ENTRY"
EXIT = "EXIT"
SENTINELS = frozenset((ENTRY, EXIT))

KIND_ACTION = "Action"
KIND_GRAPH = "Graph"
KIND_LOOP = "Loop"
KIND_SWITCH = "Switch"
KIND_INTERACTION = "Interaction"
KIND_CUSTOM = "Custom"
KINDS = (KIND_ACTION, KIND_GRAPH, KIND_LOOP, KIND_SWITCH, KIND_INTERACTION, KIND_CUSTOM)

_NODE_KEYS = ("id", "type", "input_fields", "output_fields", "instructions", "config")
_EDGE_KEYS = ("source", "target", "attributes")
_TOP_KEYS = ("version", "nodes", "edges")

_PREDICATE_OPS = ("eq", "ne", "lt", "le", "gt", "ge", "contains", "truthy")
_INTERACTION_SCHEMAS = ("free_text", "accept_reject", "spec_edit")


class SpecError(ValueError):
    """Base class for workflow-document problems."""


class SpecSyntaxError(SpecError):
    """Document is not well-formed JSON; carries the failing position."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.line = line
        self.column = column


class SpecFormatError(SpecError):
    """Document is JSON but violates the record layout (missing field, duplicate id)."""


class SerializationError(SpecError):
    """Refusal to serialize a spec that still carries validation errors."""

    def __init__(self, message: str, report: "ValidationReport"):
        super().__init__(message)
        self.report = report


@dataclass
class NodeSpec:
    """One declared workflow node."""

    id: str
    kind: str
    input_fields: list[str] = field(default_factory=list)
    output_fields: list[str] = field(default_factory=list)
    instructions: str = ""
    config: dict[str, Any] = field(default_factory=dict)

    def copy(self) -> "NodeSpec":
        return NodeSpec(
            id=self.id,
            kind=self.kind,
            input_fields=list(self.input_fields),
            output_fields=list(self.output_fields),
            instructions=self.instructions,
            config=copy.deepcopy(self.config),
        )


@dataclass(frozen=True)
class EdgeSpec:
    """One directed edge; ``attributes`` may carry a routing label or protocol hint."""

    source: str
    target: str
    attributes: dict[str, Any] = field(default_factory=dict)

    def key(self) -> tuple[str, str, str]:
        return (self.source, self.target, _canon_json(self.attributes))


@dataclass(eq=False)
class WorkflowSpec:
    """Parsed workflow document.

    Equality is structural and order-insensitive: two specs are equal when
    they declare the same node records (keyed by id) and the same edge
    multiset, regardless of declaration order.
    """

    nodes: list[NodeSpec] = field(default_factory=list)
    edges: list[EdgeSpec] = field(default_factory=list)
    version: int = 1
    extras: dict[str, Any] = field(default_factory=dict)
    # Parse-time notes (unknown keys etc.); not part of structural identity.
    warnings: list[str] = field(default_factory=list, repr=False)

    def node(self, node_id: str) -> NodeSpec:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    def node_ids(self) -> list[str]:
        return [node.id for node in self.nodes]

    def has_node(self, node_id: str) -> bool:
        return any(node.id == node_id for node in self.nodes)

    def copy(self) -> "WorkflowSpec":
        return WorkflowSpec(
            nodes=[node.copy() for node in self.nodes],
            edges=[EdgeSpec(e.source, e.target, copy.deepcopy(e.attributes)) for e in self.edges],
            version=self.version,
            extras=copy.deepcopy(self.extras),
            warnings=list(self.warnings),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WorkflowSpec):
            return NotImplemented
        if self.version != other.version or self.extras != other.extras:
            return False
        mine = {node.id: node for node in self.nodes}
        theirs = {node.id: node for node in other.nodes}
        if mine.keys() != theirs.keys():
            return False
        if any(mine[node_id] != theirs[node_id] for node_id in mine):
            return False
        return sorted(e.key() for e in self.edges) == sorted(e.key() for e in other.edges)


@dataclass(frozen=True)
class Finding:
    severity: str  # "error" | "warning"
    code: str
    where: str  # node id, "source->target" for edges, "" for whole-spec findings
    message: str

    def __str__(self) -> str:
        return f"{self.severity}[{self.code}] {self.where}: {self.message}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(f.severity == "error" for f in self.findings)

    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error"]

    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "warning"]

    def __str__(self) -> str:
        if not self.findings:
            return "ok (no findings)"
        head = "ok" if self.ok else "invalid"
        lines = [f"{head} ({len(self.errors())} errors, {len(self.warnings())} warnings)"]
        lines.extend(str(f) for f in self.findings)
        return "\n".join(lines)


def _canon_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------------------
# Parsing


def parse_spec(text: str) -> WorkflowSpec:
    """Parse a workflow document.

    Raises :class:`SpecSyntaxError` on malformed JSON (position-annotated) and
    :class:`SpecFormatError` on missing required fields or duplicate node ids.
    Unknown keys are preserved (node keys fold into ``config``, edge keys into
    ``attributes``) and recorded as warnings on the returned spec.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecSyntaxError(
            f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}",
            exc.lineno,
            exc.colno,
        ) from exc
    if not isinstance(doc, dict):
        raise SpecFormatError("top-level value must be an object")
    return spec_from_doc(doc)


def spec_from_doc(doc: Mapping[str, Any]) -> WorkflowSpec:
    """Build a spec from an already-decoded document object."""
    warnings: list[str] = []

    for required in ("nodes", "edges"):
        if required not in doc:
            raise SpecFormatError(f"missing required field '{required}'")
        if not isinstance(doc[required], list):
            raise SpecFormatError(f"'{required}' must be a list")

    version = doc.get("version", 1)
    if not isinstance(version, int) or isinstance(version, bool):
        raise SpecFormatError("'version' must be an integer")

    nodes: list[NodeSpec] = []
    seen: set[str] = set()
    for index, item in enumerate(doc["nodes"]):
        if not isinstance(item, dict):
            raise SpecFormatError(f"nodes[{index}] must be an object")
        node = _node_from_doc(item, index, warnings)
        if node.id in seen:
            raise SpecFormatError(f"duplicate node id '{node.id}'")
        seen.add(node.id)
        nodes.append(node)

    edges: list[EdgeSpec] = []
    for index, item in enumerate(doc["edges"]):
        if not isinstance(item, dict):
            raise SpecFormatError(f"edges[{index}] must be an object")
        edges.append(_edge_from_doc(item, index, warnings))

    extras = {}
    for key, value in doc.items():
        if key not in _TOP_KEYS:
            extras[key] = copy.deepcopy(value)
            warnings.append(f"unknown top-level key '{key}' preserved")

    return WorkflowSpec(nodes=nodes, edges=edges, version=version, extras=extras, warnings=warnings)


def _node_from_doc(item: Mapping[str, Any], index: int, warnings: list[str]) -> NodeSpec:
    node_id = item.get("id")
    if not isinstance(node_id, str) or not node_id:
        raise SpecFormatError(f"nodes[{index}] is missing required field 'id'")
    if node_id in SENTINELS:
        raise SpecFormatError(f"'{node_id}' is reserved and must not be declared in nodes")
    kind = item.get("type")
    if not isinstance(kind, str) or not kind:
        raise SpecFormatError(f"node '{node_id}' is missing required field 'type'")
    if kind not in KINDS:
        raise SpecFormatError(f"node '{node_id}' has unknown type '{kind}' (expected one of {', '.join(KINDS)})")

    def _field_list(key: str) -> list[str]:
        raw = item.get(key, [])
        if not isinstance(raw, list) or not all(isinstance(x, str) for x in raw):
            raise SpecFormatError(f"node '{node_id}': '{key}' must be a list of strings")
        return list(raw)

    instructions = item.get("instructions", "")
    if not isinstance(instructions, str):
        raise SpecFormatError(f"node '{node_id}': 'instructions' must be a string")
    config = item.get("config", {})
    if not isinstance(config, dict):
        raise SpecFormatError(f"node '{node_id}': 'config' must be an object")
    config = copy.deepcopy(config)
    for key, value in item.items():
        if key not in _NODE_KEYS:
            config[key] = copy.deepcopy(value)
            warnings.append(f"node '{node_id}': unknown key '{key}' preserved in config")

    return NodeSpec(
        id=node_id,
        kind=kind,
        input_fields=_field_list("input_fields"),
        output_fields=_field_list("output_fields"),
        instructions=instructions,
        config=config,
    )


def _edge_from_doc(item: Mapping[str, Any], index: int, warnings: list[str]) -> EdgeSpec:
    source = item.get("source")
    target = item.get("target")
    if not isinstance(source, str) or not source:
        raise SpecFormatError(f"edges[{index}] is missing required field 'source'")
    if not isinstance(target, str) or not target:
        raise SpecFormatError(f"edges[{index}] is missing required field 'target'")
    attributes = item.get("attributes", {})
    if not isinstance(attributes, dict):
        raise SpecFormatError(f"edge {source}->{target}: 'attributes' must be an object")
    attributes = copy.deepcopy(attributes)
    for key, value in item.items():
        if key not in _EDGE_KEYS:
            attributes[key] = copy.deepcopy(value)
            warnings.append(f"edge {source}->{target}: unknown key '{key}' preserved in attributes")
    return EdgeSpec(source=source, target=target, attributes=attributes)


# ---------------------------------------------------------------------------
# Validation


def validate_spec(spec: WorkflowSpec, *, as_loop_body: bool = False) -> ValidationReport:
    """Check every structural invariant plus dataflow coverage.

    All problems are reported as findings; nothing raises. ``as_loop_body``
    relaxes the self-loop rule for specs that serve as a Loop node's body.
    """
    findings: list[Finding] = []
    add = findings.append

    declared: list[str] = []
    for node in spec.nodes:
        if not isinstance(node.id, str) or not node.id:
            add(Finding("error", "empty_id", repr(node.id), "node id must be a non-empty string"))
            continue
        if node.id in SENTINELS:
            add(Finding("error", "reserved_id", node.id, "ENTRY/EXIT are reserved and must not be declared"))
        if node.id in declared:
            add(Finding("error", "duplicate_id", node.id, "node id declared more than once"))
        declared.append(node.id)
        if node.kind not in KINDS:
            add(Finding("error", "unknown_kind", node.id, f"unknown node kind '{node.kind}'"))

    known = set(declared) | SENTINELS
    for edge in spec.edges:
        where = f"{edge.source}->{edge.target}"
        if edge.source not in known:
            add(Finding("error", "unknown_endpoint", where, f"edge source '{edge.source}' is not declared"))
        if edge.target not in known:
            add(Finding("error", "unknown_endpoint", where, f"edge target '{edge.target}' is not declared"))
        if edge.target == ENTRY:
            add(Finding("error", "entry_in_edge", where, "ENTRY has an incoming edge"))
        if edge.source == EXIT:
            add(Finding("error", "exit_out_edge", where, "EXIT has an outgoing edge"))
        if edge.source == edge.target:
            if as_loop_body:
                pass  # self-loops are legal inside a Loop body: they feed the next iteration
            else:
                add(Finding("error", "self_loop", where, "self-loop outside a Loop body"))

    _check_cycles(spec, findings, as_loop_body=as_loop_body)
    _check_reachability(spec, findings)

    for node in spec.nodes:
        _check_node(node, spec, findings)

    _check_dataflow(spec, findings)

    for note in spec.warnings:
        add(Finding("warning", "unknown_key", "", note))

    return ValidationReport(findings)


def _adjacency(spec: WorkflowSpec, *, skip_self_loops: bool) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {node.id: [] for node in spec.nodes}
    out.setdefault(ENTRY, [])
    out.setdefault(EXIT, [])
    for edge in spec.edges:
        if edge.source == edge.target and skip_self_loops:
            continue
        if edge.source in out and (edge.target in out or edge.target in SENTINELS):
            out.setdefault(edge.source, []).append(edge.target)
    return out


def _check_cycles(spec: WorkflowSpec, findings: list[Finding], *, as_loop_body: bool) -> None:
    # Tarjan SCC, iterative. Self-loops were already judged above; skip them
    # here so a permitted loop-body self-loop is not re-reported as a cycle.
    adjacency = _adjacency(spec, skip_self_loops=True)
    index_of: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    sccs: list[list[str]] = []

    def strongconnect(root: str) -> None:
        work = [(root, 0)]
        while work:
            nodeid, edge_index = work[-1]
            if edge_index == 0:
                index_of[nodeid] = low[nodeid] = counter[0]
                counter[0] += 1
                stack.append(nodeid)
                on_stack.add(nodeid)
            advanced = False
            successors = adjacency.get(nodeid, [])
            while edge_index < len(successors):
                succ = successors[edge_index]
                edge_index += 1
                if succ not in index_of:
                    work[-1] = (nodeid, edge_index)
                    work.append((succ, 0))
                    advanced = True
                    break
                if succ in on_stack:
                    low[nodeid] = min(low[nodeid], index_of[succ])
            if advanced:
                continue
            work.pop()
            if low[nodeid] == index_of[nodeid]:
                component: list[str] = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    component.append(member)
                    if member == nodeid:
                        break
                if len(component) > 1:
                    sccs.append(sorted(component))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[nodeid])

    for node in adjacency:
        if node not in index_of:
            strongconnect(node)

    for component in sorted(sccs):
        members = set(component)
        witness = [e for e in spec.edges if e.source in members and e.target in members]
        witness_text = ", ".join(f"{e.source}->{e.target}" for e in witness)
        findings.append(
            Finding(
                "error",
                "cycle",
                ",".join(component),
                f"cycle among nodes {{{', '.join(component)}}} via edges [{witness_text}]",
            )
        )


def _check_reachability(spec: WorkflowSpec, findings: list[Finding]) -> None:
    forward = _closure(spec, start=ENTRY, direction="out")
    backward = _closure(spec, start=EXIT, direction="in")
    for node in spec.nodes:
        if node.id not in forward:
            findings.append(Finding("error", "unreachable", node.id, "not reachable from ENTRY"))
        if node.id not in backward:
            findings.append(Finding("error", "no_exit_path", node.id, "cannot reach EXIT"))
    if EXIT not in forward:
        # A spec with no ENTRY->...->EXIT path executes as a no-op pass-through,
        # which is legal but almost never intended.
        findings.append(Finding("warning", "no_path", "", "EXIT is not reachable from ENTRY; the graph runs as a no-op"))


def _closure(spec: WorkflowSpec, *, start: str, direction: str) -> set[str]:
    step: dict[str, set[str]] = {}
    for edge in spec.edges:
        if edge.source == edge.target:
            continue
        if direction == "out":
            step.setdefault(edge.source, set()).add(edge.target)
        else:
            step.setdefault(edge.target, set()).add(edge.source)
    seen = {start}
    frontier = [start]
    while frontier:
        nxt = frontier.pop()
        for succ in step.get(nxt, ()):
            if succ not in seen:
                seen.add(succ)
                frontier.append(succ)
    return seen


def _check_node(node: NodeSpec, spec: WorkflowSpec, findings: list[Finding]) -> None:
    add = findings.append
    if node.kind == KIND_ACTION:
        if not node.instructions.strip():
            add(Finding("error", "action_instructions", node.id, "Action node requires non-empty instructions"))
        if not node.output_fields:
            add(Finding("error", "action_outputs", node.id, "Action node requires non-empty output_fields"))
    elif node.kind in (KIND_GRAPH, KIND_LOOP):
        body = node.config.get("body")
        if not isinstance(body, dict):
            add(Finding("error", "missing_body", node.id, f"{node.kind} node requires a nested workflow under config['body']"))
        else:
            try:
                body_spec = spec_from_doc(body)
            except SpecError as exc:
                add(Finding("error", "bad_body", node.id, f"nested workflow does not parse: {exc}"))
            else:
                nested = validate_spec(body_spec, as_loop_body=(node.kind == KIND_LOOP))
                for f in nested.findings:
                    add(Finding(f.severity, f.code, f"{node.id}/{f.where}" if f.where else node.id, f.message))
        if node.kind == KIND_LOOP:
            _check_loop_config(node, findings)
    elif node.kind == KIND_SWITCH:
        _check_switch_config(node, spec, findings)
    elif node.kind == KIND_INTERACTION:
        schema = node.config.get("schema", "free_text")
        if schema not in _INTERACTION_SCHEMAS:
            add(Finding("error", "bad_interaction", node.id, f"unknown reply schema '{schema}'"))
    elif node.kind == KIND_CUSTOM:
        if "callback" not in node.config and "composed" not in node.config:
            add(Finding("error", "custom_behavior", node.id, "Custom node requires config['callback'] or config['composed']"))


def _check_loop_config(node: NodeSpec, findings: list[Finding]) -> None:
    add = findings.append
    max_iterations = node.config.get("max_iterations")
    if max_iterations is None:
        add(Finding("warning", "loop_default_iterations", node.id, "max_iterations not set; defaulting to 1"))
    elif not isinstance(max_iterations, int) or isinstance(max_iterations, bool) or max_iterations < 1:
        add(Finding("error", "bad_loop_config", node.id, "max_iterations must be an integer >= 1"))
    condition = node.config.get("stop_condition")
    if condition is not None and not _predicate_ok(condition):
        add(Finding("error", "bad_loop_config", node.id, "stop_condition must be {key, op, value} with a known op"))


def _predicate_ok(predicate: Any) -> bool:
    if not isinstance(predicate, dict):
        return False
    if not isinstance(predicate.get("key"), str) or not predicate.get("key"):
        return False
    op = predicate.get("op", "eq")
    if op not in _PREDICATE_OPS:
        return False
    if predicate.get("source", "state") not in ("state", "input"):
        return False
    return True


def _check_switch_config(node: NodeSpec, spec: WorkflowSpec, findings: list[Finding]) -> None:
    add = findings.append
    labels = set()
    for edge in spec.edges:
        if edge.source == node.id:
            label = edge.attributes.get("label")
            if isinstance(label, str):
                labels.add(label)
    cases = node.config.get("cases", [])
    if not isinstance(cases, list):
        add(Finding("error", "bad_switch_config", node.id, "config['cases'] must be a list"))
        return
    referenced: list[str] = []
    for index, case in enumerate(cases):
        if not isinstance(case, dict) or not _predicate_ok(case.get("when")) or not isinstance(case.get("activate"), list):
            add(Finding("error", "bad_switch_config", node.id, f"cases[{index}] must be {{when: predicate, activate: [labels]}}"))
            continue
        referenced.extend(case["activate"])
    default = node.config.get("default", "none")
    if default != "none":
        if not isinstance(default, list):
            add(Finding("error", "bad_switch_config", node.id, "config['default'] must be a label list or \"none\""))
        else:
            referenced.extend(default)
    for label in referenced:
        if label not in labels:
            add(Finding("error", "switch_label", node.id, f"case references label '{label}' with no matching out-edge"))


def _check_dataflow(spec: WorkflowSpec, findings: list[Finding]) -> None:
    producers: dict[str, set[str]] = {}  # node id -> transitive upstream output fields
    parents: dict[str, set[str]] = {}
    for edge in spec.edges:
        if edge.source == edge.target:
            continue
        parents.setdefault(edge.target, set()).add(edge.source)

    outputs = {node.id: set(node.output_fields) for node in spec.nodes}
    state_keys: set[str] = set()
    for node in spec.nodes:
        for key_map in ("pull_keys", "push_keys"):
            keys = node.config.get(key_map)
            if isinstance(keys, dict):
                state_keys.update(k for k in keys if isinstance(k, str))

    def upstream(node_id: str, seen: set[str]) -> set[str]:
        if node_id in producers:
            return producers[node_id]
        if node_id in seen:
            return set()
        seen.add(node_id)
        fields: set[str] = set()
        for parent in parents.get(node_id, ()):
            fields |= outputs.get(parent, set())
            fields |= upstream(parent, seen)
        producers[node_id] = fields
        return fields

    for node in spec.nodes:
        available = upstream(node.id, set())
        for input_field in node.input_fields:
            if input_field not in available and input_field not in state_keys:
                findings.append(
                    Finding(
                        "warning",
                        "dataflow",
                        node.id,
                        f"input field '{input_field}' has no upstream producer and no declared state key",
                    )
                )


# ---------------------------------------------------------------------------
# Serialization


def node_to_doc(node: NodeSpec) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "id": node.id,
        "type": node.kind,
        "input_fields": list(node.input_fields),
        "output_fields": list(node.output_fields),
    }
    if node.instructions:
        doc["instructions"] = node.instructions
    if node.config:
        doc["config"] = _canonical_config(node.config) if node.kind in (KIND_GRAPH, KIND_LOOP) else copy.deepcopy(node.config)
    return doc


def _canonical_config(config: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(config)
    body = out.get("body")
    if isinstance(body, dict):
        try:
            out["body"] = spec_to_doc(spec_from_doc(body))
        except SpecError:
            pass  # validation reports the broken body; keep it verbatim here
    return out


def spec_to_doc(spec: WorkflowSpec) -> dict[str, Any]:
    """Canonical document form: nodes sorted by id, edges by (source, target)."""
    doc: dict[str, Any] = {
        "version": spec.version,
        "nodes": [node_to_doc(n) for n in sorted(spec.nodes, key=lambda n: n.id)],
        "edges": [],
    }
    for edge in sorted(spec.edges, key=lambda e: e.key()):
        entry: dict[str, Any] = {"source": edge.source, "target": edge.target}
        if edge.attributes:
            entry["attributes"] = copy.deepcopy(edge.attributes)
        doc["edges"].append(entry)
    for key in sorted(spec.extras):
        doc[key] = copy.deepcopy(spec.extras[key])
    return doc


def serialize_spec(spec: WorkflowSpec, *, check: bool = True) -> str:
    """Emit the canonical byte-stable document for ``spec``.

    Refuses (raises :class:`SerializationError`) when the spec carries
    validation errors, unless ``check`` is disabled.
    """
    if check:
        report = validate_spec(spec)
        if not report.ok:
            raise SerializationError(
                f"refusing to serialize a spec with {len(report.errors())} validation error(s)", report
            )
    return json.dumps(spec_to_doc(spec), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# Diff / apply


@dataclass
class SpecDelta:
    """Node/edge-level difference between two specs.

    Applying a delta to its base reproduces the target spec exactly (by
    structural equality).
    """

    added_nodes: list[NodeSpec] = field(default_factory=list)
    removed_nodes: list[str] = field(default_factory=list)
    modified_nodes: dict[str, dict[str, Any]] = field(default_factory=dict)
    added_edges: list[EdgeSpec] = field(default_factory=list)
    removed_edges: list[EdgeSpec] = field(default_factory=list)
    version_change: int | None = None
    extras_change: dict[str, Any] | None = None

    def empty(self) -> bool:
        return not (
            self.added_nodes
            or self.removed_nodes
            or self.modified_nodes
            or self.added_edges
            or self.removed_edges
            or self.version_change is not None
            or self.extras_change is not None
        )

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "added_nodes": [node_to_doc(n) for n in self.added_nodes],
            "removed_nodes": list(self.removed_nodes),
            "modified_nodes": copy.deepcopy(self.modified_nodes),
            "added_edges": [{"source": e.source, "target": e.target, "attributes": e.attributes} for e in self.added_edges],
            "removed_edges": [{"source": e.source, "target": e.target, "attributes": e.attributes} for e in self.removed_edges],
        }
        if self.version_change is not None:
            doc["version_change"] = self.version_change
        if self.extras_change is not None:
            doc["extras_change"] = copy.deepcopy(self.extras_change)
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "SpecDelta":
        warnings: list[str] = []
        return cls(
            added_nodes=[_node_from_doc(n, i, warnings) for i, n in enumerate(doc.get("added_nodes", []))],
            removed_nodes=list(doc.get("removed_nodes", [])),
            modified_nodes=copy.deepcopy(dict(doc.get("modified_nodes", {}))),
            added_edges=[_edge_from_doc(e, i, warnings) for i, e in enumerate(doc.get("added_edges", []))],
            removed_edges=[_edge_from_doc(e, i, warnings) for i, e in enumerate(doc.get("removed_edges", []))],
            version_change=doc.get("version_change"),
            extras_change=copy.deepcopy(doc.get("extras_change")),
        )


_NODE_FIELDS = ("kind", "input_fields", "output_fields", "instructions", "config")


def diff_spec(base: WorkflowSpec, target: WorkflowSpec) -> SpecDelta:
    """Minimal node/edge delta turning ``base`` into ``target``."""
    delta = SpecDelta()
    base_nodes = {n.id: n for n in base.nodes}
    target_nodes = {n.id: n for n in target.nodes}

    for node_id in sorted(base_nodes.keys() - target_nodes.keys()):
        delta.removed_nodes.append(node_id)
    for node in target.nodes:
        if node.id not in base_nodes:
            delta.added_nodes.append(node.copy())
    for node_id in sorted(base_nodes.keys() & target_nodes.keys()):
        changes: dict[str, Any] = {}
        before, after = base_nodes[node_id], target_nodes[node_id]
        for field_name in _NODE_FIELDS:
            if getattr(before, field_name) != getattr(after, field_name):
                changes[field_name] = copy.deepcopy(getattr(after, field_name))
        if changes:
            delta.modified_nodes[node_id] = changes

    base_edges = _edge_counts(base.edges)
    target_edges = _edge_counts(target.edges)
    for key in sorted(base_edges.keys() | target_edges.keys()):
        have = base_edges.get(key, [])
        want = target_edges.get(key, [])
        for edge in have[len(want):]:
            delta.removed_edges.append(edge)
        for edge in want[len(have):]:
            delta.added_edges.append(edge)

    if base.version != target.version:
        delta.version_change = target.version
    if base.extras != target.extras:
        delta.extras_change = copy.deepcopy(target.extras)
    return delta


def _edge_counts(edges: Iterator[EdgeSpec] | list[EdgeSpec]) -> dict[tuple[str, str, str], list[EdgeSpec]]:
    out: dict[tuple[str, str, str], list[EdgeSpec]] = {}
    for edge in edges:
        out.setdefault(edge.key(), []).append(edge)
    return out


def apply_delta(base: WorkflowSpec, delta: SpecDelta) -> WorkflowSpec:
    """Apply ``delta`` to ``base``, returning a new spec (base is untouched)."""
    spec = base.copy()
    spec.warnings = []

    removed = set(delta.removed_nodes)
    spec.nodes = [n for n in spec.nodes if n.id not in removed]
    for node_id, changes in delta.modified_nodes.items():
        node = spec.node(node_id)
        for field_name, value in changes.items():
            if field_name not in _NODE_FIELDS:
                raise SpecError(f"delta modifies unknown node field '{field_name}'")
            setattr(node, field_name, copy.deepcopy(value))
    for node in delta.added_nodes:
        if spec.has_node(node.id):
            raise SpecError(f"delta adds node '{node.id}' which already exists")
        spec.nodes.append(node.copy())

    for edge in delta.removed_edges:
        key = edge.key()
        for index, existing in enumerate(spec.edges):
            if existing.key() == key:
                del spec.edges[index]
                break
        else:
            raise SpecError(f"delta removes edge {edge.source}->{edge.target} which does not exist")
    for edge in delta.added_edges:
        spec.edges.append(EdgeSpec(edge.source, edge.target, copy.deepcopy(edge.attributes)))

    if delta.version_change is not None:
        spec.version = delta.version_change
    if delta.extras_change is not None:
        spec.extras = copy.deepcopy(delta.extras_change)
    return spec
