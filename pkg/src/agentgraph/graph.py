"""Compile workflow specs (or imperative builder calls) into runtime graphs.

A :class:`RuntimeGraph` is immutable in topology once built; only its
:class:`GraphState` mutates at run time, and only through the scheduler.
Composed nodes expand at build time, before adjacency is frozen, so the
scheduler always works over a static graph.
"""

from __future__ import annotations

import copy
import heapq
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .ir import (
    ENTRY,
    EXIT,
    KIND_ACTION,
    KIND_CUSTOM,
    KIND_GRAPH,
    KIND_INTERACTION,
    KIND_LOOP,
    KIND_SWITCH,
    KINDS,
    SENTINELS,
    EdgeSpec,
    NodeSpec,
    ValidationReport,
    WorkflowSpec,
    spec_from_doc,
    validate_spec,
)
from .models import ChatModel, ChatModelRef, OpenAIChatModel

_EXPANSION_DEPTH_LIMIT = 32


class BuildError(ValueError):
    """Graph construction failed; carries the validation report when one exists."""

    def __init__(self, message: str, report: ValidationReport | None = None):
        if report is not None and report.errors():
            details = "; ".join(str(f) for f in report.errors()[:8])
            message = f"{message}: {details}"
        super().__init__(message)
        self.report = report


class RegistryError(ValueError):
    pass


class DuplicateNodeError(BuildError):
    pass


class UnknownEndpointError(BuildError):
    pass


# ---------------------------------------------------------------------------
# Predicates and flow-control configs


@dataclass(frozen=True)
class Predicate:
    """Named-key comparison over graph state or the inbound payload."""

    key: str
    op: str = "eq"
    value: Any = None
    source: str = "state"  # "state" | "input"

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Predicate":
        return cls(
            key=doc["key"],
            op=doc.get("op", "eq"),
            value=doc.get("value"),
            source=doc.get("source", "state"),
        )

    def evaluate(self, state: Mapping[str, Any], inputs: Mapping[str, Any]) -> bool:
        scope = state if self.source == "state" else inputs
        present = self.key in scope
        actual = scope.get(self.key)
        if self.op == "truthy":
            return bool(actual)
        if not present:
            return False
        if self.op == "eq":
            return actual == self.value
        if self.op == "ne":
            return actual != self.value
        if self.op == "contains":
            try:
                return self.value in actual
            except TypeError:
                return False
        try:
            if self.op == "lt":
                return actual < self.value
            if self.op == "le":
                return actual <= self.value
            if self.op == "gt":
                return actual > self.value
            if self.op == "ge":
                return actual >= self.value
        except TypeError:
            return False
        raise ValueError(f"unknown predicate op '{self.op}'")


@dataclass(frozen=True)
class LoopConfig:
    max_iterations: int = 1
    stop_condition: Predicate | None = None

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "LoopConfig":
        condition = config.get("stop_condition")
        return cls(
            max_iterations=int(config.get("max_iterations", 1)),
            stop_condition=Predicate.from_doc(condition) if condition else None,
        )


@dataclass(frozen=True)
class SwitchCase:
    when: Predicate
    activate: tuple[str, ...]


@dataclass(frozen=True)
class SwitchConfig:
    cases: tuple[SwitchCase, ...] = ()
    default: tuple[str, ...] | None = None  # None encodes "none": skip every branch

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "SwitchConfig":
        cases = tuple(
            SwitchCase(when=Predicate.from_doc(c["when"]), activate=tuple(c["activate"]))
            for c in config.get("cases", [])
        )
        default = config.get("default", "none")
        return cls(cases=cases, default=None if default == "none" else tuple(default))

    def route(self, state: Mapping[str, Any], inputs: Mapping[str, Any]) -> tuple[str, ...]:
        """Labels activated by the first matching case, else the default set."""
        for case in self.cases:
            if case.when.evaluate(state, inputs):
                return case.activate
        return self.default if self.default is not None else ()


@dataclass(frozen=True)
class RetryPolicy:
    count: int = 0
    backoff_s: float = 0.0

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "RetryPolicy":
        raw = config.get("retries")
        if isinstance(raw, int):
            return cls(count=raw)
        if isinstance(raw, Mapping):
            return cls(count=int(raw.get("count", 0)), backoff_s=float(raw.get("backoff_s", 0.0)))
        return cls()


# ---------------------------------------------------------------------------
# Graph state


class GraphState:
    """Key-value attributes plus the ordered write log that produced them."""

    def __init__(self, initial: Mapping[str, Any] | None = None):
        self._initial = dict(initial or {})
        self.attributes: dict[str, Any] = dict(self._initial)
        self.write_log: list[tuple[str, str, Any]] = []
        self._lock = threading.Lock()

    @property
    def initial(self) -> dict[str, Any]:
        return dict(self._initial)

    def commit(self, writer: str, key: str, value: Any) -> None:
        with self._lock:
            self.write_log.append((writer, key, value))
            self.attributes[key] = value

    def replay(self) -> dict[str, Any]:
        """Fold the write log over the initial attributes (consistency check)."""
        out = dict(self._initial)
        for _, key, value in self.write_log:
            out[key] = value
        return out


# ---------------------------------------------------------------------------
# Runtime structures


@dataclass
class RuntimeEdge:
    source: str
    target: str
    attributes: dict[str, Any]
    index: int  # declaration order; drives input aggregation

    @property
    def label(self) -> str | None:
        label = self.attributes.get("label")
        return label if isinstance(label, str) else None


@dataclass
class RuntimeNode:
    id: str
    kind: str
    input_fields: list[str]
    output_fields: list[str]
    instructions: str
    config: dict[str, Any]
    spec: NodeSpec
    # Kind-specific resolutions (filled by build_graph):
    callback: Callable[..., dict[str, Any]] | None = None
    model: ChatModel | None = None
    body: "RuntimeGraph | None" = None
    loop: LoopConfig | None = None
    switch: SwitchConfig | None = None
    retries: RetryPolicy = field(default_factory=RetryPolicy)
    tool_table: dict[str, Callable[[dict[str, Any]], Any]] = field(default_factory=dict)
    context_adapter: Any = None

    @property
    def pull_keys(self) -> dict[str, str]:
        keys = self.config.get("pull_keys")
        return dict(keys) if isinstance(keys, Mapping) else {}

    @property
    def push_keys(self) -> dict[str, str]:
        keys = self.config.get("push_keys")
        return dict(keys) if isinstance(keys, Mapping) else {}

    @property
    def protocol(self) -> str:
        return self.config.get("protocol", "json_schema")


class RuntimeGraph:
    """Executable graph: nodes, frozen adjacency, state, parent linkage."""

    def __init__(self, name: str, parent: "RuntimeGraph | None" = None):
        self.name = name
        self.parent = parent
        self.nodes: dict[str, RuntimeNode] = {}
        self.edges: list[RuntimeEdge] = []
        self.in_edges: dict[str, list[RuntimeEdge]] = {ENTRY: [], EXIT: []}
        self.out_edges: dict[str, list[RuntimeEdge]] = {ENTRY: [], EXIT: []}
        self.state = GraphState()
        self.topo_index: dict[str, int] = {}
        self.ancestors: dict[str, frozenset[str]] = {}

    @property
    def root(self) -> "RuntimeGraph":
        graph = self
        while graph.parent is not None:
            graph = graph.parent
        return graph

    def node_ids(self) -> list[str]:
        return list(self.nodes)

    def _add_node(self, node: RuntimeNode) -> None:
        self.nodes[node.id] = node
        self.in_edges.setdefault(node.id, [])
        self.out_edges.setdefault(node.id, [])

    def _add_edge(self, edge: RuntimeEdge) -> None:
        self.edges.append(edge)
        self.in_edges.setdefault(edge.target, []).append(edge)
        self.out_edges.setdefault(edge.source, []).append(edge)

    def _freeze(self) -> None:
        """Compute the deterministic topological order and ancestor sets."""
        indegree = {nid: 0 for nid in self.nodes}
        for edge in self.edges:
            if edge.target in indegree and edge.source in indegree and edge.source != edge.target:
                indegree[edge.target] += 1
        available = sorted(nid for nid, deg in indegree.items() if deg == 0)
        order: list[str] = []
        heapq.heapify(available)
        while available:
            nid = heapq.heappop(available)
            order.append(nid)
            for edge in self.out_edges.get(nid, []):
                if edge.target in indegree and edge.source != edge.target:
                    indegree[edge.target] -= 1
                    if indegree[edge.target] == 0:
                        heapq.heappush(available, edge.target)
        self.topo_index = {nid: i for i, nid in enumerate(order)}

        ancestors: dict[str, set[str]] = {nid: set() for nid in self.nodes}
        for nid in order:
            for edge in self.in_edges.get(nid, []):
                if edge.source in self.nodes and edge.source != nid:
                    ancestors[nid].add(edge.source)
                    ancestors[nid] |= ancestors[edge.source]
        self.ancestors = {nid: frozenset(a) for nid, a in ancestors.items()}


def extract_spec(graph: RuntimeGraph) -> WorkflowSpec:
    """Re-extract a spec from a built graph (inverse of compilation, post-expansion)."""
    return WorkflowSpec(
        nodes=[graph.nodes[nid].spec.copy() for nid in graph.nodes],
        edges=[EdgeSpec(e.source, e.target, copy.deepcopy(e.attributes)) for e in graph.edges],
    )


# ---------------------------------------------------------------------------
# Registry


@dataclass(frozen=True)
class ComposedGraphDef:
    """A named, parameterized subgraph expansion applied at build time."""

    name: str
    expand: Callable[[dict[str, Any]], WorkflowSpec]


class Registry:
    """In-process name resolution for composed graphs, callbacks and models."""

    def __init__(self) -> None:
        self._composed: dict[str, ComposedGraphDef] = {}
        self._callbacks: dict[str, Callable[..., dict[str, Any]]] = {}
        self._tools: dict[str, Callable[[dict[str, Any]], Any]] = {}
        self._contexts: dict[str, Any] = {}
        self._models: dict[str, ChatModel] = {}
        self._default_model: str | None = None

    # -- composed graphs
    def register_composed(self, definition: ComposedGraphDef) -> "Registry":
        if definition.name in self._composed:
            raise RegistryError(f"composed graph '{definition.name}' is already registered")
        self._composed[definition.name] = definition
        return self

    def composed(self, name: str) -> ComposedGraphDef:
        try:
            return self._composed[name]
        except KeyError:
            raise RegistryError(f"no composed graph registered under '{name}'") from None

    def composed_names(self) -> list[str]:
        return sorted(self._composed)

    # -- custom callbacks
    def register_callback(self, name: str, fn: Callable[..., dict[str, Any]]) -> "Registry":
        if name in self._callbacks:
            raise RegistryError(f"callback '{name}' is already registered")
        self._callbacks[name] = fn
        return self

    def callback(self, name: str) -> Callable[..., dict[str, Any]]:
        try:
            return self._callbacks[name]
        except KeyError:
            raise RegistryError(f"no callback registered under '{name}'") from None

    # -- agent tools
    def register_tool(self, name: str, fn: Callable[[dict[str, Any]], Any]) -> "Registry":
        if name in self._tools:
            raise RegistryError(f"tool '{name}' is already registered")
        self._tools[name] = fn
        return self

    def tool(self, name: str) -> Callable[[dict[str, Any]], Any] | None:
        return self._tools.get(name)

    # -- context adapters
    def register_context(self, name: str, adapter: Any) -> "Registry":
        if name in self._contexts:
            raise RegistryError(f"context adapter '{name}' is already registered")
        self._contexts[name] = adapter
        return self

    def context(self, name: str) -> Any:
        try:
            return self._contexts[name]
        except KeyError:
            raise RegistryError(f"no context adapter registered under '{name}'") from None

    # -- models
    def register_model(self, name: str, model: ChatModel, *, default: bool = False) -> "Registry":
        self._models[name] = model
        if default or self._default_model is None:
            self._default_model = name
        return self

    def model(self, name: str) -> ChatModel:
        try:
            return self._models[name]
        except KeyError:
            raise RegistryError(f"no model registered under '{name}'") from None

    @property
    def default_model(self) -> ChatModel | None:
        return self._models.get(self._default_model) if self._default_model else None

    def resolve_model(self, config_value: Any) -> ChatModel | None:
        if config_value is None:
            return self.default_model
        if isinstance(config_value, str):
            return self.model(config_value)
        if isinstance(config_value, Mapping):
            return OpenAIChatModel(ChatModelRef.from_doc(dict(config_value)))
        return config_value  # already a model object


# ---------------------------------------------------------------------------
# Node templates


_REQUIRED = object()

_SPEC_FIELD_PARAMS = ("instructions", "input_fields", "output_fields")


def _safe_deepcopy(value: Any) -> Any:
    try:
        return copy.deepcopy(value)
    except TypeError:
        return value  # locks, sockets, model clients: shared by design


class NodeTemplate:
    """A deferred node declaration: frozen parameter defaults, cloned on use.

    ``target`` is either a node kind (``Action``, ``Loop``, ...) or the name
    of a registered composed graph. Instantiation deep-copies every binding
    so instances never alias each other or the template.
    """

    def __init__(self, target: str, *, required: Iterable[str] = (), **defaults: Any):
        self.target = target
        self.required = tuple(required)
        self.defaults = {k: _safe_deepcopy(v) for k, v in defaults.items()}

    def clone(self) -> "NodeTemplate":
        return NodeTemplate(self.target, required=self.required, **self.defaults)

    def parameter_names(self) -> set[str]:
        return set(self.required) | set(self.defaults)

    def instantiate(self, node_id: str = "", **overrides: Any) -> NodeSpec:
        known = self.parameter_names() | set(_SPEC_FIELD_PARAMS) | {"config"}
        for name in overrides:
            if name not in known:
                raise BuildError(f"unknown template parameter '{name}' (declared: {sorted(known)})")
        missing = [name for name in self.required if name not in overrides and name not in self.defaults]
        if missing:
            raise BuildError(f"missing required template parameter(s): {', '.join(missing)}")

        params = {k: _safe_deepcopy(v) for k, v in self.defaults.items()}
        params.update({k: _safe_deepcopy(v) for k, v in overrides.items()})

        instructions = params.pop("instructions", "")
        input_fields = list(params.pop("input_fields", []))
        output_fields = list(params.pop("output_fields", []))
        config = dict(params.pop("config", {}))

        if self.target in KINDS:
            config.update(params)
            return NodeSpec(
                id=node_id,
                kind=self.target,
                input_fields=input_fields,
                output_fields=output_fields,
                instructions=instructions,
                config=config,
            )
        config["composed"] = self.target
        config["params"] = params
        return NodeSpec(
            id=node_id,
            kind=KIND_CUSTOM,
            input_fields=input_fields,
            output_fields=output_fields,
            instructions=instructions,
            config=config,
        )


# ---------------------------------------------------------------------------
# Composed-node expansion


def _merge_attrs(inner: Mapping[str, Any], outer: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(inner)
    merged.update(outer)  # the enclosing graph's edge wins on conflicts
    return merged


def _splice(spec: WorkflowSpec, node_id: str, fragment: WorkflowSpec) -> WorkflowSpec:
    """Replace ``node_id`` with ``fragment``, resolving the fragment's
    ENTRY/EXIT to the mount point's in/out edges."""
    existing = set(spec.node_ids()) - {node_id}
    for fragment_node in fragment.nodes:
        if fragment_node.id in existing:
            raise BuildError(
                f"expansion of '{node_id}' produced an invalid fragment: node id "
                f"'{fragment_node.id}' collides with an existing node"
            )

    heads = [e for e in fragment.edges if e.source == ENTRY]
    tails = [e for e in fragment.edges if e.target == EXIT]
    internal = [e for e in fragment.edges if e.source != ENTRY and e.target != EXIT]

    nodes = [n for n in spec.nodes if n.id != node_id] + [n.copy() for n in fragment.nodes]
    edges: list[EdgeSpec] = []
    for edge in spec.edges:
        if edge.target == node_id and edge.source == node_id:
            raise BuildError(f"composed node '{node_id}' must not carry a self-loop")
        if edge.target == node_id:
            for head in heads:
                edges.append(EdgeSpec(edge.source, head.target, _merge_attrs(head.attributes, edge.attributes)))
        elif edge.source == node_id:
            for tail in tails:
                edges.append(EdgeSpec(tail.source, edge.target, _merge_attrs(tail.attributes, edge.attributes)))
        else:
            edges.append(edge)
    edges.extend(internal)

    out = WorkflowSpec(nodes=nodes, edges=edges, version=spec.version, extras=copy.deepcopy(spec.extras))
    return out


def _composed_name(node: NodeSpec) -> str | None:
    if node.kind == KIND_CUSTOM and isinstance(node.config.get("composed"), str):
        return node.config["composed"]
    return None


def expand_composed(
    spec: WorkflowSpec,
    registry: Registry,
    *,
    context: Mapping[str, Any] | None = None,
    order: Sequence[str] | None = None,
) -> WorkflowSpec:
    """Expand every composed node in place until none remain.

    ``order`` overrides the default declaration-order processing (expansion
    is local, so any order yields the same adjacency). ``context`` entries
    are injected into expansion parameters under their reserved ``_`` names.
    """
    current = spec
    for _ in range(_EXPANSION_DEPTH_LIMIT):
        pending = [n for n in current.nodes if _composed_name(n)]
        if not pending:
            return current
        if order:
            ranked = {nid: i for i, nid in enumerate(order)}
            pending.sort(key=lambda n: ranked.get(n.id, len(ranked)))
        node = pending[0]
        definition = registry.composed(_composed_name(node))  # RegistryError if unresolvable
        params = dict(node.config.get("params", {}))
        params.setdefault("_node_id", node.id)
        for key, value in (context or {}).items():
            params.setdefault(key, value)
        fragment = definition.expand(params)
        report = validate_spec(fragment, as_loop_body=False)
        if not report.ok:
            raise BuildError(f"expansion of '{node.id}' ({definition.name}) produced an invalid fragment", report)
        current = _splice(current, node.id, fragment)
    raise BuildError(f"composed expansion exceeded depth limit ({_EXPANSION_DEPTH_LIMIT}); recursive definition?")


# ---------------------------------------------------------------------------
# build_graph


def build_graph(
    spec: WorkflowSpec,
    registry: Registry | None = None,
    *,
    name: str = "root",
    parent: RuntimeGraph | None = None,
    channel: Any = None,
    trace: Any = None,
    as_loop_body: bool = False,
) -> RuntimeGraph:
    """Compile an error-free spec into an executable :class:`RuntimeGraph`.

    Nested Graph/Loop bodies are built recursively with ``parent`` set;
    composed nodes are expanded before adjacency is frozen.
    """
    if registry is None:
        registry = default_registry()

    report = validate_spec(spec, as_loop_body=as_loop_body)
    if not report.ok:
        raise BuildError("spec has validation errors", report)

    expanded = expand_composed(spec, registry, context={"_registry": registry, "_channel": channel, "_trace": trace})
    if expanded is not spec:
        report = validate_spec(expanded, as_loop_body=as_loop_body)
        if not report.ok:
            raise BuildError("expanded spec has validation errors", report)

    graph = RuntimeGraph(name=name, parent=parent)
    for node_spec in expanded.nodes:
        graph._add_node(_build_node(node_spec, registry, graph, channel=channel, trace=trace))
    for index, edge in enumerate(expanded.edges):
        graph._add_edge(RuntimeEdge(edge.source, edge.target, copy.deepcopy(edge.attributes), index))
    graph._freeze()
    return graph


def _build_node(
    node_spec: NodeSpec,
    registry: Registry,
    graph: RuntimeGraph,
    *,
    channel: Any,
    trace: Any,
) -> RuntimeNode:
    node = RuntimeNode(
        id=node_spec.id,
        kind=node_spec.kind,
        input_fields=list(node_spec.input_fields),
        output_fields=list(node_spec.output_fields),
        instructions=node_spec.instructions,
        config=copy.deepcopy(node_spec.config),
        spec=node_spec.copy(),
        retries=RetryPolicy.from_config(node_spec.config),
    )
    if node.kind == KIND_ACTION:
        model = registry.resolve_model(node.config.get("model"))
        if model is None:
            raise BuildError(f"Action node '{node.id}' has no model: set config['model'] or register a default")
        node.model = model
        for declaration in node.config.get("tools", []):
            name = declaration.get("name") if isinstance(declaration, Mapping) else None
            if isinstance(name, str):
                fn = registry.tool(name)
                if fn is not None:
                    node.tool_table[name] = fn
        context_name = node.config.get("context")
        if isinstance(context_name, str):
            node.context_adapter = registry.context(context_name)
    elif node.kind == KIND_CUSTOM:
        callback = node.config.get("callback")
        node.callback = registry.callback(callback) if isinstance(callback, str) else callback
    elif node.kind in (KIND_GRAPH, KIND_LOOP):
        body_spec = spec_from_doc(node.config["body"])
        node.body = build_graph(
            body_spec,
            registry,
            name=node.id,
            parent=graph,
            channel=channel,
            trace=trace,
            as_loop_body=(node.kind == KIND_LOOP),
        )
        if node.kind == KIND_LOOP:
            node.loop = LoopConfig.from_config(node.config)
    elif node.kind == KIND_SWITCH:
        node.switch = SwitchConfig.from_config(node.config)
    return node


# ---------------------------------------------------------------------------
# Imperative builder


class GraphBuilder:
    """Programmatic graph construction: add nodes and edges, then build.

    Edge declaration order is preserved; it defines downstream input
    aggregation order.
    """

    def __init__(self, name: str = "root", version: int = 1):
        self.name = name
        self.version = version
        self._nodes: list[tuple[str, NodeSpec | NodeTemplate]] = []
        self._edges: list[EdgeSpec] = []

    @classmethod
    def from_lists(
        cls,
        name: str,
        nodes: Sequence[tuple[str, NodeSpec | NodeTemplate]],
        edges: Sequence[tuple[str, str, Mapping[str, Any]]],
    ) -> "GraphBuilder":
        builder = cls(name)
        for node_id, node in nodes:
            builder.add_node(node_id, node)
        for source, target, attributes in edges:
            builder.add_edge(source, target, attributes)
        return builder

    def add_node(self, node_id: str, node: NodeSpec | NodeTemplate | None = None, **fields: Any) -> "GraphBuilder":
        if any(existing == node_id for existing, _ in self._nodes):
            raise DuplicateNodeError(f"node id '{node_id}' is already registered")
        if node_id in SENTINELS:
            raise BuildError(f"'{node_id}' is reserved")
        if node is None:
            node = NodeSpec(id=node_id, kind=fields.pop("kind", KIND_CUSTOM), **fields)
        self._nodes.append((node_id, node))
        return self

    def add_edge(self, source: str, target: str, attributes: Mapping[str, Any] | None = None) -> "GraphBuilder":
        known = {node_id for node_id, _ in self._nodes} | SENTINELS
        for endpoint in (source, target):
            if endpoint not in known:
                raise UnknownEndpointError(f"edge endpoint '{endpoint}' is not a registered node or sentinel")
        if target == ENTRY:
            raise BuildError("ENTRY cannot be an edge target")
        if source == EXIT:
            raise BuildError("EXIT cannot be an edge source")
        self._edges.append(EdgeSpec(source, target, dict(attributes or {})))
        return self

    def spec(self) -> WorkflowSpec:
        nodes: list[NodeSpec] = []
        for node_id, node in self._nodes:
            if isinstance(node, NodeTemplate):
                nodes.append(node.instantiate(node_id))  # defaults bind at build time
            else:
                node = node.copy()
                node.id = node.id or node_id
                if node.id != node_id:
                    raise BuildError(f"node spec id '{node.id}' does not match registered id '{node_id}'")
                nodes.append(node)
        return WorkflowSpec(nodes=nodes, edges=list(self._edges), version=self.version)

    def build(self, registry: Registry | None = None, **kwargs: Any) -> RuntimeGraph:
        return build_graph(self.spec(), registry, name=self.name, **kwargs)


def default_registry() -> Registry:
    """Fresh registry carrying every built-in composed graph."""
    from .composed import install_builtins  # deferred: composed imports this module

    registry = Registry()
    install_builtins(registry)
    return registry
