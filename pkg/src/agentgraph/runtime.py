"""Readiness-based execution of runtime graphs.

Scheduling model
----------------
A node becomes ready exactly when all of its in-edges are resolved
(delivered or skipped) and at least one is delivered; a node whose in-edges
all resolved as skipped is itself skipped, transitively. Any number of ready
nodes may execute concurrently. Determinism does not depend on the backend:

* input aggregation follows in-edge declaration order (later edges override
  on key collision, and the collision is traced);
* a node reads state as: the frame's attributes at frame start, folded with
  the buffered writes of its edge-ancestors in topological order — never the
  racy writes of concurrent siblings;
* state writes commit at frame end in topological order of the writers
  (ties broken by node id), so the final attributes and write log are
  identical under the parallel and sequential backends.

Each node runs a five-phase lifecycle: aggregate inbound envelopes, read
declared pull keys, run kind-specific behavior, dispatch one envelope per
activated out-edge, write declared push keys back. Dispatch and writes
happen only on success.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from .agents import AgentConfig, run_agent
from .graph import GraphState, RuntimeEdge, RuntimeGraph, RuntimeNode
from .interaction import ChannelClosed, InteractionChannel, InteractionRequest
from .ir import (
    ENTRY,
    EXIT,
    KIND_ACTION,
    KIND_CUSTOM,
    KIND_GRAPH,
    KIND_INTERACTION,
    KIND_LOOP,
    KIND_SWITCH,
)

PENDING = "pending"
READY = "ready"
RUNNING = "running"
DONE = "done"
FAILED = "failed"
SKIPPED = "skipped"

STATUSES = (PENDING, READY, RUNNING, DONE, FAILED, SKIPPED)

TRACE_KINDS = (
    "status_change",
    "message_dispatched",
    "state_write",
    "interaction_request",
    "interaction_response",
    "model_call",
    "error",
)

BACKENDS = ("parallel", "sequential")


class InvokeError(RuntimeError):
    """A node failed and no handler absorbed it; carries the causal chain."""

    def __init__(self, message: str, node_id: str = ""):
        super().__init__(message)
        self.node_id = node_id


class DeadlockError(InvokeError):
    """Quiescence with EXIT unreached; names the stuck frontier."""

    def __init__(self, message: str, frontier: list[str]):
        super().__init__(message)
        self.frontier = frontier


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    wall_time: float
    node_id: str
    kind: str
    payload: dict[str, Any]

    def to_doc(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "wall_time": self.wall_time,
            "node_id": self.node_id,
            "kind": self.kind,
            "payload": self.payload,
        }


class TraceLog:
    """Single ordered event sink; seq numbers are gap-free from 0."""

    def __init__(self) -> None:
        self._events: list[TraceEvent] = []
        self._lock = threading.Lock()
        self._listeners: list[Callable[[TraceEvent], None]] = []

    def emit(self, kind: str, node_id: str, payload: dict[str, Any] | None = None) -> TraceEvent:
        if kind not in TRACE_KINDS:
            raise ValueError(f"unknown trace kind '{kind}'")
        with self._lock:
            event = TraceEvent(
                seq=len(self._events),
                wall_time=time.time(),
                node_id=node_id,
                kind=kind,
                payload=dict(payload or {}),
            )
            self._events.append(event)
            listeners = list(self._listeners)
        for listener in listeners:
            listener(event)
        return event

    @property
    def events(self) -> list[TraceEvent]:
        with self._lock:
            return list(self._events)

    def by_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def subscribe(self, listener: Callable[[TraceEvent], None], *, since: int = 0) -> list[TraceEvent]:
        """Atomically snapshot events after ``since`` and attach a live listener,
        so a client sees every event exactly once, gap-free."""
        with self._lock:
            snapshot = [e for e in self._events if e.seq >= since]
            self._listeners.append(listener)
            return snapshot

    def unsubscribe(self, listener: Callable[[TraceEvent], None]) -> None:
        with self._lock:
            if listener in self._listeners:
                self._listeners.remove(listener)


@dataclass
class MessageEnvelope:
    """Payload traveling along one edge."""

    source: str
    payload: dict[str, Any]
    protocol: str = ""

    def to_doc(self) -> dict[str, Any]:
        return {"source": self.source, "payload": self.payload, "protocol": self.protocol}


@dataclass
class NodeContext:
    """Everything a node behavior may touch during its execute phase."""

    node: RuntimeNode
    path: str  # hierarchical trace id, e.g. "review_loop/worker"
    inputs: dict[str, Any]
    pulled: dict[str, Any]
    state: Mapping[str, Any]  # read-only visible snapshot
    iteration: int
    channel: InteractionChannel | None
    run: "_Run"

    def emit(self, kind: str, payload: dict[str, Any] | None = None) -> TraceEvent:
        return self.run.trace.emit(kind, self.path, payload)

    def next_request_id(self) -> str:
        return self.run.next_request_id()


class _Run:
    """Per-invoke shared context: trace sink, channel, backend, request ids."""

    def __init__(self, engine: "Engine", trace: TraceLog, channel: InteractionChannel | None):
        self.engine = engine
        self.trace = trace
        self.channel = channel
        self.backend = engine.backend
        self.max_workers = engine.max_workers
        self._counter = 0
        self._counter_lock = threading.Lock()

    def next_request_id(self) -> str:
        with self._counter_lock:
            self._counter += 1
            return f"req-{self._counter:04d}"


# ---------------------------------------------------------------------------
# Readiness


def compute_ready(
    graph: RuntimeGraph,
    statuses: Mapping[str, str],
    edge_state: Mapping[int, tuple[str, Any]],
) -> set[str]:
    """Nodes that may start now: pending, all in-edges resolved, >=1 delivered."""
    ready: set[str] = set()
    for node_id in graph.nodes:
        if statuses.get(node_id, PENDING) != PENDING:
            continue
        resolutions = [edge_state.get(edge.index) for edge in graph.in_edges.get(node_id, [])]
        if not resolutions:
            continue
        if any(r is None for r in resolutions):
            continue
        if any(r[0] == "delivered" for r in resolutions):
            ready.add(node_id)
    return ready


def _all_skipped(graph: RuntimeGraph, node_id: str, edge_state: Mapping[int, tuple[str, Any]]) -> bool:
    resolutions = [edge_state.get(edge.index) for edge in graph.in_edges.get(node_id, [])]
    return bool(resolutions) and all(r is not None and r[0] == "skipped" for r in resolutions)


# ---------------------------------------------------------------------------
# Frame execution


@dataclass
class _Outcome:
    node_id: str
    ctx: NodeContext
    outputs: dict[str, Any] | None = None
    error: BaseException | None = None


class _Frame:
    def __init__(
        self,
        graph: RuntimeGraph,
        state: GraphState,
        path: str,
        run: _Run,
        iteration: int,
        carry: dict[int, MessageEnvelope] | None,
    ):
        self.graph = graph
        self.state = state
        self.path = path
        self.run = run
        self.iteration = iteration
        self.statuses: dict[str, str] = {nid: PENDING for nid in graph.nodes}
        self.edge_state: dict[int, tuple[str, Any]] = {}
        self.carry_out: dict[int, MessageEnvelope] = {}
        self.pending_writes: list[tuple[int, str, str, Any]] = []  # (topo, node, key, value)
        self.failure: tuple[str, BaseException] | None = None
        # Self-loop edges resolve from the previous iteration's dispatches.
        for edge in graph.edges:
            if edge.source == edge.target:
                env = (carry or {}).get(edge.index)
                self.edge_state[edge.index] = ("delivered", env) if env is not None else ("skipped", None)

    # -- trace helpers
    def node_path(self, node_id: str) -> str:
        return f"{self.path}{node_id}"

    def emit(self, kind: str, node_id: str, payload: dict[str, Any] | None = None) -> None:
        self.run.trace.emit(kind, self.node_path(node_id), payload)

    def set_status(self, node_id: str, status: str) -> None:
        previous = self.statuses[node_id]
        self.statuses[node_id] = status
        payload = {"status": status, "from": previous}
        if self.iteration > 1:
            payload["iteration"] = self.iteration
        self.emit("status_change", node_id, payload)

    # -- state visibility
    def visible_state(self, node_id: str) -> dict[str, Any]:
        """Frame-start attributes folded with the writes of this node's
        edge-ancestors, in topological commit order."""
        visible = dict(self.state.attributes)
        ancestors = self.graph.ancestors.get(node_id, frozenset())
        relevant = [w for w in self.pending_writes if w[1] in ancestors]
        relevant.sort(key=lambda w: (w[0], w[1]))
        for _, _, key, value in relevant:
            visible[key] = value
        return visible

    def aggregate_inputs(self, node_id: str) -> dict[str, Any]:
        """Phase 1: fold delivered envelopes in in-edge declaration order."""
        inputs: dict[str, Any] = {}
        for edge in self.graph.in_edges.get(node_id, []):
            resolution = self.edge_state.get(edge.index)
            if resolution is None or resolution[0] != "delivered":
                continue
            envelope: MessageEnvelope = resolution[1]
            for key, value in envelope.payload.items():
                if key in inputs and inputs[key] != value:
                    self.emit(
                        "error",
                        node_id,
                        {
                            "severity": "warning",
                            "code": "input_collision",
                            "field": key,
                            "kept_from": envelope.source,
                        },
                    )
                inputs[key] = value
        return inputs

    def resolve_edge(self, edge: RuntimeEdge, delivered: MessageEnvelope | None) -> None:
        if edge.source == edge.target:
            # Feeds the next loop iteration, not this frame.
            if delivered is not None:
                self.carry_out[edge.index] = delivered
            return
        self.edge_state[edge.index] = ("delivered", delivered) if delivered is not None else ("skipped", None)


class Engine:
    """Schedules runtime graphs to quiescence under a chosen backend."""

    def __init__(
        self,
        *,
        backend: str = "parallel",
        channel: InteractionChannel | None = None,
        trace: TraceLog | None = None,
        max_workers: int = 8,
    ):
        if backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        self.backend = backend
        self.channel = channel
        self.trace = trace or TraceLog()
        self.max_workers = max_workers

    def invoke(
        self,
        graph: RuntimeGraph,
        message: Mapping[str, Any] | None = None,
        attributes: Mapping[str, Any] | None = None,
    ) -> tuple[dict[str, Any], dict[str, Any]]:
        """Run ``graph`` to quiescence.

        Returns the message aggregated at EXIT and the final graph-state
        attributes. Raises :class:`InvokeError` on unhandled node failure and
        :class:`DeadlockError` when every path to EXIT was skipped.
        """
        run = _Run(self, self.trace, self.channel)
        graph.state = GraphState(attributes or {})
        out_message, _, _ = self._run_frame(graph, dict(message or {}), path="", state=graph.state, run=run)
        return out_message, dict(graph.state.attributes)

    # -- frame driver -------------------------------------------------------

    def _run_frame(
        self,
        graph: RuntimeGraph,
        message: dict[str, Any],
        *,
        path: str,
        state: GraphState,
        run: _Run,
        carry: dict[int, MessageEnvelope] | None = None,
        iteration: int = 1,
        reset_from: Mapping[str, str] | None = None,
    ) -> tuple[dict[str, Any], dict[int, MessageEnvelope], dict[str, str]]:
        frame = _Frame(graph, state, path, run, iteration, carry)

        entry_edges = [e for e in graph.out_edges.get(ENTRY, []) if e.source != e.target]
        if not entry_edges and not graph.nodes:
            return dict(message), {}, {}  # no-op pass-through

        if iteration > 1:
            for node_id in graph.nodes:  # pending-reset at a new loop iteration
                previous = (reset_from or {}).get(node_id, DONE)
                frame.emit(
                    "status_change", node_id, {"status": PENDING, "from": previous, "iteration": iteration}
                )

        for edge in entry_edges:
            envelope = MessageEnvelope(source=ENTRY, payload=dict(message), protocol=edge.attributes.get("protocol", ""))
            frame.resolve_edge(edge, envelope)
            frame.emit(
                "message_dispatched",
                ENTRY,
                {
                    "target": frame.node_path(edge.target),
                    "fields": sorted(envelope.payload),
                    "protocol": envelope.protocol,
                    "data": dict(envelope.payload),
                },
            )

        if run.backend == "sequential":
            self._drive_sequential(frame)
        else:
            self._drive_parallel(frame)

        # Commit buffered writes in topological order of the writers.
        ordered = sorted(range(len(frame.pending_writes)), key=lambda i: (frame.pending_writes[i][0], frame.pending_writes[i][1], i))
        for index in ordered:
            _, node_id, key, value = frame.pending_writes[index]
            state.commit(frame.node_path(node_id), key, value)
            frame.emit("state_write", node_id, {"key": key, "graph": graph.name})

        if frame.failure is not None:
            node_id, error = frame.failure
            raise InvokeError(
                f"node '{frame.node_path(node_id)}' failed: {error}", node_id=frame.node_path(node_id)
            ) from error

        # Aggregate the final message at EXIT.
        exit_message = frame.aggregate_inputs(EXIT)
        exit_edges = graph.in_edges.get(EXIT, [])
        if exit_edges and graph.nodes:
            delivered = any(
                frame.edge_state.get(e.index, (None,))[0] == "delivered" for e in exit_edges
            )
            if not delivered:
                frontier = sorted(nid for nid, s in frame.statuses.items() if s in (PENDING, SKIPPED))
                raise DeadlockError(
                    f"graph '{graph.name}' reached quiescence without delivering to EXIT; "
                    f"stuck frontier: {', '.join(frontier) or '(empty)'}",
                    frontier=frontier,
                )
        return exit_message, frame.carry_out, dict(frame.statuses)

    def _settle(self, frame: _Frame) -> list[str]:
        """Skip-propagate to fixpoint, then return newly ready nodes in
        deterministic (topological) order."""
        graph = frame.graph
        changed = True
        while changed:
            changed = False
            for node_id in graph.nodes:
                if frame.statuses[node_id] != PENDING:
                    continue
                if _all_skipped(graph, node_id, frame.edge_state):
                    frame.set_status(node_id, SKIPPED)
                    for edge in graph.out_edges.get(node_id, []):
                        frame.resolve_edge(edge, None)
                    changed = True
        ready = compute_ready(graph, frame.statuses, frame.edge_state)
        return sorted(ready, key=lambda nid: (graph.topo_index.get(nid, 1 << 30), nid))

    def _drive_sequential(self, frame: _Frame) -> None:
        while True:
            ready = self._settle(frame)
            if not ready or frame.failure is not None:
                break
            node_id = ready[0]
            ctx = self._make_context(frame, node_id)
            frame.set_status(node_id, READY)
            outcome = self._execute(frame, ctx)
            self._apply(frame, outcome)

    def _drive_parallel(self, frame: _Frame) -> None:
        results: queue.Queue[_Outcome] = queue.Queue()
        inflight = 0
        halted = False
        # Interaction nodes do not consume a permit: a blocked prompt must
        # never starve the executing frontier.
        permits = threading.Semaphore(max(1, frame.run.max_workers))

        def launch(ctx: NodeContext) -> None:
            throttled = ctx.node.kind != KIND_INTERACTION

            def worker() -> None:
                if throttled:
                    permits.acquire()
                try:
                    results.put(self._execute(frame, ctx))
                finally:
                    if throttled:
                        permits.release()

            thread = threading.Thread(target=worker, daemon=True, name=f"node:{ctx.path}")
            thread.start()

        while True:
            if not halted:
                for node_id in self._settle(frame):
                    if frame.statuses[node_id] != PENDING:
                        continue
                    ctx = self._make_context(frame, node_id)
                    frame.set_status(node_id, READY)
                    launch(ctx)
                    inflight += 1
            if inflight == 0:
                break
            try:
                # After a failure, give in-flight work a bounded drain window;
                # anything still blocked (e.g. on an unanswerable prompt) is
                # abandoned to its daemon thread.
                outcome = results.get(timeout=5.0) if halted else results.get()
            except queue.Empty:
                break
            inflight -= 1
            self._apply(frame, outcome)
            while True:  # drain whatever else already finished
                try:
                    outcome = results.get_nowait()
                except queue.Empty:
                    break
                inflight -= 1
                self._apply(frame, outcome)
            if frame.failure is not None and not halted:
                halted = True  # fail fast: stop scheduling new work
                if frame.run.channel is not None and hasattr(frame.run.channel, "close"):
                    frame.run.channel.close()

    # -- node lifecycle ------------------------------------------------------

    def _make_context(self, frame: _Frame, node_id: str) -> NodeContext:
        node = frame.graph.nodes[node_id]
        inputs = frame.aggregate_inputs(node_id)  # phase 1: aggregate
        visible = frame.visible_state(node_id)
        pulled: dict[str, Any] = {}
        for key in node.pull_keys:  # phase 2: read declared state keys
            if key in visible:
                pulled[key] = visible[key]
            else:
                frame.emit("error", node_id, {"severity": "warning", "code": "missing_pull_key", "key": key})
        return NodeContext(
            node=node,
            path=frame.node_path(node_id),
            inputs=inputs,
            pulled=pulled,
            state=visible,
            iteration=frame.iteration,
            channel=frame.run.channel,
            run=frame.run,
        )

    def _execute(self, frame: _Frame, ctx: NodeContext) -> _Outcome:
        node = ctx.node
        frame.set_status(node.id, RUNNING)
        attempts = node.retries.count + 1
        error: BaseException | None = None
        for attempt in range(attempts):  # phase 3: kind-specific behavior
            try:
                outputs = self._behave(frame, ctx)
                return _Outcome(node_id=node.id, ctx=ctx, outputs=outputs)
            except Exception as exc:  # noqa: BLE001 - failure policy decides
                error = exc
                if attempt + 1 < attempts:
                    frame.emit(
                        "error",
                        node.id,
                        {"severity": "warning", "code": "retry", "attempt": attempt + 1, "detail": str(exc)},
                    )
                    if node.retries.backoff_s:
                        time.sleep(node.retries.backoff_s)
        fallback = node.config.get("fallback_output")
        if isinstance(fallback, dict):
            frame.emit(
                "error",
                node.id,
                {"severity": "warning", "code": "fallback_output", "detail": str(error)},
            )
            return _Outcome(node_id=node.id, ctx=ctx, outputs=dict(fallback))
        return _Outcome(node_id=node.id, ctx=ctx, error=error)

    def _behave(self, frame: _Frame, ctx: NodeContext) -> dict[str, Any]:
        node = ctx.node
        if node.kind == KIND_ACTION:
            config = AgentConfig(
                name=node.id,
                instructions=node.instructions,
                input_fields=node.input_fields,
                output_fields=node.output_fields,
                pull_keys=node.pull_keys,
                push_keys=node.push_keys,
                protocol=node.protocol,
                model=node.model,
                tools=node.config.get("tools", []),
                tool_table=node.tool_table,
                context_adapter=node.context_adapter,
                context_top_k=int(node.config.get("context_top_k", 3)),
                max_reasks=int(node.config.get("max_reasks", 2)),
                max_tool_calls=int(node.config.get("max_tool_calls", 4)),
            )
            return run_agent(config, ctx.inputs, ctx.pulled, emit=ctx.emit)
        if node.kind == KIND_CUSTOM:
            if node.callback is None:
                raise InvokeError(f"custom node '{node.id}' has no callback")
            return dict(node.callback(ctx) or {})
        if node.kind == KIND_SWITCH:
            return dict(ctx.inputs)  # routing happens at dispatch
        if node.kind == KIND_INTERACTION:
            return self._interact(frame, ctx)
        if node.kind == KIND_GRAPH:
            return self._run_subgraph(frame, ctx)
        if node.kind == KIND_LOOP:
            return self._run_loop(frame, ctx)
        raise InvokeError(f"node '{node.id}' has unsupported kind '{node.kind}'")

    def _body_seed(self, node: RuntimeNode, ctx: NodeContext) -> dict[str, Any]:
        """Initial body state: declared seed defaults, overridden by pulled keys."""
        seed = dict(node.config.get("state_seed", {}))
        seed.update(ctx.pulled)
        return seed

    def _run_subgraph(self, frame: _Frame, ctx: NodeContext) -> dict[str, Any]:
        node = ctx.node
        assert node.body is not None
        body_state = GraphState(self._body_seed(node, ctx))  # state flow: explicit declared keys only
        message, _, _ = self._run_frame(
            node.body,
            dict(ctx.inputs),
            path=f"{ctx.path}/",
            state=body_state,
            run=ctx.run,
        )
        outputs = dict(message)
        for key in node.push_keys:
            if key in body_state.attributes:
                outputs.setdefault(key, body_state.attributes[key])
        return outputs

    def _run_loop(self, frame: _Frame, ctx: NodeContext) -> dict[str, Any]:
        node = ctx.node
        assert node.body is not None and node.loop is not None
        loop_state = GraphState(self._body_seed(node, ctx))  # persists across iterations
        message = dict(ctx.inputs)
        carry: dict[int, MessageEnvelope] = {}
        last_statuses: dict[str, str] = {}
        for iteration in range(1, node.loop.max_iterations + 1):
            # Iteration boundary: one state write per pass marks the new lap.
            loop_state.commit(ctx.path, "_iteration", iteration)
            ctx.emit("state_write", {"key": "_iteration", "value": iteration, "graph": node.id})
            message, carry, last_statuses = self._run_frame(
                node.body,
                message,
                path=f"{ctx.path}/",
                state=loop_state,
                run=ctx.run,
                carry=carry,
                iteration=iteration,
                reset_from=last_statuses,
            )
            condition = node.loop.stop_condition
            if condition is not None and condition.evaluate(loop_state.attributes, message):
                break
        outputs = dict(message)
        for key in node.push_keys:
            if key in loop_state.attributes:
                outputs.setdefault(key, loop_state.attributes[key])
        outputs["_iterations"] = loop_state.attributes.get("_iteration", 0)
        return outputs

    def _interact(self, frame: _Frame, ctx: NodeContext) -> dict[str, Any]:
        node = ctx.node
        prompt = node.config.get("prompt") or node.instructions or f"Input required by '{node.id}'."
        if ctx.inputs:
            rendered = "\n".join(f"{k}: {v}" for k, v in ctx.inputs.items())
            prompt = f"{prompt}\n\n{rendered}"
        request = InteractionRequest(
            request_id=ctx.next_request_id(),
            node_id=ctx.path,
            prompt=prompt,
            schema=node.config.get("schema", "free_text"),
        )
        ctx.emit("interaction_request", request.to_doc())
        try:
            if ctx.channel is None:
                raise ChannelClosed("no interaction channel attached")
            reply = ctx.channel.ask(request)
        except ChannelClosed:
            policy = node.config.get("on_channel_closed", "fail")
            if policy == "default":
                reply = node.config.get("default", "")
                ctx.emit(
                    "error",
                    {"severity": "warning", "code": "channel_closed_default", "request_id": request.request_id},
                )
            else:
                raise
        ctx.emit("interaction_response", {"request_id": request.request_id, "payload": reply})
        if isinstance(reply, Mapping) and set(reply) & set(node.output_fields):
            return {k: reply[k] for k in node.output_fields if k in reply}
        if node.output_fields:
            return {node.output_fields[0]: reply}
        return {"reply": reply}

    # -- effects -------------------------------------------------------------

    def _apply(self, frame: _Frame, outcome: _Outcome) -> None:
        node = frame.graph.nodes[outcome.node_id]
        if outcome.error is not None:
            frame.set_status(node.id, FAILED)
            chain: list[str] = []
            error: BaseException | None = outcome.error
            while error is not None:
                chain.append(f"{type(error).__name__}: {error}")
                error = error.__cause__
            frame.emit("error", node.id, {"severity": "error", "chain": chain})
            if frame.failure is None:
                frame.failure = (node.id, outcome.error)
            return

        outputs = dict(outcome.outputs or {})
        payload = self._dispatch_payload(frame, node, outputs)

        activated = self._activated_edges(frame, node, outcome.ctx)
        for edge in frame.graph.out_edges.get(node.id, []):
            if edge.index in activated:
                envelope = MessageEnvelope(
                    source=node.id,
                    payload=dict(payload),
                    protocol=edge.attributes.get("protocol", node.protocol),
                )
                frame.resolve_edge(edge, envelope)  # phase 4: dispatch
                frame.emit(
                    "message_dispatched",
                    node.id,
                    {
                        "target": frame.node_path(edge.target),
                        "fields": sorted(envelope.payload),
                        "protocol": envelope.protocol,
                        "data": dict(envelope.payload),
                    },
                )
            else:
                frame.resolve_edge(edge, None)

        source_map = outputs
        for key in node.push_keys:  # phase 5: buffered state writes
            if key in source_map:
                frame.pending_writes.append((frame.graph.topo_index.get(node.id, 0), node.id, key, source_map[key]))
            else:
                frame.emit("error", node.id, {"severity": "warning", "code": "missing_push_key", "key": key})

        frame.set_status(node.id, DONE)

    def _dispatch_payload(self, frame: _Frame, node: RuntimeNode, outputs: dict[str, Any]) -> dict[str, Any]:
        """Restrict the envelope to declared output fields plus engine keys.

        Router nodes (Switch) and nodes that declare no output fields pass
        their map through unfiltered.
        """
        if node.kind == KIND_SWITCH or not node.output_fields:
            return outputs
        payload = {k: v for k, v in outputs.items() if k in node.output_fields or k.startswith("_")}
        dropped = sorted(set(outputs) - set(payload))
        if dropped:
            frame.emit(
                "error",
                node.id,
                {"severity": "warning", "code": "undeclared_output", "fields": dropped},
            )
        return payload

    def _activated_edges(self, frame: _Frame, node: RuntimeNode, ctx: NodeContext) -> set[int]:
        edges = frame.graph.out_edges.get(node.id, [])
        if node.kind != KIND_SWITCH or node.switch is None:
            return {e.index for e in edges}  # broadcast by default
        labels = set(node.switch.route(ctx.state, ctx.inputs))
        return {e.index for e in edges if e.label is not None and e.label in labels}


def invoke(
    graph: RuntimeGraph,
    message: Mapping[str, Any] | None = None,
    attributes: Mapping[str, Any] | None = None,
    *,
    backend: str = "parallel",
    channel: InteractionChannel | None = None,
    trace: TraceLog | None = None,
) -> tuple[dict[str, Any], dict[str, Any]]:
    """One-shot convenience wrapper around :class:`Engine`."""
    engine = Engine(backend=backend, channel=channel, trace=trace)
    return engine.invoke(graph, message, attributes)
