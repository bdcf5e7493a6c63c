from __future__ import annotations

import random
import threading
import time

import pytest

from agentgraph.graph import GraphBuilder, Registry, build_graph
from agentgraph.interaction import BrokerChannel, ScriptedChannel
from agentgraph.ir import ENTRY, EXIT, EdgeSpec, NodeSpec, WorkflowSpec
from agentgraph.models import ScriptedChatModel
from agentgraph.protocols import encode_message
from agentgraph.runtime import (
    DONE,
    FAILED,
    PENDING,
    RUNNING,
    SKIPPED,
    DeadlockError,
    Engine,
    InvokeError,
    TraceLog,
    compute_ready,
    invoke,
)
from oracles import (
    arithmetic_callback,
    arithmetic_dag_spec,
    brute_force_ready,
    reference_execute,
)

# ---------------------------------------------------------------------------
# helpers


def registry_with(callbacks: dict | None = None, replies=None) -> Registry:
    from agentgraph.composed import install_builtins

    registry = Registry()
    install_builtins(registry)
    registry.register_callback("arith", arithmetic_callback)
    for name, fn in (callbacks or {}).items():
        registry.register_callback(name, fn)
    if replies is not None:
        registry.register_model("mock", ScriptedChatModel(replies), default=True)
    return registry


def passthrough(ident: str) -> NodeSpec:
    return NodeSpec(id=ident, kind="Custom", output_fields=[f"from_{ident}"], config={"callback": f"cb_{ident}"})


def final_statuses(trace: TraceLog) -> dict[str, str]:
    out: dict[str, str] = {}
    for event in trace.events:
        if event.kind == "status_change":
            out[event.node_id] = event.payload["status"]
    return out


def weekly_registry() -> Registry:
    replies = [
        ("Drafting Agent A", '{"draft_report_a": "draft A"}'),
        ("Drafting Agent B", '{"draft_report_b": "draft B"}'),
        ("Drafting Agent C", '{"draft_report_c": "draft C"}'),
        ("Evaluator", '{"final_weekly_report": "draft B, polished", "selection_rationale": "most detailed"}'),
    ]
    return registry_with(replies=replies)


# ---------------------------------------------------------------------------


class TestInvokeBasics:
    def test_weekly_report_run(self, weekly_report_spec):
        trace = TraceLog()
        graph = build_graph(weekly_report_spec, weekly_registry())
        message, attributes = invoke(graph, {}, {"my_works": "built the engine"}, trace=trace)
        assert message["final_weekly_report"] == "draft B, polished"
        assert message["selection_rationale"] == "most detailed"
        assert attributes["my_works"] == "built the engine"

    def test_empty_graph_is_identity(self):
        graph = build_graph(WorkflowSpec(), registry_with())
        message, attributes = invoke(graph, {"a": 1}, {"k": "v"})
        assert message == {"a": 1}
        assert attributes == {"k": "v"}

    def test_push_keys_reach_attributes(self, weekly_report_spec):
        spec = weekly_report_spec.copy()
        spec.node("Finalizer").config["push_keys"] = {"final_weekly_report": "the report"}
        graph = build_graph(spec, weekly_registry())
        _, attributes = invoke(graph, {}, {"my_works": "x"})
        assert attributes["final_weekly_report"] == "draft B, polished"

    def test_pull_keys_feed_prompt(self, weekly_report_spec):
        spec = weekly_report_spec.copy()
        for node in spec.nodes:
            node.config["pull_keys"] = {"my_works": "weekly notes"}
        registry = weekly_registry()
        graph = build_graph(spec, registry)
        trace = TraceLog()
        invoke(graph, {}, {"my_works": "wrote the scheduler"}, trace=trace)
        drafter_calls = [e for e in trace.by_kind("model_call") if e.node_id == "DrafterA"]
        assert drafter_calls and "wrote the scheduler" in drafter_calls[0].payload["prompt"]

    def test_failure_has_causal_chain(self):
        def boom(ctx):
            raise ValueError("bad input data")

        builder = GraphBuilder()
        builder.add_node("a", kind="Custom", output_fields=["x"], config={"callback": "cb_a"})
        builder.add_edge(ENTRY, "a").add_edge("a", EXIT)
        graph = builder.build(registry_with({"cb_a": boom}))
        with pytest.raises(InvokeError, match="'a' failed") as excinfo:
            invoke(graph, {}, {})
        assert isinstance(excinfo.value.__cause__, ValueError)

    def test_retry_then_fallback(self):
        attempts = []

        def flaky(ctx):
            attempts.append(1)
            raise RuntimeError("still broken")

        builder = GraphBuilder()
        builder.add_node(
            "a",
            kind="Custom",
            output_fields=["x"],
            config={"callback": "cb_a", "retries": {"count": 2}, "fallback_output": {"x": "fallback"}},
        )
        builder.add_edge(ENTRY, "a").add_edge("a", EXIT)
        graph = builder.build(registry_with({"cb_a": flaky}))
        message, _ = invoke(graph, {}, {})
        assert len(attempts) == 3  # 1 try + 2 retries
        assert message == {"x": "fallback"}


class TestLifecycle:
    def test_finalizer_aggregates_three_drafts(self, weekly_report_spec):
        seen = {}

        def spy(ctx):
            seen.update(ctx.inputs)
            return {"final_weekly_report": "ok", "selection_rationale": "spy"}

        spec = weekly_report_spec.copy()
        finalizer = spec.node("Finalizer")
        finalizer.kind = "Custom"
        finalizer.config = {"callback": "cb_spy"}
        graph = build_graph(spec, registry_with({"cb_spy": spy}, replies=[
            ("Drafting Agent A", '{"draft_report_a": "draft A"}'),
            ("Drafting Agent B", '{"draft_report_b": "draft B"}'),
            ("Drafting Agent C", '{"draft_report_c": "draft C"}'),
        ]))
        invoke(graph, {}, {})
        assert set(seen) == {"draft_report_a", "draft_report_b", "draft_report_c"}

    def test_source_node_receives_invoke_message(self):
        seen = {}

        def spy(ctx):
            seen.update(ctx.inputs)
            return {"x": 1}

        builder = GraphBuilder()
        builder.add_node("a", kind="Custom", output_fields=["x"], config={"callback": "cb_a"})
        builder.add_edge(ENTRY, "a").add_edge("a", EXIT)
        graph = builder.build(registry_with({"cb_a": spy}))
        invoke(graph, {"seed": 42}, {})
        assert seen == {"seed": 42}

    @pytest.mark.parametrize("order", [("b1", "b2"), ("b2", "b1")])
    def test_collision_later_edge_wins(self, order):
        def emit(value):
            def cb(ctx):
                return {"k": value}

            return cb

        def spy(ctx):
            return {"winner": ctx.inputs["k"]}

        builder = GraphBuilder()
        builder.add_node("b1", kind="Custom", output_fields=["k"], config={"callback": "cb_b1"})
        builder.add_node("b2", kind="Custom", output_fields=["k"], config={"callback": "cb_b2"})
        builder.add_node("join", kind="Custom", output_fields=["winner"], config={"callback": "cb_join"})
        builder.add_edge(ENTRY, "b1").add_edge(ENTRY, "b2")
        for source in order:
            builder.add_edge(source, "join")
        builder.add_edge("join", EXIT)
        graph = builder.build(registry_with({"cb_b1": emit("v1"), "cb_b2": emit("v2"), "cb_join": spy}))
        trace = TraceLog()
        message, _ = invoke(graph, {}, {}, trace=trace, backend="sequential")
        expected = {"b1": "v1", "b2": "v2"}[order[-1]]
        assert message["winner"] == expected
        collisions = [e for e in trace.by_kind("error") if e.payload.get("code") == "input_collision"]
        assert len(collisions) == 1 and collisions[0].node_id == "join"

    def test_no_dispatch_and_no_write_on_failure(self):
        def boom(ctx):
            raise RuntimeError("nope")

        builder = GraphBuilder()
        builder.add_node(
            "a", kind="Custom", output_fields=["x"], config={"callback": "cb_a", "push_keys": {"x": "d"}}
        )
        builder.add_node("b", kind="Custom", output_fields=["y"], config={"callback": "cb_b"})
        builder.add_edge(ENTRY, "a").add_edge("a", "b").add_edge("b", EXIT)
        trace = TraceLog()
        graph = builder.build(registry_with({"cb_a": boom, "cb_b": lambda ctx: {"y": 1}}))
        with pytest.raises(InvokeError):
            invoke(graph, {}, {}, trace=trace)
        assert not trace.by_kind("state_write")
        assert not [e for e in trace.by_kind("message_dispatched") if e.node_id == "a"]


class TestComputeReady:
    def test_weekly_start_frontier(self, weekly_report_spec):
        graph = build_graph(weekly_report_spec, weekly_registry())
        statuses = {nid: PENDING for nid in graph.nodes}
        edge_state = {e.index: ("delivered", object()) for e in graph.out_edges[ENTRY]}
        assert compute_ready(graph, statuses, edge_state) == {"DrafterA", "DrafterB", "DrafterC"}

    def test_join_after_drafters(self, weekly_report_spec):
        graph = build_graph(weekly_report_spec, weekly_registry())
        statuses = {nid: DONE for nid in ("DrafterA", "DrafterB", "DrafterC")}
        statuses["Finalizer"] = PENDING
        edge_state = {e.index: ("delivered", object()) for e in graph.edges if e.target == "Finalizer"}
        assert compute_ready(graph, statuses, edge_state) == {"Finalizer"}

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_brute_force(self, seed):
        rng = random.Random(seed)
        spec = arithmetic_dag_spec(rng)
        graph = build_graph(spec, registry_with())
        statuses = {nid: rng.choice([PENDING, DONE, SKIPPED]) for nid in graph.nodes}
        edge_state = {}
        resolved = {}
        for edge in graph.edges:
            roll = rng.random()
            if roll < 0.4:
                edge_state[edge.index] = ("delivered", object())
                resolved[edge.index] = "delivered"
            elif roll < 0.7:
                edge_state[edge.index] = ("skipped", None)
                resolved[edge.index] = "skipped"
        in_indices = {nid: [e.index for e in graph.in_edges[nid]] for nid in graph.nodes}
        assert compute_ready(graph, statuses, edge_state) == brute_force_ready(in_indices, statuses, resolved)


def diamond_graph(route_value, registry=None):
    spec = WorkflowSpec(
        nodes=[
            NodeSpec(
                id="SW",
                kind="Switch",
                config={
                    "cases": [
                        {"when": {"key": "route", "op": "eq", "value": "b"}, "activate": ["b"]},
                        {"when": {"key": "route", "op": "eq", "value": "c"}, "activate": ["c"]},
                        {"when": {"key": "route", "op": "eq", "value": "both"}, "activate": ["b", "c"]},
                    ],
                    "default": "none",
                },
            ),
            NodeSpec(id="B", kind="Custom", output_fields=["from_B"], config={"callback": "cb_B"}),
            NodeSpec(id="C", kind="Custom", output_fields=["from_C"], config={"callback": "cb_C"}),
            NodeSpec(id="D", kind="Custom", output_fields=["d_saw"], config={"callback": "cb_D"}),
        ],
        edges=[
            EdgeSpec(ENTRY, "SW"),
            EdgeSpec("SW", "B", {"label": "b"}),
            EdgeSpec("SW", "C", {"label": "c"}),
            EdgeSpec("B", "D"),
            EdgeSpec("C", "D"),
            EdgeSpec("D", EXIT),
        ],
    )
    registry = registry or registry_with(
        {
            "cb_B": lambda ctx: {"from_B": "b"},
            "cb_C": lambda ctx: {"from_C": "c"},
            "cb_D": lambda ctx: {"d_saw": sorted(ctx.inputs)},
        }
    )
    return build_graph(spec, registry)


class TestSwitch:
    # Hand-computed outcomes for every routing pattern of the diamond.
    EXPECTED = {
        "b": {"B": DONE, "C": SKIPPED, "D": DONE, "d_saw": ["from_B"]},
        "c": {"B": SKIPPED, "C": DONE, "D": DONE, "d_saw": ["from_C"]},
        "both": {"B": DONE, "C": DONE, "D": DONE, "d_saw": ["from_B", "from_C"]},
    }

    @pytest.mark.parametrize("route", ["b", "c", "both"])
    @pytest.mark.parametrize("backend", ["sequential", "parallel"])
    def test_routing_patterns(self, route, backend):
        registry = registry_with(
            {
                "cb_B": lambda ctx: {"from_B": "b"},
                "cb_C": lambda ctx: {"from_C": "c"},
                "cb_D": lambda ctx: {"d_saw": sorted(ctx.inputs)},
            }
        )
        graph = diamond_graph(route, registry)
        trace = TraceLog()
        message, _ = invoke(graph, {}, {"route": route}, trace=trace, backend=backend)
        expected = self.EXPECTED[route]
        statuses = final_statuses(trace)
        for node in ("B", "C", "D"):
            assert statuses[node] == expected[node], f"{node} under route={route}"
        assert message["d_saw"] == expected["d_saw"]

    @pytest.mark.parametrize("backend", ["sequential", "parallel"])
    def test_all_branches_skipped_deadlocks(self, backend):
        graph = diamond_graph("none")
        with pytest.raises(DeadlockError) as excinfo:
            invoke(graph, {}, {"route": "nothing-matches"}, backend=backend)
        assert set(excinfo.value.frontier) == {"B", "C", "D"}

    def test_switch_passes_inputs_through(self):
        spec = WorkflowSpec(
            nodes=[
                NodeSpec(
                    id="SW",
                    kind="Switch",
                    config={"cases": [], "default": ["go"]},
                ),
                NodeSpec(id="T", kind="Custom", output_fields=["echo"], config={"callback": "cb_T"}),
            ],
            edges=[EdgeSpec(ENTRY, "SW"), EdgeSpec("SW", "T", {"label": "go"}), EdgeSpec("T", EXIT)],
        )
        graph = build_graph(spec, registry_with({"cb_T": lambda ctx: {"echo": ctx.inputs}}))
        message, _ = invoke(graph, {"payload": "hello"}, {})
        assert message["echo"] == {"payload": "hello"}


def loop_spec(max_iterations, stop_at=None) -> WorkflowSpec:
    body = {
        "nodes": [
            {
                "id": "inc",
                "type": "Custom",
                "output_fields": ["counter"],
                "config": {
                    "callback": "cb_inc",
                    "pull_keys": {"counter": "loop counter"},
                    "push_keys": {"counter": "loop counter"},
                },
            }
        ],
        "edges": [{"source": "ENTRY", "target": "inc"}, {"source": "inc", "target": "EXIT"}],
    }
    config = {
        "body": body,
        "max_iterations": max_iterations,
        "pull_keys": {"counter": "seed"},
        "push_keys": {"counter": "final count"},
    }
    if stop_at is not None:
        config["stop_condition"] = {"key": "counter", "op": "ge", "value": stop_at}
    return WorkflowSpec(
        nodes=[NodeSpec(id="loop", kind="Loop", config=config)],
        edges=[EdgeSpec(ENTRY, "loop"), EdgeSpec("loop", EXIT)],
    )


def cb_inc(ctx):
    return {"counter": int(ctx.pulled.get("counter", 0)) + 1}


class TestLoop:
    def run_loop(self, max_iterations, stop_at, trace=None):
        graph = build_graph(loop_spec(max_iterations, stop_at), registry_with({"cb_inc": cb_inc}))
        return invoke(graph, {}, {"counter": 0}, trace=trace or TraceLog())

    def test_bound_without_stop(self):
        message, attributes = self.run_loop(3, None)
        assert attributes["counter"] == 3  # one increment per lap

    def test_early_stop_after_first_lap(self):
        message, attributes = self.run_loop(5, 1)
        assert attributes["counter"] == 1

    def test_reviewer_counter_two_laps(self):
        # Hand-simulated: lap1 counter 0->1 (0 < 2, continue), lap2 1->2 (stop).
        trace = TraceLog()
        message, attributes = self.run_loop(10, 2, trace)
        assert attributes["counter"] == 2
        boundaries = [
            e for e in trace.by_kind("state_write") if e.payload.get("key") == "_iteration" and e.node_id == "loop"
        ]
        assert [e.payload["value"] for e in boundaries] == [1, 2]

    def test_body_statuses_reset_between_laps(self):
        trace = TraceLog()
        self.run_loop(3, None, trace)
        resets = [
            e
            for e in trace.by_kind("status_change")
            if e.node_id == "loop/inc" and e.payload["status"] == PENDING and e.payload.get("iteration", 1) > 1
        ]
        assert len(resets) == 2  # laps 2 and 3 re-arm the body

    def test_body_failure_fails_loop(self):
        def boom(ctx):
            raise RuntimeError("lap crash")

        graph = build_graph(loop_spec(4, None), registry_with({"cb_inc": boom}))
        with pytest.raises(InvokeError, match="loop"):
            invoke(graph, {}, {"counter": 0})

    @pytest.mark.parametrize("seed", range(12))
    def test_iteration_count_formula(self, seed):
        rng = random.Random(seed)
        max_iterations = rng.randint(1, 7)
        first_true = rng.randint(1, 9)
        trace = TraceLog()
        _, attributes = self.run_loop(max_iterations, first_true, trace)
        expected = min(first_true, max_iterations)
        laps = [
            e for e in trace.by_kind("state_write") if e.payload.get("key") == "_iteration" and e.node_id == "loop"
        ]
        assert len(laps) == expected
        assert attributes["counter"] == expected


class TestInteraction:
    def interaction_spec(self) -> WorkflowSpec:
        return WorkflowSpec(
            nodes=[
                NodeSpec(
                    id="ask",
                    kind="Interaction",
                    output_fields=["user_feedback"],
                    config={"prompt": "Approve?", "schema": "accept_reject"},
                )
            ],
            edges=[EdgeSpec(ENTRY, "ask"), EdgeSpec("ask", EXIT)],
        )

    def test_scripted_accept(self):
        graph = build_graph(self.interaction_spec(), registry_with())
        trace = TraceLog()
        message, _ = invoke(graph, {}, {}, channel=ScriptedChannel(["accept"]), trace=trace)
        assert message == {"user_feedback": "accept"}
        assert len(trace.by_kind("interaction_request")) == 1
        assert len(trace.by_kind("interaction_response")) == 1

    def test_channel_closed_default_policy(self):
        spec = self.interaction_spec()
        spec.node("ask").config.update({"on_channel_closed": "default", "default": "skipped-review"})
        graph = build_graph(spec, registry_with())
        message, _ = invoke(graph, {}, {}, channel=ScriptedChannel([]))
        assert message == {"user_feedback": "skipped-review"}

    def test_channel_closed_fail_policy(self):
        graph = build_graph(self.interaction_spec(), registry_with())
        with pytest.raises(InvokeError):
            invoke(graph, {}, {}, channel=ScriptedChannel([]))

    def test_parallel_interactions_matched_by_request_id(self):
        spec = WorkflowSpec(
            nodes=[
                NodeSpec(id="ask1", kind="Interaction", output_fields=["r1"], config={"prompt": "one"}),
                NodeSpec(id="ask2", kind="Interaction", output_fields=["r2"], config={"prompt": "two"}),
                NodeSpec(id="join", kind="Custom", output_fields=["both"], config={"callback": "cb_join"}),
            ],
            edges=[
                EdgeSpec(ENTRY, "ask1"),
                EdgeSpec(ENTRY, "ask2"),
                EdgeSpec("ask1", "join"),
                EdgeSpec("ask2", "join"),
                EdgeSpec("join", EXIT),
            ],
        )
        registry = registry_with({"cb_join": lambda ctx: {"both": [ctx.inputs.get("r1"), ctx.inputs.get("r2")]}})
        graph = build_graph(spec, registry)
        broker = BrokerChannel()
        trace = TraceLog()
        result: dict = {}

        def run():
            result["msg"], _ = invoke(graph, {}, {}, channel=broker, trace=trace)

        thread = threading.Thread(target=run)
        thread.start()
        deadline = time.time() + 5
        while len(broker.pending_requests()) < 2 and time.time() < deadline:
            time.sleep(0.01)
        pending = {r.node_id: r for r in broker.pending_requests()}
        assert set(pending) == {"ask1", "ask2"}  # both requests concurrently pending
        # Answer out of order: the reply routes by request_id, not arrival.
        accepted, _ = broker.resolve(pending["ask2"].request_id, "answer-two")
        assert accepted
        accepted, _ = broker.resolve(pending["ask1"].request_id, "answer-one")
        assert accepted
        thread.join(timeout=5)
        assert result["msg"]["both"] == ["answer-one", "answer-two"]

    def test_duplicate_and_unknown_responses_rejected(self):
        broker = BrokerChannel()
        holder: dict = {}

        def run():
            from agentgraph.interaction import InteractionRequest

            holder["reply"] = broker.ask(InteractionRequest("req-1", "n", "p"))

        thread = threading.Thread(target=run)
        thread.start()
        deadline = time.time() + 5
        while not broker.pending_requests() and time.time() < deadline:
            time.sleep(0.01)
        ok, _ = broker.resolve("req-1", "first")
        assert ok
        thread.join(timeout=5)
        ok, reason = broker.resolve("req-1", "second")
        assert not ok and ("duplicate" in reason or "no pending" in reason)
        ok, reason = broker.resolve("req-unknown", "x")
        assert not ok and "no pending" in reason


class TestDeterminism:
    @pytest.mark.parametrize("seed", range(20))
    def test_backends_match_reference(self, seed):
        rng = random.Random(1000 + seed)
        spec = arithmetic_dag_spec(rng)
        attributes = {"acc0": 2, "seed0": 5}
        expected_message, expected_attributes = reference_execute(spec, {"v_start": 1}, attributes)
        for backend in ("sequential", "parallel"):
            graph = build_graph(spec, registry_with())
            message, attrs = invoke(graph, {"v_start": 1}, attributes, backend=backend)
            assert message == expected_message, f"{backend} message diverged"
            assert attrs == expected_attributes, f"{backend} attributes diverged"

    def test_parallel_branches_actually_overlap(self):
        barrier = threading.Barrier(3, timeout=10)

        def wait_cb(ctx):
            barrier.wait()  # only passes if all three run concurrently
            return {f"v_{ctx.node.id}": 1}

        builder = GraphBuilder()
        for name in ("p1", "p2", "p3"):
            builder.add_node(name, kind="Custom", output_fields=[f"v_{name}"], config={"callback": f"cb_{name}"})
            builder.add_edge(ENTRY, name)
            builder.add_edge(name, EXIT)
        registry = registry_with({f"cb_{n}": wait_cb for n in ("p1", "p2", "p3")})
        graph = builder.build(registry)
        message, _ = invoke(graph, {}, {}, backend="parallel")
        assert set(message) == {"v_p1", "v_p2", "v_p3"}

    def test_single_worker_limit_still_completes_fanout(self):
        rng = random.Random(321)
        spec = arithmetic_dag_spec(rng, max_nodes=10)
        expected = reference_execute(spec, {}, {})
        graph = build_graph(spec, registry_with())
        engine = Engine(backend="parallel", max_workers=1)
        assert engine.invoke(graph, {}, {}) == expected

    def test_state_write_log_consistency(self):
        rng = random.Random(77)
        spec = arithmetic_dag_spec(rng)
        graph = build_graph(spec, registry_with())
        _, attrs = invoke(graph, {}, {"acc0": 1}, backend="parallel")
        assert graph.state.replay() == graph.state.attributes == attrs


class TestTraceInvariants:
    def run_weekly(self, backend="parallel"):
        trace = TraceLog()
        spec_graph = None
        from agentgraph.ir import parse_spec
        import json as _json
        from conftest import WEEKLY_REPORT_DOC

        spec = parse_spec(_json.dumps(WEEKLY_REPORT_DOC))
        spec_graph = build_graph(spec, weekly_registry())
        invoke(spec_graph, {}, {"my_works": "x"}, trace=trace, backend=backend)
        return spec_graph, trace

    @pytest.mark.parametrize("backend", ["sequential", "parallel"])
    def test_causality(self, backend):
        graph, trace = self.run_weekly(backend)
        events = trace.events
        terminal_at: dict[str, int] = {}
        for event in events:
            if event.kind == "status_change" and event.payload["status"] in (DONE, FAILED, SKIPPED):
                terminal_at.setdefault(event.node_id, event.seq)
        for event in events:
            if event.kind == "status_change" and event.payload["status"] == RUNNING:
                node = event.node_id
                for edge in graph.in_edges[node]:
                    if edge.source in graph.nodes:
                        assert terminal_at[edge.source] < event.seq

    @pytest.mark.parametrize("backend", ["sequential", "parallel"])
    def test_terminal_exactly_once_and_gap_free(self, backend):
        graph, trace = self.run_weekly(backend)
        events = trace.events
        assert [e.seq for e in events] == list(range(len(events)))
        terminals: dict[str, int] = {}
        for event in events:
            if event.kind == "status_change" and event.payload["status"] in (DONE, FAILED, SKIPPED):
                terminals[event.node_id] = terminals.get(event.node_id, 0) + 1
        assert terminals == {nid: 1 for nid in graph.nodes}

    def test_status_transitions_are_legal(self):
        _, trace = self.run_weekly()
        legal = {
            (PENDING, "ready"),
            ("ready", RUNNING),
            (RUNNING, DONE),
            (RUNNING, FAILED),
            (PENDING, SKIPPED),
            (DONE, PENDING),  # loop reset
            (SKIPPED, PENDING),  # loop reset of a branch skipped last lap
        }
        for event in trace.by_kind("status_change"):
            pair = (event.payload["from"], event.payload["status"])
            assert pair in legal, pair

    def test_loop_reset_reports_true_prior_status(self):
        # Body: switch skips branch "b" every lap; lap-2 resets must say the
        # skipped node came from "skipped", not "done".
        body = {
            "nodes": [
                {
                    "id": "sw",
                    "type": "Switch",
                    "config": {"cases": [], "default": ["a"]},
                },
                {"id": "a", "type": "Custom", "output_fields": ["x"], "config": {"callback": "cb_a"}},
                {"id": "b", "type": "Custom", "output_fields": ["y"], "config": {"callback": "cb_b"}},
            ],
            "edges": [
                {"source": "ENTRY", "target": "sw"},
                {"source": "sw", "target": "a", "attributes": {"label": "a"}},
                {"source": "sw", "target": "b", "attributes": {"label": "b"}},
                {"source": "a", "target": "EXIT"},
                {"source": "b", "target": "EXIT"},
            ],
        }
        spec = WorkflowSpec(
            nodes=[NodeSpec(id="loop", kind="Loop", config={"body": body, "max_iterations": 2})],
            edges=[EdgeSpec(ENTRY, "loop"), EdgeSpec("loop", EXIT)],
        )
        registry = registry_with({"cb_a": lambda ctx: {"x": 1}, "cb_b": lambda ctx: {"y": 2}})
        trace = TraceLog()
        invoke(build_graph(spec, registry), {}, {}, trace=trace)
        resets = {
            e.node_id: e.payload["from"]
            for e in trace.by_kind("status_change")
            if e.payload["status"] == PENDING and e.payload.get("iteration") == 2
        }
        assert resets["loop/b"] == SKIPPED
        assert resets["loop/a"] == DONE
