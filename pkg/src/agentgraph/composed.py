"""Built-in composed graphs and default registry assembly.

``FanOutJoin`` runs n parallel drafting agents into one aggregator;
``ReflectLoop`` wraps a worker/reviewer pair in a bounded revision loop.
``VibeGraph`` (registered from the intent-compiler module) builds a whole
workflow from a natural-language instruction at graph-build time.
"""

from __future__ import annotations

from typing import Any, Mapping

from .graph import ComposedGraphDef, Registry
from .ir import ENTRY, EXIT, EdgeSpec, NodeSpec, WorkflowSpec


def fan_out_join(params: Mapping[str, Any]) -> WorkflowSpec:
    """n parallel workers, one join: ENTRY -> w1..wn -> join -> EXIT."""
    n = int(params.get("n", 3))
    if n < 1:
        raise ValueError("FanOutJoin requires n >= 1")
    base = params.get("_node_id", "fanout")
    worker_instructions = params.get(
        "worker_instructions", "Produce draft variant {index} of the requested output."
    )
    join_instructions = params.get(
        "aggregator_instructions", "Merge the drafts into a single best result."
    )
    output_field = params.get("output_field", "result")

    nodes: list[NodeSpec] = []
    edges: list[EdgeSpec] = [EdgeSpec(ENTRY, f"{base}.worker{i}") for i in range(1, n + 1)]
    draft_fields = []
    for i in range(1, n + 1):
        draft_field = f"draft_{i}"
        draft_fields.append(draft_field)
        nodes.append(
            NodeSpec(
                id=f"{base}.worker{i}",
                kind="Action",
                output_fields=[draft_field],
                instructions=worker_instructions.format(index=i),
            )
        )
        edges.append(EdgeSpec(f"{base}.worker{i}", f"{base}.join"))
    nodes.append(
        NodeSpec(
            id=f"{base}.join",
            kind="Action",
            input_fields=list(draft_fields),
            output_fields=[output_field],
            instructions=join_instructions,
        )
    )
    edges.append(EdgeSpec(f"{base}.join", EXIT))
    return WorkflowSpec(nodes=nodes, edges=edges)


def reflect_loop(params: Mapping[str, Any]) -> WorkflowSpec:
    """Worker + reviewer inside a Loop: revise until approved or out of laps."""
    base = params.get("_node_id", "reflect")
    max_iterations = int(params.get("max_iterations", 3))
    worker_instructions = params.get(
        "worker_instructions",
        "Produce the requested output. If reviewer feedback is present in state, revise accordingly.",
    )
    reviewer_instructions = params.get(
        "reviewer_instructions",
        "Review the work. Set approved to 'yes' if acceptable, otherwise 'no' with feedback.",
    )
    output_field = params.get("output_field", "result")

    body = {
        "nodes": [
            {
                "id": "worker",
                "type": "Action",
                "input_fields": [],
                "output_fields": [output_field],
                "instructions": worker_instructions,
                "config": {"pull_keys": {"feedback": "reviewer feedback from the previous lap"}},
            },
            {
                "id": "reviewer",
                "type": "Action",
                "input_fields": [output_field],
                "output_fields": ["approved", "feedback"],
                "instructions": reviewer_instructions,
                "config": {"push_keys": {"approved": "review verdict", "feedback": "review feedback"}},
            },
        ],
        "edges": [
            {"source": "ENTRY", "target": "worker"},
            {"source": "worker", "target": "reviewer"},
            {"source": "reviewer", "target": "EXIT"},
        ],
    }
    loop = NodeSpec(
        id=f"{base}.loop",
        kind="Loop",
        output_fields=[output_field, "approved"],
        config={
            "body": body,
            "max_iterations": max_iterations,
            "stop_condition": {"key": "approved", "op": "eq", "value": "yes"},
        },
    )
    return WorkflowSpec(
        nodes=[loop],
        edges=[EdgeSpec(ENTRY, loop.id), EdgeSpec(loop.id, EXIT)],
    )


def _noop(ctx: Any) -> dict[str, Any]:
    return dict(ctx.inputs)


def _constant(ctx: Any) -> dict[str, Any]:
    return dict(ctx.node.config.get("value", {}))


def install_builtins(registry: Registry) -> Registry:
    registry.register_composed(ComposedGraphDef("FanOutJoin", fan_out_join))
    registry.register_composed(ComposedGraphDef("ReflectLoop", reflect_loop))
    registry.register_callback("noop", _noop)
    registry.register_callback("constant", _constant)

    from .vibegraph import vibegraph_composed_def  # deferred: it imports the engine

    registry.register_composed(vibegraph_composed_def())
    return registry
