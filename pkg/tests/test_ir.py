from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentgraph.ir import (
    ENTRY,
    EXIT,
    EdgeSpec,
    NodeSpec,
    SerializationError,
    SpecFormatError,
    SpecSyntaxError,
    WorkflowSpec,
    apply_delta,
    diff_spec,
    parse_spec,
    serialize_spec,
    validate_spec,
)
from oracles import dfs_has_cycle, mutate_spec, random_dag_spec


class TestParse:
    def test_weekly_report_document(self, weekly_report_spec):
        assert set(weekly_report_spec.node_ids()) == {"DrafterA", "DrafterB", "DrafterC", "Finalizer"}
        assert len(weekly_report_spec.edges) == 7
        assert weekly_report_spec.version == 1  # defaulted, document omits it
        finalizer = weekly_report_spec.node("Finalizer")
        assert finalizer.input_fields == ["my_work", "draft_report_a", "draft_report_b", "draft_report_c"]
        assert finalizer.output_fields == ["final_weekly_report", "selection_rationale"]

    def test_empty_document(self):
        spec = parse_spec('{"nodes": [], "edges": []}')
        assert spec.nodes == [] and spec.edges == []
        report = validate_spec(spec)
        assert report.ok  # no errors, but the no-op is flagged
        assert any(f.code == "no_path" for f in report.warnings())

    def test_round_trip_two_node_chain(self):
        doc = {
            "version": 1,
            "nodes": [
                {"id": "A", "type": "Action", "output_fields": ["x"], "instructions": "produce x"},
                {"id": "B", "type": "Action", "input_fields": ["x"], "output_fields": ["y"], "instructions": "make y"},
            ],
            "edges": [
                {"source": "ENTRY", "target": "A"},
                {"source": "A", "target": "B"},
                {"source": "B", "target": "EXIT"},
            ],
        }
        spec = parse_spec(json.dumps(doc))
        assert len(spec.nodes) == 2 and len(spec.edges) == 3
        text = serialize_spec(spec)
        assert parse_spec(text) == spec
        assert serialize_spec(parse_spec(text)) == text

    def test_syntax_error_is_position_annotated(self):
        with pytest.raises(SpecSyntaxError) as excinfo:
            parse_spec('{"nodes": [,]}')
        assert excinfo.value.line == 1
        assert "line 1" in str(excinfo.value)

    def test_missing_required_field(self):
        with pytest.raises(SpecFormatError, match="missing required field 'id'"):
            parse_spec('{"nodes": [{"type": "Action"}], "edges": []}')
        with pytest.raises(SpecFormatError, match="'nodes'"):
            parse_spec('{"edges": []}')

    def test_duplicate_node_id(self):
        doc = {"nodes": [{"id": "A", "type": "Custom"}, {"id": "A", "type": "Custom"}], "edges": []}
        with pytest.raises(SpecFormatError, match="duplicate node id 'A'"):
            parse_spec(json.dumps(doc))

    def test_unknown_keys_preserved_with_warning(self):
        doc = {
            "nodes": [{"id": "A", "type": "Custom", "label": "pretty", "config": {"callback": "noop"}}],
            "edges": [{"source": "ENTRY", "target": "A"}, {"source": "A", "target": "EXIT", "weight": 2}],
        }
        spec = parse_spec(json.dumps(doc))
        assert spec.node("A").config["label"] == "pretty"
        assert spec.edges[1].attributes["weight"] == 2
        assert any("unknown key 'label'" in w for w in spec.warnings)
        report = validate_spec(spec)
        assert any(f.code == "unknown_key" for f in report.warnings())

    def test_sentinel_declaration_rejected(self):
        doc = {"nodes": [{"id": "ENTRY", "type": "Custom"}], "edges": []}
        with pytest.raises(SpecFormatError, match="reserved"):
            parse_spec(json.dumps(doc))


class TestValidate:
    def test_weekly_report_is_clean(self, weekly_report_spec):
        report = validate_spec(weekly_report_spec)
        assert report.ok
        assert report.errors() == []

    def test_exit_outgoing_edge(self):
        spec = WorkflowSpec(
            nodes=[NodeSpec(id="A", kind="Custom", config={"callback": "noop"})],
            edges=[EdgeSpec(ENTRY, "A"), EdgeSpec("A", EXIT), EdgeSpec(EXIT, "A")],
        )
        report = validate_spec(spec)
        assert not report.ok
        assert any(f.code == "exit_out_edge" for f in report.errors())

    def test_entry_incoming_edge(self):
        spec = WorkflowSpec(
            nodes=[NodeSpec(id="A", kind="Custom", config={"callback": "noop"})],
            edges=[EdgeSpec(ENTRY, "A"), EdgeSpec("A", ENTRY), EdgeSpec("A", EXIT)],
        )
        assert any(f.code == "entry_in_edge" for f in validate_spec(spec).errors())

    def test_unknown_endpoint(self):
        spec = WorkflowSpec(nodes=[], edges=[EdgeSpec("ghost", EXIT)])
        assert any(f.code == "unknown_endpoint" for f in validate_spec(spec).errors())

    def test_injected_cycle_is_reported_exactly(self):
        rng = random.Random(7)
        spec = random_dag_spec(rng, max_nodes=8)
        # Inject one back-edge: pick an edge chain u -> ... -> v and close it.
        ids = spec.node_ids()
        forward = {e.source: e.target for e in spec.edges if e.source in ids and e.target in ids}
        source = next(iter(forward))
        target = forward[source]
        spec.edges.append(EdgeSpec(target, source, {"note": "injected"}))

        report = validate_spec(spec)
        cycles = [f for f in report.errors() if f.code == "cycle"]
        assert len(cycles) == 1
        assert f"{target}->{source}" in cycles[0].message
        # Removing the injected edge restores a clean report.
        spec.edges = [e for e in spec.edges if e.attributes.get("note") != "injected"]
        assert not any(f.code == "cycle" for f in validate_spec(spec).findings)

    @pytest.mark.parametrize("seed", range(12))
    def test_cycle_detection_matches_dfs_oracle(self, seed):
        rng = random.Random(seed)
        spec = random_dag_spec(rng, max_nodes=10)
        if rng.random() < 0.5 and len(spec.nodes) >= 2:
            a, b = rng.sample(spec.node_ids(), 2)
            spec.edges.append(EdgeSpec(a, b))
            spec.edges.append(EdgeSpec(b, a))
        ids = spec.node_ids() + [ENTRY, EXIT]
        oracle = dfs_has_cycle(ids, [(e.source, e.target) for e in spec.edges])
        engine = any(f.code == "cycle" for f in validate_spec(spec).findings)
        assert engine == oracle

    def test_unreachable_nodes(self):
        spec = WorkflowSpec(
            nodes=[
                NodeSpec(id="A", kind="Custom", config={"callback": "noop"}),
                NodeSpec(id="island", kind="Custom", config={"callback": "noop"}),
            ],
            edges=[EdgeSpec(ENTRY, "A"), EdgeSpec("A", EXIT)],
        )
        report = validate_spec(spec)
        codes = {(f.code, f.where) for f in report.errors()}
        assert ("unreachable", "island") in codes
        assert ("no_exit_path", "island") in codes

    def test_action_invariants(self):
        spec = WorkflowSpec(
            nodes=[NodeSpec(id="A", kind="Action")],
            edges=[EdgeSpec(ENTRY, "A"), EdgeSpec("A", EXIT)],
        )
        codes = {f.code for f in validate_spec(spec).errors()}
        assert {"action_instructions", "action_outputs"} <= codes

    def test_dataflow_warning(self):
        spec = WorkflowSpec(
            nodes=[
                NodeSpec(id="A", kind="Action", output_fields=["x"], instructions="make x"),
                NodeSpec(id="B", kind="Action", input_fields=["x", "orphan"], output_fields=["y"], instructions="make y"),
            ],
            edges=[EdgeSpec(ENTRY, "A"), EdgeSpec("A", "B"), EdgeSpec("B", EXIT)],
        )
        report = validate_spec(spec)
        assert report.ok
        dataflow = [f for f in report.warnings() if f.code == "dataflow"]
        assert len(dataflow) == 1 and "orphan" in dataflow[0].message

    def test_dataflow_satisfied_by_state_key(self):
        spec = WorkflowSpec(
            nodes=[
                NodeSpec(
                    id="A",
                    kind="Action",
                    input_fields=["seed"],
                    output_fields=["x"],
                    instructions="make x",
                    config={"pull_keys": {"seed": "initial seed"}},
                )
            ],
            edges=[EdgeSpec(ENTRY, "A"), EdgeSpec("A", EXIT)],
        )
        assert not [f for f in validate_spec(spec).warnings() if f.code == "dataflow"]

    def test_validation_is_pure(self, weekly_report_spec):
        first = validate_spec(weekly_report_spec)
        second = validate_spec(weekly_report_spec)
        assert first.findings == second.findings


class TestSerialize:
    def test_byte_stable(self, weekly_report_spec):
        assert serialize_spec(weekly_report_spec) == serialize_spec(weekly_report_spec)

    def test_permutation_invariant(self, weekly_report_spec):
        permuted = weekly_report_spec.copy()
        permuted.nodes.reverse()
        permuted.edges.reverse()
        assert serialize_spec(permuted) == serialize_spec(weekly_report_spec)

    def test_refuses_error_bearing_spec(self):
        spec = WorkflowSpec(nodes=[], edges=[EdgeSpec(EXIT, ENTRY)])
        with pytest.raises(SerializationError):
            serialize_spec(spec)

    @pytest.mark.parametrize("seed", range(50))
    def test_parse_serialize_identity(self, seed):
        spec = random_dag_spec(random.Random(seed))
        text = serialize_spec(spec)
        assert parse_spec(text) == spec

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_parse_serialize_identity_property(self, seed):
        spec = random_dag_spec(random.Random(seed))
        assert parse_spec(serialize_spec(spec)) == spec


class TestDiff:
    def test_identity_diff_is_empty(self, weekly_report_spec):
        assert diff_spec(weekly_report_spec, weekly_report_spec).empty()

    def test_drop_one_drafter(self, weekly_report_spec):
        target = weekly_report_spec.copy()
        target.nodes = [n for n in target.nodes if n.id != "DrafterC"]
        target.edges = [e for e in target.edges if "DrafterC" not in (e.source, e.target)]
        delta = diff_spec(weekly_report_spec, target)
        assert delta.removed_nodes == ["DrafterC"]
        assert len(delta.removed_edges) == 2
        assert not delta.added_nodes and not delta.added_edges and not delta.modified_nodes
        assert apply_delta(weekly_report_spec, delta) == target

    @pytest.mark.parametrize("seed", range(30))
    def test_diff_apply_round_trip(self, seed):
        rng = random.Random(seed)
        base = random_dag_spec(rng)
        target = mutate_spec(rng, base)
        delta = diff_spec(base, target)
        assert apply_delta(base, delta) == target

    def test_delta_survives_wire_round_trip(self, weekly_report_spec):
        target = weekly_report_spec.copy()
        target.node("Finalizer").instructions = "Select the best draft and explain the pick."
        delta = diff_spec(weekly_report_spec, target)
        from agentgraph.ir import SpecDelta

        wired = SpecDelta.from_doc(json.loads(json.dumps(delta.to_doc())))
        assert apply_delta(weekly_report_spec, wired) == target
