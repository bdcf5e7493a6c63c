"""Staged intent-to-workflow compiler with human review between stages.

A build instruction (natural-language intent plus an optional structural
constraint like ``START->A,B,C->D->END``) is compiled in three stages:

1. role assignment   - candidate agent roles with responsibility boundaries;
2. structure design  - a directed topology skeleton over those roles;
3. semantic completion - prompts and field contracts for every node,
   yielding a workflow spec that validates cleanly.

Each stage runs as an engine-native Loop whose body is: a generator agent,
a deterministic checker, a routing switch, and a human-review interaction.
Rejected artifacts loop back with the full feedback log in the generator's
prompt; validated-and-accepted artifacts flow to the next stage. Finished
builds are cached by instruction fingerprint, so a warm rebuild performs
zero model calls.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from filelock import FileLock

from .graph import ComposedGraphDef, GraphBuilder, Registry, RuntimeGraph, build_graph
from .interaction import AutoAcceptChannel, InteractionChannel
from .ir import (
    ENTRY,
    EXIT,
    KIND_ACTION,
    NodeSpec,
    SpecDelta,
    SpecError,
    WorkflowSpec,
    apply_delta,
    serialize_spec,
    spec_from_doc,
    spec_to_doc,
    validate_spec,
)
from .models import ChatModel
from .runtime import Engine, InvokeError, TraceLog

DEFAULT_CORRECTION_LIMIT = 2
DEFAULT_MAX_REVISIONS = 8

STAGE_NAMES = {1: "role assignment", 2: "structure design", 3: "semantic completion"}
_STAGE_ARTIFACT_KEY = {1: "roles", 2: "skeleton", 3: "workflow"}


class StageFailure(RuntimeError):
    def __init__(self, stage: int, message: str, outcome: "StageOutcome | None" = None):
        super().__init__(f"stage {stage} ({STAGE_NAMES.get(stage, '?')}) failed: {message}")
        self.stage = stage
        self.outcome = outcome


# ---------------------------------------------------------------------------
# Build instruction and cache


@dataclass(frozen=True)
class BuildInstruction:
    intent: str
    structural_constraint: str | None = None
    pull_keys: dict[str, str] = field(default_factory=dict)
    push_keys: dict[str, str] = field(default_factory=dict)
    cache_path: str | None = None

    def __post_init__(self) -> None:
        if not self.intent or not self.intent.strip():
            raise ValueError("build instruction intent must be non-empty")

    def canonical(self) -> str:
        # cache_path locates the cache; it is not part of the instruction's identity
        return json.dumps(
            {
                "intent": self.intent,
                "structural_constraint": self.structural_constraint,
                "pull_keys": dict(sorted(self.pull_keys.items())),
                "push_keys": dict(sorted(self.push_keys.items())),
            },
            sort_keys=True,
            ensure_ascii=False,
            separators=(",", ":"),
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any], *, cache_path: str | None = None) -> "BuildInstruction":
        return cls(
            intent=doc["intent"],
            structural_constraint=doc.get("structural_constraint"),
            pull_keys=dict(doc.get("pull_keys", {})),
            push_keys=dict(doc.get("push_keys", {})),
            cache_path=cache_path if cache_path is not None else doc.get("cache_path"),
        )


@dataclass
class RoleCard:
    name: str
    responsibility: str
    consumes: list[str] = field(default_factory=list)
    produces: list[str] = field(default_factory=list)


@dataclass
class StageOutcome:
    stage: int
    artifact: Any
    revisions: int = 0
    accepted: bool = False
    feedback_log: list[tuple[str, str]] = field(default_factory=list)

    def to_doc(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "artifact": self.artifact,
            "revisions": self.revisions,
            "accepted": self.accepted,
            "feedback_log": [list(entry) for entry in self.feedback_log],
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "StageOutcome":
        return cls(
            stage=doc["stage"],
            artifact=doc.get("artifact"),
            revisions=doc.get("revisions", 0),
            accepted=doc.get("accepted", False),
            feedback_log=[tuple(entry) for entry in doc.get("feedback_log", [])],
        )


class BuildCache:
    """Fingerprint-keyed store of finished builds; corruption degrades to a
    cold build, never to a failure. Concurrent access is serialized by an
    advisory file lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = FileLock(str(self.path) + ".lock")
        self.notes: list[str] = []

    def _read(self) -> dict[str, Any]:
        if not self.path.exists():
            return {"version": 1, "entries": {}}
        try:
            doc = json.loads(self.path.read_text(encoding="utf-8"))
            if not isinstance(doc, dict) or not isinstance(doc.get("entries"), dict):
                raise ValueError("cache document malformed")
            return doc
        except (ValueError, OSError) as exc:
            self.notes.append(f"cache unreadable ({exc}); cold build")
            return {"version": 1, "entries": {}}

    def get(self, fingerprint: str) -> dict[str, Any] | None:
        with self._lock:
            entry = self._read()["entries"].get(fingerprint)
        if entry and entry.get("complete"):
            return entry
        return None

    def put(
        self,
        fingerprint: str,
        *,
        spec_doc: dict[str, Any] | None,
        outcomes: Sequence[StageOutcome],
        complete: bool,
    ) -> None:
        with self._lock:
            doc = self._read()
            doc["entries"][fingerprint] = {
                "complete": complete,
                "spec": spec_doc,
                "stages": [o.to_doc() for o in outcomes],
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(
                json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
            )


# ---------------------------------------------------------------------------
# Structural constraint


_CHAIN = re.compile(r"[A-Za-z0-9_,\t ]+(?:(?:->|→)[A-Za-z0-9_,\t ]+)+")


def parse_constraint(text: str | None) -> list[list[str]] | None:
    """Parse a stage pattern like ``START->A,B,C->D->END`` (the START/END
    anchors are optional) into layers of role names.

    Returns ``None`` when the text does not parse; unparsable constraints are
    passed to the model as soft guidance only.
    """
    if not text:
        return None
    match = _CHAIN.search(text)
    if not match:
        return None
    stages: list[list[str]] = []
    seen: set[str] = set()
    for part in re.split(r"->|→", match.group(0)):
        names = [token.strip() for token in part.split(",") if token.strip()]
        if not names:
            continue
        for name in names:
            if not re.fullmatch(r"[A-Za-z0-9_]+", name) or name in seen:
                return None
            seen.add(name)
        stages.append(names)
    if stages and stages[0] == ["START"] or stages and stages[0] == ["ENTRY"]:
        stages = stages[1:]
    if stages and (stages[-1] == ["END"] or stages[-1] == ["EXIT"]):
        stages = stages[:-1]
    return stages or None


def instruction_constraint(instr: BuildInstruction) -> list[list[str]] | None:
    return parse_constraint(instr.structural_constraint) or parse_constraint(instr.intent)


def layer_by_longest_path(node_ids: Sequence[str], edges: Sequence[tuple[str, str]]) -> dict[str, int] | None:
    """Longest-path depth from ENTRY per node; ``None`` when a node is unreachable."""
    incoming: dict[str, list[str]] = {n: [] for n in node_ids}
    outgoing: dict[str, list[str]] = {n: [] for n in node_ids}
    entry_targets = []
    for source, target in edges:
        if source == ENTRY and target in incoming:
            entry_targets.append(target)
        elif source in outgoing and target in incoming:
            outgoing[source].append(target)
            incoming[target].append(source)
    layer: dict[str, int] = {}
    frontier = list(dict.fromkeys(entry_targets))
    for node in frontier:
        layer[node] = 0
    changed = True
    guard = 0
    while changed:
        changed = False
        guard += 1
        if guard > len(node_ids) + 2:
            return None  # cycle
        for node in node_ids:
            if node not in layer and incoming[node] and all(p in layer for p in incoming[node]):
                layer[node] = 1 + max(layer[p] for p in incoming[node])
                changed = True
            elif node in layer and incoming[node] and all(p in layer for p in incoming[node]):
                depth = 1 + max(layer[p] for p in incoming[node])
                if depth > layer[node]:
                    layer[node] = depth
                    changed = True
    if set(layer) != set(node_ids):
        return None
    return layer


def match_constraint(
    stages: Sequence[Sequence[str]],
    node_ids: Sequence[str],
    edges: Sequence[tuple[str, str]],
) -> bool:
    """Does the graph's condensed stage order match the constraint pattern?

    The pattern fixes the per-layer node counts and requires every edge to
    connect consecutive layers, with ENTRY feeding layer 0 and the last
    layer feeding EXIT.
    """
    expected_sizes = [len(s) for s in stages]
    layer = layer_by_longest_path(node_ids, edges)
    if layer is None:
        return False
    sizes: dict[int, int] = {}
    for node in node_ids:
        sizes[layer[node]] = sizes.get(layer[node], 0) + 1
    if [sizes.get(i, 0) for i in range(len(expected_sizes))] != expected_sizes:
        return False
    if max(layer.values(), default=-1) != len(expected_sizes) - 1:
        return False
    last = len(expected_sizes) - 1
    for source, target in edges:
        if source == ENTRY:
            if target not in layer or layer[target] != 0:
                return False
        elif target == EXIT:
            if source not in layer or layer[source] != last:
                return False
        elif source in layer and target in layer:
            if layer[target] != layer[source] + 1:
                return False
        else:
            return False
    return True


# ---------------------------------------------------------------------------
# Stage artifact validators (deterministic; no model involved)


def validate_roles(artifact: Any, stages: Sequence[Sequence[str]] | None) -> tuple[list[str], list[dict[str, Any]]]:
    errors: list[str] = []
    if isinstance(artifact, str):
        try:
            artifact = json.loads(artifact)
        except json.JSONDecodeError:
            return (["artifact is not a JSON role list"], [])
    if not isinstance(artifact, list) or not artifact:
        return (["artifact must be a non-empty list of role cards"], [])
    if len(artifact) > 12:
        errors.append(f"{len(artifact)} roles exceed the limit of 12")
    normalized: list[dict[str, Any]] = []
    seen: set[str] = set()
    for index, card in enumerate(artifact):
        if not isinstance(card, Mapping):
            errors.append(f"role[{index}] is not an object")
            continue
        name = card.get("name")
        if not isinstance(name, str) or not name.strip():
            errors.append(f"role[{index}] is missing a name")
            continue
        if name in seen:
            errors.append(f"duplicate role name '{name}'")
        seen.add(name)
        produces = [p for p in card.get("produces", []) if isinstance(p, str)]
        if not produces:
            errors.append(f"role '{name}' must produce at least one field")
        normalized.append(
            {
                "name": name,
                "responsibility": str(card.get("responsibility", "")),
                "consumes": [c for c in card.get("consumes", []) if isinstance(c, str)],
                "produces": produces,
            }
        )
    if stages is not None:
        expected = sum(len(s) for s in stages)
        if len(normalized) != expected:
            errors.append(
                f"{len(normalized)} roles are inconsistent with the structural constraint (expected {expected})"
            )
    return errors, normalized


def validate_skeleton(
    artifact: Any,
    roles: Sequence[Mapping[str, Any]],
    stages: Sequence[Sequence[str]] | None,
) -> tuple[list[str], dict[str, Any]]:
    errors: list[str] = []
    if isinstance(artifact, str):
        try:
            artifact = json.loads(artifact)
        except json.JSONDecodeError:
            return (["artifact is not a JSON skeleton object"], {})
    if not isinstance(artifact, Mapping) or "nodes" not in artifact or "edges" not in artifact:
        return (["skeleton must be an object with 'nodes' and 'edges'"], {})

    role_by_name = {r["name"]: r for r in roles}
    normalized_nodes: list[dict[str, Any]] = []
    for index, stub in enumerate(artifact["nodes"]):
        if not isinstance(stub, Mapping) or not isinstance(stub.get("id"), str):
            errors.append(f"node stub [{index}] needs an 'id'")
            continue
        role = stub.get("role")
        if role is not None and role not in role_by_name:
            errors.append(f"node '{stub['id']}' references unknown role '{role}'")
        normalized_nodes.append(
            {"id": stub["id"], "kind": stub.get("kind", "Action"), "role": role}
        )
    normalized_edges: list[dict[str, str]] = []
    for index, edge in enumerate(artifact["edges"]):
        if not isinstance(edge, Mapping) or "source" not in edge or "target" not in edge:
            errors.append(f"edge [{index}] needs 'source' and 'target'")
            continue
        normalized_edges.append({"source": edge["source"], "target": edge["target"]})
    if errors:
        return errors, {}

    # Structural invariants, with placeholder instructions standing in for the
    # not-yet-written prompts.
    probe_nodes = []
    for stub in normalized_nodes:
        role = role_by_name.get(stub["role"]) if stub["role"] else None
        probe_nodes.append(
            NodeSpec(
                id=stub["id"],
                kind=stub["kind"] if stub["kind"] in ("Action", "Switch", "Loop", "Graph", "Interaction", "Custom") else "Action",
                input_fields=list(role["consumes"]) if role else [],
                output_fields=list(role["produces"]) if role else ["out"],
                instructions="(to be completed)",
                config={"callback": "noop"} if stub["kind"] == "Custom" else {},
            )
        )
    from .ir import EdgeSpec

    probe = WorkflowSpec(
        nodes=probe_nodes,
        edges=[EdgeSpec(e["source"], e["target"]) for e in normalized_edges],
    )
    report = validate_spec(probe)
    errors.extend(str(f) for f in report.errors())

    if stages is not None and not errors:
        if not match_constraint(
            stages,
            [n["id"] for n in normalized_nodes],
            [(e["source"], e["target"]) for e in normalized_edges],
        ):
            errors.append("skeleton's condensed stage order does not match the structural constraint")
    return errors, {"nodes": normalized_nodes, "edges": normalized_edges}


def complete_boundary_wiring(
    doc: dict[str, Any],
    pull_keys: Mapping[str, str],
    push_keys: Mapping[str, str],
) -> tuple[list[str], dict[str, Any]]:
    """Wire instruction pull/push keys onto boundary nodes of a spec document.

    Entry-adjacent nodes learn to pull every instruction pull key; each push
    key must be produced by some exit-adjacent node, which learns to push it.
    """
    errors: list[str] = []
    try:
        spec = spec_from_doc(doc)
    except SpecError as exc:
        return ([f"workflow does not parse: {exc}"], doc)

    entry_adjacent = {e.target for e in spec.edges if e.source == ENTRY}
    exit_adjacent = {e.source for e in spec.edges if e.target == EXIT}
    for node in spec.nodes:
        if node.id in entry_adjacent and pull_keys:
            pulls = dict(node.config.get("pull_keys", {}))
            for key, description in pull_keys.items():
                pulls.setdefault(key, description)
            node.config["pull_keys"] = pulls
    for key, description in push_keys.items():
        producers = [
            n for n in spec.nodes if n.id in exit_adjacent and key in n.output_fields
        ]
        if not producers:
            errors.append(f"push key '{key}' is not produced by any exit-adjacent node")
            continue
        for node in producers:
            pushes = dict(node.config.get("push_keys", {}))
            pushes.setdefault(key, description)
            node.config["push_keys"] = pushes
    return errors, spec_to_doc(spec)


def validate_workflow_artifact(
    artifact: Any,
    skeleton: Mapping[str, Any] | None,
    pull_keys: Mapping[str, str],
    push_keys: Mapping[str, str],
) -> tuple[list[str], dict[str, Any]]:
    errors: list[str] = []
    if isinstance(artifact, str):
        try:
            artifact = json.loads(artifact)
        except json.JSONDecodeError:
            return (["artifact is not a JSON workflow document"], {})
    if not isinstance(artifact, Mapping):
        return (["artifact must be a workflow document object"], {})

    wire_errors, doc = complete_boundary_wiring(dict(artifact), pull_keys, push_keys)
    errors.extend(wire_errors)
    try:
        spec = spec_from_doc(doc)
    except SpecError as exc:
        return ([f"workflow does not parse: {exc}"], {})
    report = validate_spec(spec)
    errors.extend(str(f) for f in report.errors())

    if skeleton:
        wanted = sorted(stub["id"] for stub in skeleton.get("nodes", []))
        got = sorted(spec.node_ids())
        if wanted != got:
            errors.append(f"workflow nodes {got} do not instantiate the accepted skeleton {wanted}")
        else:
            wanted_edges = sorted((e["source"], e["target"]) for e in skeleton.get("edges", []))
            got_edges = sorted((e.source, e.target) for e in spec.edges)
            if wanted_edges != got_edges:
                errors.append("workflow edges deviate from the accepted skeleton")
    return errors, doc


# ---------------------------------------------------------------------------
# Stage prompts


def stage_instructions(stage: int) -> str:
    common = (
        f"You are stage {stage} of 3 ({STAGE_NAMES[stage]}) in a workflow compiler that turns a "
        "task description into a directed multi-agent workflow. The task description, any "
        "structural constraint, previously accepted artifacts, and the full feedback log are in "
        "the shared state section; treat every feedback entry as a binding revision request."
    )
    if stage == 1:
        return common + (
            "\n\nProduce the candidate agent roles with clear responsibility boundaries. "
            "A structural constraint such as START->A,B,C->D->END fixes how many roles exist "
            "(one per placeholder). Set the 'artifact' output field to a JSON array of role "
            "cards: {\"name\", \"responsibility\", \"consumes\": [field names], "
            "\"produces\": [field names]}. Role names must be unique and every role must "
            "produce at least one field."
        )
    if stage == 2:
        return common + (
            "\n\nDesign the directed topology skeleton over the accepted roles: decide "
            "connectivity and the direction of message propagation, without writing prompts. "
            "Set the 'artifact' output field to a JSON object {\"nodes\": [{\"id\", \"kind\", "
            "\"role\"}], \"edges\": [{\"source\", \"target\"}]} where ENTRY and EXIT mark the "
            "workflow boundary and every node lies on a path from ENTRY to EXIT. Honor the "
            "structural constraint's layering when one is present."
        )
    return common + (
        "\n\nComplete the accepted skeleton into an executable workflow document: give every "
        "node its instructions, input_fields and output_fields, consistent with its role card, "
        "keeping the skeleton's node ids and edges exactly. Nodes that consume a workflow-level "
        "pull key read it from shared state; each workflow-level push key must appear in the "
        "output_fields of a node adjacent to EXIT. Set the 'artifact' output field to the JSON "
        "workflow document: {\"version\", \"nodes\": [{\"id\", \"type\", \"input_fields\", "
        "\"output_fields\", \"instructions\"}], \"edges\": [{\"source\", \"target\"}]}."
    )


# ---------------------------------------------------------------------------
# Pipeline node callbacks (deterministic code inside each stage loop)


def _coerce_log(raw: Any) -> list[list[str]]:
    return [list(entry) for entry in raw] if isinstance(raw, list) else []


def vg_check(ctx: Any) -> dict[str, Any]:
    """Validate the generated artifact; log validator findings as feedback."""
    stage = int(ctx.node.config["stage"])
    artifact = ctx.inputs.get("artifact")
    constraint = parse_constraint(ctx.state.get("constraint"))
    log = _coerce_log(ctx.pulled.get("feedback_log"))
    corrections = int(ctx.pulled.get("corrections", 0))

    if stage == 1:
        errors, normalized = validate_roles(artifact, constraint)
    elif stage == 2:
        errors, normalized = validate_skeleton(artifact, ctx.state.get("roles", []), constraint)
    else:
        errors, normalized = validate_workflow_artifact(
            artifact,
            ctx.state.get("skeleton"),
            ctx.state.get("pull_keys_map", {}),
            ctx.state.get("push_keys_map", {}),
        )

    valid = not errors
    if not valid:
        corrections += 1
        for problem in errors:
            log.append(["reviewer_agent", f"validation: {problem}"])
    artifact_value = normalized if valid else artifact
    return {
        "artifact": artifact_value,
        _STAGE_ARTIFACT_KEY[stage]: artifact_value,  # the loop republishes this name
        "valid": valid,
        "errors": errors,
        "corrections": corrections,
        "feedback_log": log,
        "accepted": bool(ctx.pulled.get("accepted", False)),
        "revisions": int(ctx.pulled.get("revisions", 0)),
    }


def _revalidate(stage: int, artifact: Any, ctx: Any) -> tuple[list[str], Any]:
    constraint = parse_constraint(ctx.state.get("constraint"))
    if stage == 1:
        return validate_roles(artifact, constraint)
    if stage == 2:
        return validate_skeleton(artifact, ctx.state.get("roles", []), constraint)
    return validate_workflow_artifact(
        artifact, ctx.state.get("skeleton"), ctx.state.get("pull_keys_map", {}), ctx.state.get("push_keys_map", {})
    )


def vg_apply_review(ctx: Any) -> dict[str, Any]:
    """Fold the review reply into the stage state.

    ``accept`` finalizes a valid artifact; text is recorded as feedback and
    forces a re-run; an edit object replaces (or patches) the artifact, is
    re-validated, and - when valid - counts as acceptance.
    """
    stage = int(ctx.node.config["stage"])
    reply = ctx.inputs.get("reply")
    artifact = ctx.pulled.get("artifact")
    valid = bool(ctx.pulled.get("valid", False))
    log = _coerce_log(ctx.pulled.get("feedback_log"))
    revisions = int(ctx.pulled.get("revisions", 0))
    accepted = False

    if isinstance(reply, str) and reply.strip().lower() == "accept":
        if valid:
            accepted = True
        else:
            log.append(["reviewer_agent", "cannot accept: the artifact still has validation errors"])
            revisions += 1
    elif isinstance(reply, Mapping):
        edited = reply.get("artifact", reply)
        if stage == 3 and isinstance(edited, Mapping) and (
            "added_nodes" in edited or "removed_nodes" in edited or "modified_nodes" in edited
            or "added_edges" in edited or "removed_edges" in edited
        ):
            try:
                base = spec_from_doc(dict(artifact)) if isinstance(artifact, Mapping) else None
                edited = spec_to_doc(apply_delta(base, SpecDelta.from_doc(edited))) if base else edited
            except SpecError as exc:
                log.append(["reviewer_agent", f"edit could not be applied: {exc}"])
                revisions += 1
                edited = None
        if edited is not None:
            errors, normalized = _revalidate(stage, edited, ctx)
            log.append(["user_edit", json.dumps(edited, sort_keys=True, ensure_ascii=False)[:2000]])
            if errors:
                for problem in errors:
                    log.append(["reviewer_agent", f"validation: {problem}"])
                revisions += 1
            else:
                artifact = normalized
                accepted = True  # a valid direct edit is the user's approval
    elif isinstance(reply, str) and reply.strip():
        log.append(["user_text", reply.strip()])
        revisions += 1
    else:  # empty reply: treat as acceptance only if valid (non-interactive default)
        if valid:
            accepted = True
        else:
            revisions += 1

    return {
        "artifact": artifact,
        _STAGE_ARTIFACT_KEY[stage]: artifact,
        "accepted": accepted,
        "revisions": revisions,
        "feedback_log": log,
    }


def vg_assert_accepted(ctx: Any) -> dict[str, Any]:
    stage = int(ctx.node.config["stage"])
    key = ctx.node.config["artifact_key"]
    accepted = bool(ctx.pulled.get("accepted", False))
    outcome = StageOutcome(
        stage=stage,
        artifact=ctx.pulled.get(key),
        revisions=int(ctx.pulled.get("revisions", 0)),
        accepted=accepted,
        feedback_log=[tuple(e) for e in _coerce_log(ctx.pulled.get("feedback_log"))],
    )
    if not accepted:
        raise StageFailure(stage, "not accepted within the revision budget", outcome)
    return {"stage_done": stage, f"stage{stage}_outcome": outcome.to_doc()}


# ---------------------------------------------------------------------------
# Pipeline assembly


def _stage_loop(stage: int, *, correction_limit: int, max_revisions: int) -> NodeSpec:
    artifact_key = _STAGE_ARTIFACT_KEY[stage]
    generator_pulls = {
        "intent": "the build instruction",
        "constraint": "structural constraint text",
        "feedback_log": "ordered review feedback",
    }
    checker_pulls = {
        "feedback_log": "log",
        "corrections": "count",
        "accepted": "flag",
        "revisions": "count",
        "constraint": "text",
    }
    if stage >= 2:
        generator_pulls["roles"] = "accepted role cards"
        checker_pulls["roles"] = "accepted role cards"
    if stage == 3:
        generator_pulls["skeleton"] = "accepted topology skeleton"
        generator_pulls["pull_keys_map"] = "workflow-level state inputs"
        generator_pulls["push_keys_map"] = "workflow-level state outputs"
        checker_pulls["skeleton"] = "accepted topology skeleton"
        checker_pulls["pull_keys_map"] = "workflow inputs"
        checker_pulls["push_keys_map"] = "workflow outputs"

    body = {
        "nodes": [
            {
                "id": "generate",
                "type": "Action",
                "input_fields": [],
                "output_fields": ["artifact"],
                "instructions": stage_instructions(stage),
                "config": {"model": "__build__", "pull_keys": generator_pulls, "max_reasks": 1},
            },
            {
                "id": "check",
                "type": "Custom",
                "input_fields": ["artifact"],
                "output_fields": ["artifact", "valid", "errors"],
                "config": {
                    "callback": "vg_check",
                    "stage": stage,
                    "pull_keys": checker_pulls,
                    "push_keys": {
                        "artifact": "stage artifact",
                        artifact_key: "stage artifact under its published name",
                        "valid": "validator verdict",
                        "corrections": "automatic corrections so far",
                        "feedback_log": "review log",
                        "accepted": "stage acceptance",
                        "revisions": "human revision count",
                    },
                },
            },
            {
                "id": "gate",
                "type": "Switch",
                "config": {
                    "cases": [
                        {"when": {"key": "valid", "op": "eq", "value": True}, "activate": ["review"]},
                        {"when": {"key": "corrections", "op": "ge", "value": correction_limit}, "activate": ["review"]},
                    ],
                    "default": ["retry"],
                },
            },
            {
                "id": "review",
                "type": "Interaction",
                "input_fields": ["artifact", "errors"],
                "output_fields": ["reply"],
                "config": {
                    "schema": "accept_reject" if stage == 1 else "spec_edit",
                    "prompt": (
                        f"Stage {stage} ({STAGE_NAMES[stage]}) produced the artifact below. "
                        "Reply 'accept' to approve, send feedback text to request a revision, "
                        "or send an edited artifact object to replace it."
                    ),
                },
            },
            {
                "id": "apply",
                "type": "Custom",
                "input_fields": ["reply"],
                "output_fields": ["accepted"],
                "config": {
                    "callback": "vg_apply_review",
                    "stage": stage,
                    "pull_keys": {
                        "artifact": "artifact",
                        "valid": "verdict",
                        "feedback_log": "log",
                        "revisions": "count",
                        "constraint": "text",
                        **({"roles": "roles"} if stage >= 2 else {}),
                        **(
                            {"skeleton": "skeleton", "pull_keys_map": "in", "push_keys_map": "out"}
                            if stage == 3
                            else {}
                        ),
                    },
                    "push_keys": {
                        "artifact": "possibly edited artifact",
                        artifact_key: "stage artifact under its published name",
                        "accepted": "stage acceptance",
                        "revisions": "human revision count",
                        "feedback_log": "review log",
                    },
                },
            },
        ],
        "edges": [
            {"source": "ENTRY", "target": "generate"},
            {"source": "generate", "target": "check"},
            {"source": "check", "target": "gate"},
            {"source": "gate", "target": "review", "attributes": {"label": "review"}},
            {"source": "gate", "target": "EXIT", "attributes": {"label": "retry"}},
            {"source": "review", "target": "apply"},
            {"source": "apply", "target": "EXIT"},
        ],
    }

    loop_pulls = {
        "intent": "build instruction",
        "constraint": "constraint text",
        "pull_keys_map": "workflow inputs",
        "push_keys_map": "workflow outputs",
    }
    if stage >= 2:
        loop_pulls["roles"] = "accepted role cards"
    if stage == 3:
        loop_pulls["skeleton"] = "accepted skeleton"

    return NodeSpec(
        id=f"stage{stage}",
        kind="Loop",
        config={
            "body": body,
            "max_iterations": max_revisions,
            "stop_condition": {"key": "accepted", "op": "eq", "value": True},
            "pull_keys": loop_pulls,
            "push_keys": {
                artifact_key: "stage artifact",
                "accepted": "stage acceptance",
                "revisions": "revisions",
                "corrections": "corrections",
                "feedback_log": "log",
            },
            "state_seed": {
                "feedback_log": [],
                "corrections": 0,
                "revisions": 0,
                "accepted": False,
                "artifact": None,
                "valid": False,
            },
        },
    )


def _pipeline_registry(build_model: ChatModel) -> Registry:
    registry = Registry()
    registry.register_callback("vg_check", vg_check)
    registry.register_callback("vg_apply_review", vg_apply_review)
    registry.register_callback("vg_assert", vg_assert_accepted)
    registry.register_model("__build__", build_model, default=True)
    return registry


def build_pipeline(
    *,
    build_model: ChatModel,
    correction_limit: int = DEFAULT_CORRECTION_LIMIT,
    max_revisions: int = DEFAULT_MAX_REVISIONS,
) -> RuntimeGraph:
    """The intent-compiler itself, as an ordinary executable graph."""
    builder = GraphBuilder("intent_compiler")
    previous = ENTRY
    for stage in (1, 2, 3):
        loop = _stage_loop(stage, correction_limit=correction_limit, max_revisions=max_revisions)
        builder.add_node(loop.id, loop)
        gate_id = f"assert{stage}"
        builder.add_node(
            gate_id,
            NodeSpec(
                id=gate_id,
                kind="Custom",
                output_fields=["stage_done"],
                config={
                    "callback": "vg_assert",
                    "stage": stage,
                    "artifact_key": _STAGE_ARTIFACT_KEY[stage],
                    "pull_keys": {
                        _STAGE_ARTIFACT_KEY[stage]: "artifact",
                        "accepted": "flag",
                        "revisions": "count",
                        "feedback_log": "log",
                    },
                    "push_keys": {f"stage{stage}_outcome": "stage outcome record"},
                },
            ),
        )
        builder.add_edge(previous, loop.id)
        builder.add_edge(loop.id, gate_id)
        previous = gate_id
    builder.add_edge(previous, EXIT)
    return builder.build(_pipeline_registry(build_model))


# ---------------------------------------------------------------------------
# Top-level build


def compile_intent(
    instr: BuildInstruction,
    channel: InteractionChannel | None = None,
    *,
    build_model: ChatModel | None = None,
    trace: TraceLog | None = None,
    backend: str = "parallel",
    correction_limit: int = DEFAULT_CORRECTION_LIMIT,
    max_revisions: int = DEFAULT_MAX_REVISIONS,
) -> tuple[WorkflowSpec, list[StageOutcome], bool]:
    """Compile a build instruction into a validated workflow spec.

    Returns ``(spec, stage_outcomes, cache_hit)``. Warm cache hits perform
    zero model calls. Partial progress on failure is persisted to the cache
    (as an incomplete entry) before the failure propagates.
    """
    cache = BuildCache(instr.cache_path) if instr.cache_path else None
    fingerprint = instr.fingerprint()
    if cache is not None:
        entry = cache.get(fingerprint)
        if entry is not None and entry.get("spec"):
            spec = spec_from_doc(entry["spec"])
            outcomes = [StageOutcome.from_doc(doc) for doc in entry.get("stages", [])]
            return spec, outcomes, True

    if build_model is None:
        raise ValueError("cold build requires a build model")
    channel = channel or AutoAcceptChannel()
    pipeline = build_pipeline(
        build_model=build_model, correction_limit=correction_limit, max_revisions=max_revisions
    )
    engine = Engine(backend=backend, channel=channel, trace=trace)
    constraint_text = instr.structural_constraint or instr.intent
    attributes = {
        "intent": instr.intent,
        "constraint": constraint_text,
        "pull_keys_map": dict(instr.pull_keys),
        "push_keys_map": dict(instr.push_keys),
    }
    try:
        _, attrs = engine.invoke(pipeline, {}, attributes)
    except InvokeError as exc:
        attrs = dict(pipeline.state.attributes)
        outcomes = _collect_outcomes(attrs)
        if cache is not None:
            cache.put(fingerprint, spec_doc=None, outcomes=outcomes, complete=False)
        stage_error = _find_stage_failure(exc)
        if stage_error is not None:
            raise stage_error from exc
        raise

    outcomes = _collect_outcomes(attrs)
    spec = spec_from_doc(attrs["workflow"])
    if cache is not None:
        cache.put(fingerprint, spec_doc=spec_to_doc(spec), outcomes=outcomes, complete=True)
    return spec, outcomes, False


def build_vibegraph(
    instr: BuildInstruction,
    channel: InteractionChannel | None = None,
    registry: Registry | None = None,
    *,
    build_model: ChatModel | None = None,
    trace: TraceLog | None = None,
    backend: str = "parallel",
) -> RuntimeGraph:
    """Compile the instruction (cache-aware) and build the resulting workflow."""
    spec, _, _ = compile_intent(
        instr, channel=channel, build_model=build_model, trace=trace, backend=backend
    )
    return build_graph(spec, registry, name="vibegraph", channel=channel, trace=trace)


def _collect_outcomes(attrs: Mapping[str, Any]) -> list[StageOutcome]:
    outcomes = []
    for stage in (1, 2, 3):
        doc = attrs.get(f"stage{stage}_outcome")
        if isinstance(doc, Mapping):
            outcomes.append(StageOutcome.from_doc(doc))
    return outcomes


def _find_stage_failure(error: BaseException) -> StageFailure | None:
    seen: BaseException | None = error
    while seen is not None:
        if isinstance(seen, StageFailure):
            return seen
        seen = seen.__cause__
    return None


# ---------------------------------------------------------------------------
# Composed component


def _expand_vibegraph(params: Mapping[str, Any]) -> WorkflowSpec:
    instr = BuildInstruction(
        intent=params["build_instructions"],
        structural_constraint=params.get("structural_constraint"),
        pull_keys=dict(params.get("pull_keys", {})),
        push_keys=dict(params.get("push_keys", {})),
        cache_path=params.get("build_cache_path"),
    )
    registry: Registry | None = params.get("_registry")
    channel = params.get("channel") or params.get("_channel")
    trace = params.get("_trace")
    build_model = params.get("build_model")
    if isinstance(build_model, str) and registry is not None:
        build_model = registry.model(build_model)

    spec, _, _ = compile_intent(instr, channel=channel, build_model=build_model, trace=trace)

    invoke_model = params.get("invoke_model")
    if invoke_model is not None and registry is not None:
        model_key = invoke_model if isinstance(invoke_model, str) else f"vg:{params.get('_node_id', 'vibegraph')}"
        if not isinstance(invoke_model, str):
            registry.register_model(model_key, invoke_model)
        for node in spec.nodes:
            if node.kind == KIND_ACTION:
                node.config.setdefault("model", model_key)
    return spec


def vibegraph_composed_def() -> ComposedGraphDef:
    return ComposedGraphDef("VibeGraph", _expand_vibegraph)


def compile_instruction(
    instr: BuildInstruction,
    *,
    channel: InteractionChannel | None = None,
    build_model: ChatModel | None = None,
    trace: TraceLog | None = None,
) -> tuple[str, list[StageOutcome], bool]:
    """Build and return the canonical spec text (plus outcomes and hit flag)."""
    spec, outcomes, hit = compile_intent(instr, channel=channel, build_model=build_model, trace=trace)
    return serialize_spec(spec), outcomes, hit
