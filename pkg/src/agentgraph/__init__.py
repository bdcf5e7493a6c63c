"""Graph-centric orchestration engine for LLM multi-agent workflows.

Workflows are directed graphs of agent, routing, loop and interaction nodes
with three explicit collaboration flows: control (edge-borne readiness),
messages (field maps along edges) and state (declared pull/push keys between
a graph and its subgraphs). Graphs come from a declarative JSON spec, from
the imperative builder, or from a natural-language instruction compiled by
the staged intent compiler.
"""

from .agents import AgentConfig, run_agent
from .context import ContextRequest, ContextUnit, InMemoryContextAdapter
from .graph import (
    BuildError,
    ComposedGraphDef,
    GraphBuilder,
    GraphState,
    LoopConfig,
    NodeTemplate,
    Predicate,
    Registry,
    RuntimeGraph,
    RuntimeNode,
    SwitchConfig,
    build_graph,
    default_registry,
    expand_composed,
    extract_spec,
)
from .interaction import (
    AutoAcceptChannel,
    BrokerChannel,
    ChannelClosed,
    InteractionRequest,
    ScriptedChannel,
    TerminalChannel,
)
from .ir import (
    ENTRY,
    EXIT,
    EdgeSpec,
    NodeSpec,
    SpecDelta,
    SpecError,
    ValidationReport,
    WorkflowSpec,
    apply_delta,
    diff_spec,
    parse_spec,
    serialize_spec,
    validate_spec,
)
from .models import ChatModelRef, ModelError, OpenAIChatModel, ScriptedChatModel
from .protocols import decode_message, encode_message, register_protocol
from .runtime import (
    DeadlockError,
    Engine,
    InvokeError,
    MessageEnvelope,
    TraceEvent,
    TraceLog,
    compute_ready,
    invoke,
)
from .vibegraph import (
    BuildCache,
    BuildInstruction,
    StageFailure,
    StageOutcome,
    build_vibegraph,
    compile_intent,
)

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "AutoAcceptChannel",
    "BrokerChannel",
    "BuildCache",
    "BuildError",
    "BuildInstruction",
    "ChannelClosed",
    "ChatModelRef",
    "ComposedGraphDef",
    "ContextRequest",
    "ContextUnit",
    "DeadlockError",
    "EdgeSpec",
    "Engine",
    "ENTRY",
    "EXIT",
    "GraphBuilder",
    "GraphState",
    "InMemoryContextAdapter",
    "InteractionRequest",
    "InvokeError",
    "LoopConfig",
    "MessageEnvelope",
    "ModelError",
    "NodeSpec",
    "NodeTemplate",
    "OpenAIChatModel",
    "Predicate",
    "Registry",
    "RuntimeGraph",
    "RuntimeNode",
    "ScriptedChannel",
    "ScriptedChatModel",
    "SpecDelta",
    "SpecError",
    "StageFailure",
    "StageOutcome",
    "SwitchConfig",
    "TerminalChannel",
    "TraceEvent",
    "TraceLog",
    "ValidationReport",
    "WorkflowSpec",
    "apply_delta",
    "build_graph",
    "build_vibegraph",
    "compile_intent",
    "compute_ready",
    "decode_message",
    "default_registry",
    "diff_spec",
    "encode_message",
    "expand_composed",
    "extract_spec",
    "invoke",
    "parse_spec",
    "register_protocol",
    "run_agent",
    "serialize_spec",
    "validate_spec",
]
