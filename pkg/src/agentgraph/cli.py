"""Command-line entry points: validate | run | compile | serve.

Live model credentials come from OPENAI_API_KEY / OPENAI_BASE_URL; pass
--model-script (and --build-model-script for intent builds) to replace the
model with a deterministic scripted mock, which is how the test suites and
offline demos run.
"""

from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path

import click

from .graph import BuildError, Registry, build_graph, default_registry
from .interaction import BrokerChannel, channel_from_mode
from .ir import SpecError, parse_spec, serialize_spec, validate_spec
from .models import ChatModel, ChatModelRef, OpenAIChatModel, ScriptedChatModel
from .runtime import Engine, InvokeError, TraceLog
from .service import RunManager, create_app, write_run_dir
from .vibegraph import BuildInstruction, StageFailure, compile_intent

DEFAULT_PORT = 8321


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise click.ClickException(f"cannot read '{path}': {exc}")


def _load_json(path: str) -> dict:
    text = _read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise click.ClickException(f"'{path}' is not valid JSON: {exc}")


def _invoke_model(model_script: str | None) -> ChatModel:
    if model_script:
        return ScriptedChatModel.from_file(model_script)
    return OpenAIChatModel(ChatModelRef(model_name=os.environ.get("OPENAI_MODEL", "gpt-4o-mini")))


def _registry_with_models(model_script: str | None) -> Registry:
    registry = default_registry()
    registry.register_model("invoke", _invoke_model(model_script), default=True)
    return registry


def _default_run_dir() -> str:
    return str(Path("runs") / time.strftime("%Y%m%d-%H%M%S"))


@click.group()
@click.version_option(package_name="agentgraph")
def main() -> None:
    """Graph-centric orchestration for LLM multi-agent workflows."""


@main.command()
@click.option("--spec", "spec_path", required=True, help="Workflow document to validate.")
def validate(spec_path: str) -> None:
    """Validate a workflow document; exit 0 iff it has no errors."""
    try:
        text = Path(spec_path).read_text(encoding="utf-8")
    except OSError as exc:
        click.echo(f"cannot read '{spec_path}': {exc}", err=True)
        sys.exit(2)
    try:
        spec = parse_spec(text)
    except SpecError as exc:
        click.echo(f"invalid document: {exc}", err=True)
        sys.exit(1)
    report = validate_spec(spec)
    click.echo(str(report))
    sys.exit(0 if report.ok else 1)


@main.command()
@click.option("--spec", "spec_path", default=None, help="Workflow document to run.")
@click.option("--instruction", "instruction_path", default=None, help="Build instruction to compile and run.")
@click.option("--attributes", "attributes_path", default=None, help="JSON file seeding graph-state attributes.")
@click.option("--backend", type=click.Choice(["parallel", "sequential"]), default="parallel", show_default=True)
@click.option(
    "--interaction",
    default="auto",
    show_default=True,
    help="Interaction mode: terminal | serve | scripted:<path> | auto.",
)
@click.option("--cache", "cache_path", default=None, help="Build cache file (instruction builds).")
@click.option("--run-dir", default=None, help="Directory for spec/trace/attribute artifacts.")
@click.option("--port", default=DEFAULT_PORT, show_default=True, help="Port for --interaction serve.")
@click.option("--model-script", default=None, help="Scripted replies for the workflow (invoke) model.")
@click.option("--build-model-script", default=None, help="Scripted replies for the build model.")
def run(
    spec_path: str | None,
    instruction_path: str | None,
    attributes_path: str | None,
    backend: str,
    interaction: str,
    cache_path: str | None,
    run_dir: str | None,
    port: int,
    model_script: str | None,
    build_model_script: str | None,
) -> None:
    """Build a workflow (declaratively or from an instruction) and invoke it."""
    if bool(spec_path) == bool(instruction_path):
        raise click.ClickException("exactly one of --spec / --instruction is required")
    run_dir = run_dir or _default_run_dir()
    attributes = _load_json(attributes_path) if attributes_path else {}
    trace = TraceLog()
    registry = _registry_with_models(model_script)

    serve_mode = interaction == "serve"
    channel = BrokerChannel() if serve_mode else channel_from_mode(interaction)

    try:
        if spec_path:
            spec = parse_spec(_read_text(spec_path))
        else:
            instruction = BuildInstruction.from_doc(
                _load_json(instruction_path), cache_path=cache_path
            )
            build_model = (
                ScriptedChatModel.from_file(build_model_script) if build_model_script else _invoke_model(None)
            )
            spec, _, _ = compile_intent(
                instruction, channel=channel, build_model=build_model, trace=trace
            )
        graph = build_graph(spec, registry, channel=channel, trace=trace)
    except (SpecError, BuildError, StageFailure) as exc:
        raise click.ClickException(str(exc))

    server_thread = None
    server = None
    if serve_mode:
        import threading

        import uvicorn

        manager = RunManager(graph, spec=spec, backend=backend, trace=trace, broker=channel)
        server = uvicorn.Server(
            uvicorn.Config(create_app(manager), host="127.0.0.1", port=port, log_level="warning")
        )
        server_thread = threading.Thread(target=server.run, daemon=True)
        server_thread.start()
        click.echo(f"interaction brokering at ws://127.0.0.1:{port}/ws", err=True)

    engine = Engine(backend=backend, channel=channel, trace=trace)
    error: str | None = None
    message = out_attributes = None
    try:
        message, out_attributes = engine.invoke(graph, {}, attributes)
    except InvokeError as exc:
        error = _error_chain(exc)
    finally:
        write_run_dir(
            run_dir, spec=spec, trace=trace, message=message, attributes=out_attributes, error=error
        )
        if server is not None:
            server.should_exit = True
            server_thread.join(timeout=5)

    if error is not None:
        click.echo(f"run failed: {error}", err=True)
        click.echo(f"run artifacts: {run_dir}", err=True)
        sys.exit(1)
    click.echo(json.dumps(out_attributes, indent=2, sort_keys=True, ensure_ascii=False, default=str))
    click.echo(f"run artifacts: {run_dir}", err=True)


def _error_chain(error: BaseException) -> str:
    parts = []
    seen: BaseException | None = error
    while seen is not None:
        parts.append(f"{type(seen).__name__}: {seen}")
        seen = seen.__cause__
    return " <- caused by: ".join(parts)


@main.command()
@click.option("--instruction", "instruction_path", required=True, help="Build instruction JSON file.")
@click.option("--cache", "cache_path", default=None, help="Build cache file.")
@click.option(
    "--interaction",
    default="auto",
    show_default=True,
    help="Interaction mode for stage reviews: terminal | scripted:<path> | auto.",
)
@click.option("--model-script", default=None, help="Scripted replies for the build model.")
@click.option("--out", "out_path", default=None, help="Write the compiled spec here as well as stdout.")
def compile(
    instruction_path: str,
    cache_path: str | None,
    interaction: str,
    model_script: str | None,
    out_path: str | None,
) -> None:
    """Compile a natural-language build instruction into a canonical workflow spec."""
    instruction = BuildInstruction.from_doc(_load_json(instruction_path), cache_path=cache_path)
    channel = channel_from_mode(interaction)
    build_model = _invoke_model(model_script)
    try:
        spec, outcomes, hit = compile_intent(instruction, channel=channel, build_model=build_model)
    except StageFailure as exc:
        click.echo(f"{exc}", err=True)
        if exc.outcome is not None:
            click.echo(json.dumps(exc.outcome.to_doc(), indent=2, default=str), err=True)
        sys.exit(1)
    text = serialize_spec(spec)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text, encoding="utf-8")
    click.echo(text, nl=False)
    source = "cache" if hit else "cold build"
    click.echo(f"compiled from {source}; stages accepted: {[o.stage for o in outcomes if o.accepted]}", err=True)


@main.command()
@click.option("--spec", "spec_path", default=None, help="Workflow document to serve.")
@click.option("--instruction", "instruction_path", default=None, help="Instruction to compile at startup.")
@click.option("--attributes", "attributes_path", default=None, help="Default attributes for started runs.")
@click.option("--backend", type=click.Choice(["parallel", "sequential"]), default="parallel", show_default=True)
@click.option("--interaction", default="auto", show_default=True, help="Channel for build-time reviews.")
@click.option("--cache", "cache_path", default=None, help="Build cache file (instruction builds).")
@click.option("--run-dir", default=None, help="Directory for run artifacts.")
@click.option("--port", default=DEFAULT_PORT, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--model-script", default=None, help="Scripted replies for the workflow model.")
@click.option("--build-model-script", default=None, help="Scripted replies for the build model.")
@click.option("--ui", "ui_dir", default=None, help="Serve the built visualizer from this directory at /ui.")
def serve(
    spec_path: str | None,
    instruction_path: str | None,
    attributes_path: str | None,
    backend: str,
    interaction: str,
    cache_path: str | None,
    run_dir: str | None,
    port: int,
    host: str,
    model_script: str | None,
    build_model_script: str | None,
    ui_dir: str | None,
) -> None:
    """Serve the spec, a live trace stream, and interaction brokering."""
    if bool(spec_path) == bool(instruction_path):
        raise click.ClickException("exactly one of --spec / --instruction is required")
    registry = _registry_with_models(model_script)
    trace = TraceLog()
    broker = BrokerChannel()
    try:
        if spec_path:
            spec = parse_spec(_read_text(spec_path))
        else:
            instruction = BuildInstruction.from_doc(_load_json(instruction_path), cache_path=cache_path)
            build_model = (
                ScriptedChatModel.from_file(build_model_script) if build_model_script else _invoke_model(None)
            )
            spec, _, _ = compile_intent(
                instruction, channel=channel_from_mode(interaction), build_model=build_model, trace=trace
            )
        graph = build_graph(spec, registry, channel=broker, trace=trace)
    except (SpecError, BuildError, StageFailure) as exc:
        raise click.ClickException(str(exc))

    attributes = _load_json(attributes_path) if attributes_path else {}
    manager = RunManager(
        graph,
        spec=spec,
        backend=backend,
        trace=trace,
        broker=broker,
        default_attributes=attributes,
        run_dir=run_dir,
    )
    if ui_dir:
        click.echo(f"visualizer at http://{host}:{port}/ui/", err=True)
    click.echo(f"serving on http://{host}:{port} (live channel: /ws)", err=True)
    from .service import serve as run_server

    run_server(manager, host=host, port=port, static_dir=ui_dir)


if __name__ == "__main__":
    main()
