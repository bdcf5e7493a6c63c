"""Serve endpoint: spec retrieval, run control, live trace streaming, and
interaction brokering for visualizer clients.

Transport: request/response HTTP for the spec and run control; one
full-duplex WebSocket (``/ws``) carrying newline-delimited JSON records for
the live channel. Outbound records are trace events
(``{seq, wall_time, node_id, kind, payload}``) and pending interaction
requests (``{request_id, node_id, prompt, schema}``); inbound records are
interaction responses (``{request_id, payload}``). Every trace event is
delivered exactly once per connection, in seq order: subscribers get an
atomic snapshot plus the live feed, and reconnecting clients resume from
``?since=<seq>``.
"""

from __future__ import annotations

import asyncio
import json
import threading
import time
from pathlib import Path
from typing import Any

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, Field

from .graph import Registry, RuntimeGraph, extract_spec
from .interaction import BrokerChannel, InteractionRequest
from .ir import WorkflowSpec, serialize_spec, spec_to_doc
from .runtime import Engine, TraceEvent, TraceLog


class RunStartRequest(BaseModel):
    message: dict[str, Any] = Field(default_factory=dict)
    attributes: dict[str, Any] = Field(default_factory=dict)


class RunStatusResponse(BaseModel):
    run_id: str | None
    state: str  # "idle" | "running" | "done" | "failed"
    error: str | None = None
    attributes: dict[str, Any] | None = None
    message: dict[str, Any] | None = None


class InteractionResponseBody(BaseModel):
    request_id: str
    payload: Any = None


class ResponseOutcome(BaseModel):
    status: str  # "accepted" | "rejected" | "ignored"
    reason: str = ""


def _json_default(value: Any) -> str:
    return str(value)


def encode_record(record: dict[str, Any]) -> str:
    """One wire record: a single JSON object terminated by a newline."""
    return json.dumps(record, ensure_ascii=False, default=_json_default) + "\n"


def write_run_dir(
    run_dir: str | Path,
    *,
    spec: WorkflowSpec | None,
    trace: TraceLog,
    message: dict[str, Any] | None,
    attributes: dict[str, Any] | None,
    error: str | None = None,
) -> Path:
    """Persist the fixed run-directory layout: spec.json, trace.ndjson,
    attributes_out.json, interactions.ndjson."""
    path = Path(run_dir)
    path.mkdir(parents=True, exist_ok=True)
    if spec is not None:
        (path / "spec.json").write_text(serialize_spec(spec, check=False), encoding="utf-8")
    events = trace.events
    with (path / "trace.ndjson").open("w", encoding="utf-8") as handle:
        for event in events:
            handle.write(encode_record(event.to_doc()))
    with (path / "interactions.ndjson").open("w", encoding="utf-8") as handle:
        for event in events:
            if event.kind in ("interaction_request", "interaction_response"):
                handle.write(encode_record(event.to_doc()))
    out: dict[str, Any] = {"message": message, "attributes": attributes}
    if error is not None:
        out["error"] = error
    (path / "attributes_out.json").write_text(
        json.dumps(out, indent=2, sort_keys=True, ensure_ascii=False, default=_json_default) + "\n",
        encoding="utf-8",
    )
    return path


class RunManager:
    """Owns the configured graph, the shared trace, the broker, and the
    one-at-a-time engine run."""

    def __init__(
        self,
        graph: RuntimeGraph,
        *,
        spec: WorkflowSpec | None = None,
        backend: str = "parallel",
        trace: TraceLog | None = None,
        broker: BrokerChannel | None = None,
        default_attributes: dict[str, Any] | None = None,
        run_dir: str | Path | None = None,
    ):
        self.graph = graph
        self.spec = spec if spec is not None else extract_spec(graph)
        self.backend = backend
        self.trace = trace or TraceLog()
        self.broker = broker or BrokerChannel()
        self.default_attributes = dict(default_attributes or {})
        self.run_dir = Path(run_dir) if run_dir else None
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self.run_id: str | None = None
        self.state = "idle"
        self.error: str | None = None
        self.result_message: dict[str, Any] | None = None
        self.result_attributes: dict[str, Any] | None = None

    def status(self) -> RunStatusResponse:
        return RunStatusResponse(
            run_id=self.run_id,
            state=self.state,
            error=self.error,
            attributes=self.result_attributes,
            message=self.result_message,
        )

    def start(self, message: dict[str, Any], attributes: dict[str, Any]) -> str:
        with self._lock:
            if self.state == "running":
                raise RuntimeError("a run is already in progress")
            self.run_id = f"run-{int(time.time() * 1000):x}"
            self.state = "running"
            self.error = None
            self.result_message = None
            self.result_attributes = None
            merged = {**self.default_attributes, **attributes}
            self._thread = threading.Thread(
                target=self._execute, args=(dict(message), merged), daemon=True, name=self.run_id
            )
            self._thread.start()
            return self.run_id

    def _execute(self, message: dict[str, Any], attributes: dict[str, Any]) -> None:
        self.broker.reopen()  # a previous failed run may have closed it
        engine = Engine(backend=self.backend, channel=self.broker, trace=self.trace)
        error: str | None = None
        try:
            out_message, out_attributes = engine.invoke(self.graph, message, attributes)
            self.result_message = out_message
            self.result_attributes = out_attributes
            self.state = "done"
        except Exception as exc:  # surfaced via /status and the run record
            error = str(exc)
            self.error = error
            self.state = "failed"
        if self.run_dir is not None:
            write_run_dir(
                self.run_dir,
                spec=self.spec,
                trace=self.trace,
                message=self.result_message,
                attributes=self.result_attributes,
                error=error,
            )

    def join(self, timeout: float | None = None) -> None:
        thread = self._thread
        if thread is not None:
            thread.join(timeout)


def create_app(manager: RunManager, *, static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="agentgraph serve", version="0.1.0")
    app.state.manager = manager

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(static_dir), html=True), name="ui")

    @app.get("/spec")
    def get_spec() -> dict[str, Any]:
        return spec_to_doc(manager.spec)

    @app.get("/status", response_model=RunStatusResponse)
    def get_status() -> RunStatusResponse:
        return manager.status()

    @app.post("/runs", response_model=RunStatusResponse)
    def start_run(body: RunStartRequest) -> RunStatusResponse:
        try:
            manager.start(body.message, body.attributes)
        except RuntimeError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return manager.status()

    @app.get("/trace")
    def get_trace(since: int = 0) -> dict[str, Any]:
        events = [e.to_doc() for e in manager.trace.events if e.seq >= since]
        return {"events": events}

    @app.get("/interactions")
    def get_interactions() -> dict[str, Any]:
        return {"pending": [r.to_doc() for r in manager.broker.pending_requests()]}

    @app.post("/interactions/{request_id}", response_model=ResponseOutcome)
    def answer_interaction(request_id: str, body: InteractionResponseBody) -> ResponseOutcome:
        if body.request_id and body.request_id != request_id:
            return ResponseOutcome(status="rejected", reason="request_id mismatch between path and body")
        accepted, reason = manager.broker.resolve(request_id, body.payload)
        if accepted:
            return ResponseOutcome(status="accepted", reason=reason)
        if "duplicate" in reason:
            return ResponseOutcome(status="ignored", reason=reason)
        return ResponseOutcome(status="rejected", reason=reason)

    @app.websocket("/ws")
    async def live_channel(websocket: WebSocket, since: int = 0) -> None:
        await websocket.accept()
        loop = asyncio.get_running_loop()
        outbound: asyncio.Queue[dict[str, Any]] = asyncio.Queue()

        def on_event(event: TraceEvent) -> None:
            loop.call_soon_threadsafe(outbound.put_nowait, event.to_doc())

        def on_request(request: InteractionRequest) -> None:
            loop.call_soon_threadsafe(outbound.put_nowait, request.to_doc())

        snapshot = manager.trace.subscribe(on_event, since=since)
        manager.broker.listeners.append(on_request)
        try:
            for event in snapshot:
                await websocket.send_text(encode_record(event.to_doc()))
            for request in manager.broker.pending_requests():
                await websocket.send_text(encode_record(request.to_doc()))

            receiver = asyncio.create_task(websocket.receive_text())
            sender = asyncio.create_task(outbound.get())
            while True:
                done, _ = await asyncio.wait({receiver, sender}, return_when=asyncio.FIRST_COMPLETED)
                if receiver in done:
                    raw = receiver.result()  # raises WebSocketDisconnect on close
                    ack = _handle_inbound(manager, raw)
                    await websocket.send_text(encode_record(ack))
                    receiver = asyncio.create_task(websocket.receive_text())
                if sender in done:
                    record = sender.result()
                    await websocket.send_text(encode_record(record))
                    sender = asyncio.create_task(outbound.get())
        except WebSocketDisconnect:
            pass
        finally:
            manager.trace.unsubscribe(on_event)
            if on_request in manager.broker.listeners:
                manager.broker.listeners.remove(on_request)
            for task in (locals().get("receiver"), locals().get("sender")):
                if task is not None and not task.done():
                    task.cancel()

    return app


def _handle_inbound(manager: RunManager, raw: str) -> dict[str, Any]:
    try:
        record = json.loads(raw)
        request_id = record["request_id"]
    except (json.JSONDecodeError, KeyError, TypeError):
        return {"status": "rejected", "reason": "malformed response record"}
    accepted, reason = manager.broker.resolve(request_id, record.get("payload"))
    if accepted:
        return {"status": "accepted", "request_id": request_id, "reason": reason}
    status = "ignored" if "duplicate" in reason else "rejected"
    return {"status": status, "request_id": request_id, "reason": reason}


def serve(
    manager: RunManager,
    *,
    host: str = "127.0.0.1",
    port: int = 8321,
    log_level: str = "warning",
    static_dir: str | Path | None = None,
) -> None:
    """Run the service until interrupted (blocking)."""
    import uvicorn

    uvicorn.run(create_app(manager, static_dir=static_dir), host=host, port=port, log_level=log_level)
