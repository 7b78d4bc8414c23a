"""Operator HTTP API: run state, live event stream, mandate and control.

A thin FastAPI layer over the in-process run registry.  All mutations route
through the run's own control surface; the API itself never touches
workspaces.
"""

from __future__ import annotations

from typing import Any, Literal, Optional

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import PlainTextResponse, StreamingResponse
from pydantic import BaseModel

from .autopsy import MandateMissing, SchemaError
from .market import equity_to_csv
from .orchestrator import ConflictError, EventLog, Run


class RunRegistry:
    """In-process mapping of run_id to live Run objects."""

    def __init__(self):
        self._runs: dict[str, Run] = {}

    def register(self, run: Run) -> None:
        self._runs[run.run_id] = run

    def get(self, run_id: str) -> Optional[Run]:
        return self._runs.get(run_id)

    def ids(self) -> list[str]:
        return sorted(self._runs)


class RunSummary(BaseModel):
    run_id: str
    status: str
    step_index: int
    wealth: float
    principal_loss: float
    last_event_seq: int
    pending_autopsy: Optional[dict[str, Any]] = None


class ControlRequest(BaseModel):
    action: Literal["pause", "resume", "halt"]


class ControlResponse(BaseModel):
    run_id: str
    status: str


class MandateResponse(BaseModel):
    accepted: bool
    status: str


def create_app(registry: RunRegistry) -> FastAPI:
    app = FastAPI(title="patchlock operator API")

    def _run(run_id: str) -> Run:
        run = registry.get(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        return run

    @app.get("/runs", response_model=list[str])
    def list_runs() -> list[str]:
        return registry.ids()

    @app.get("/runs/{run_id}", response_model=RunSummary)
    def get_state(run_id: str) -> RunSummary:
        return RunSummary(**_run(run_id).summary())

    @app.get("/runs/{run_id}/events")
    def stream_events(run_id: str, from_seq: int = Query(0, alias="from")):
        run = _run(run_id)

        def generate():
            for record in run.events.follow(from_seq):
                yield EventLog.serialize(record) + "\n"

        return StreamingResponse(generate(), media_type="application/x-ndjson")

    @app.get("/runs/{run_id}/equity", response_class=PlainTextResponse)
    def get_equity(run_id: str) -> str:
        return equity_to_csv(_run(run_id).equity_snapshot())

    @app.post("/runs/{run_id}/mandate", response_model=MandateResponse)
    def submit_mandate(run_id: str, document: dict[str, Any]) -> MandateResponse:
        run = _run(run_id)
        try:
            run.submit_mandate(document)
        except ConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except SchemaError as exc:
            raise HTTPException(
                status_code=422,
                detail={"reason": "SchemaError", "field": exc.field},
            ) from exc
        except MandateMissing as exc:
            raise HTTPException(
                status_code=422,
                detail={"reason": "MandateMissing"},
            ) from exc
        return MandateResponse(accepted=True, status=run.summary()["status"])

    @app.post("/runs/{run_id}/control", response_model=ControlResponse)
    def control(run_id: str, request: ControlRequest) -> ControlResponse:
        run = _run(run_id)
        try:
            status = run.control(request.action)
        except ConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return ControlResponse(run_id=run_id, status=status.value)

    return app
