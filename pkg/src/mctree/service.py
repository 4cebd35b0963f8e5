"""HTTP service: submit tuning runs, follow their progress, fetch exports.

Start it with ``mctree serve`` or ``uvicorn mctree.service:app``.
"""

from __future__ import annotations

import os
import tempfile
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse

from . import __version__
from .jobs import Job, JobManager, expand
from .loopmodel import LoopNestValidationError
from .schemas import ExpandRequest, ExpandResponse, Message, RunRequest, RunStatus, TracePoint


def create_app(data_dir: Optional[Path] = None) -> FastAPI:
    if data_dir is None:
        data_dir = Path(os.environ.get("MCTREE_DATA_DIR") or tempfile.mkdtemp(prefix="mctree-service-"))
    manager = JobManager(data_dir)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        manager.shutdown()

    app = FastAPI(title="mctree", version=__version__, lifespan=lifespan)
    app.state.manager = manager

    def job_or_404(run_id: str) -> Job:
        job = manager.jobs.get(run_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no run {run_id}")
        return job

    @app.get("/health", response_model=Message)
    def health():
        return Message(message="ok")

    @app.post("/expand", response_model=ExpandResponse)
    def expand_children(req: ExpandRequest):
        try:
            return expand(req)
        except (LoopNestValidationError, ValueError, IndexError) as e:
            raise HTTPException(status_code=422, detail=str(e))

    @app.post("/runs", response_model=RunStatus, status_code=202)
    def submit_run(req: RunRequest):
        return manager.submit(req).status()

    @app.get("/runs", response_model=list[RunStatus])
    def list_runs():
        return [job.status() for job in manager.jobs.values()]

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: str):
        return job_or_404(run_id).status()

    @app.post("/runs/{run_id}/stop", response_model=RunStatus)
    def stop_run(run_id: str):
        job = job_or_404(run_id)
        job.stop()
        return job.status()

    @app.get("/runs/{run_id}/trace", response_model=list[TracePoint])
    def run_trace(run_id: str):
        return [TracePoint(experiment=n, seconds=s) for n, s in job_or_404(run_id).trace()]

    @app.get("/runs/{run_id}/dot", response_class=PlainTextResponse)
    def run_dot(run_id: str):
        return PlainTextResponse(job_or_404(run_id).dot(), media_type="text/vnd.graphviz")

    @app.get("/runs/{run_id}/csv", response_class=PlainTextResponse)
    def run_csv(run_id: str):
        return PlainTextResponse(job_or_404(run_id).csv(), media_type="text/csv")

    @app.get("/runs/{run_id}/log", response_class=PlainTextResponse)
    def run_log(run_id: str):
        job = job_or_404(run_id)
        text = job.log_path.read_text() if job.log_path.exists() else ""
        return PlainTextResponse(text, media_type="application/x-ndjson")

    return app


_app: Optional[FastAPI] = None


def __getattr__(name):
    # ``uvicorn mctree.service:app`` builds the app on first access
    global _app
    if name == "app":
        if _app is None:
            _app = create_app()
        return _app
    raise AttributeError(name)
