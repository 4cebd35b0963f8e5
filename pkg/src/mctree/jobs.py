"""Tuning runs as background jobs.

Runs execute one at a time on a single worker thread so that timed
executions never overlap.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
import traceback
from pathlib import Path
from typing import Optional

from .evaluate import CompilerEvaluator, CostModel, EvalRequest, SyntheticEvaluator
from .loopmodel import loopnests_from_data
from .report import export_dot, export_progress_csv
from .rewrite import render_pragma
from .schemas import BestConfig, Child, ChildCounts, ExpandRequest, ExpandResponse, RunRequest, RunStatus
from .search import SearchParams, SearchState, Tuner, best_so_far_trace, child_configs, follow_path
from .transforms import kind

log = logging.getLogger(__name__)


def make_evaluator(req: RunRequest, workdir: Path):
    if req.synthetic is not None:
        model = CostModel.from_dict(req.synthetic)
        nests = loopnests_from_data(req.loopnests or {"loopnests": req.synthetic["loopnests"]})
        return SyntheticEvaluator(model, nests)
    request = EvalRequest(req.compiler_cmdline, timeout=req.timeout, repeats=req.repeats,
                          cwd=Path(req.cwd) if req.cwd else None)
    return CompilerEvaluator(request, workdir, keep_files=req.keep_files, timeout_factor=req.timeout_factor)


def expand(req: ExpandRequest) -> ExpandResponse:
    nests = loopnests_from_data(req.loopnests)
    params = SearchParams(tuple(req.tile_sizes), req.parallelize)
    configs = follow_path(nests, params, req.path)
    children = []
    counts = ChildCounts()
    for index, (nest, child) in enumerate(child_configs(configs, params)):
        t = child[nest].transformations[-1]
        children.append(Child(index=index, nest=nest, kind=kind(t), pragma=render_pragma(t)))
        setattr(counts, kind(t), getattr(counts, kind(t)) + 1)
    pragmas = [render_pragma(t) for c in configs for t in c.transformations]
    return ExpandResponse(pragmas=pragmas, children=children, counts=counts)


def status_of(run_id: str, state_name: str, state: Optional[SearchState], error: Optional[str] = None) -> RunStatus:
    status = RunStatus(id=run_id, state=state_name, error=error)
    if state is None or not state.experiments:
        return status
    status.experiments = len(state.experiments)
    status.expansions = len(state.expansions)
    status.baseline_seconds = state.experiments[0].seconds
    best = state.best_experiment
    if best is not None:
        status.best = BestConfig(number=best.number, seconds=best.seconds, pragmas=best.pragmas())
    return status


class Job:
    def __init__(self, run_id: str, request: RunRequest, workdir: Path):
        self.id = run_id
        self.request = request
        self.workdir = workdir
        self.log_path = workdir / "log.jsonl"
        self.state_name = "queued"
        self.error: Optional[str] = None
        self.tuner: Optional[Tuner] = None
        self._stop_requested = False

    @property
    def state(self) -> Optional[SearchState]:
        return self.tuner.state if self.tuner else None

    def status(self) -> RunStatus:
        return status_of(self.id, self.state_name, self.state, self.error)

    def run(self):
        req = self.request
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.state_name = "running"
        try:
            evaluator = make_evaluator(req, self.workdir)
            params = SearchParams(tuple(req.tile_sizes), req.parallelize)
            self.tuner = Tuner(evaluator, params, log_path=self.log_path)
            if self._stop_requested:
                self.tuner.stop_event.set()
            self.tuner.run(max_experiments=req.max_experiments, wall_clock=req.wall_clock_budget)
        except Exception as e:
            log.debug("run %s failed\n%s", self.id, traceback.format_exc())
            self.state_name = "failed"
            self.error = str(e) or type(e).__name__
            return
        self.state_name = "stopped" if self.tuner.stop_event.is_set() else "finished"

    def stop(self):
        self._stop_requested = True
        if self.tuner:
            self.tuner.stop_event.set()
        elif self.state_name == "queued":
            self.state_name = "stopped"

    def trace(self):
        return best_so_far_trace(self.state) if self.state else []

    def dot(self) -> str:
        return export_dot(self.state) if self.state else ""

    def csv(self) -> str:
        return export_progress_csv(self.state) if self.state else ""


class JobManager:
    def __init__(self, data_dir: Path):
        self.data_dir = Path(data_dir)
        self.jobs: dict[str, Job] = {}
        self._ids = itertools.count(1)
        self._queue: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._worker: Optional[threading.Thread] = None

    def submit(self, request: RunRequest) -> Job:
        with self._lock:
            run_id = f"run{next(self._ids)}"
            job = Job(run_id, request, self.data_dir / run_id)
            self.jobs[run_id] = job
            if self._worker is None or not self._worker.is_alive():
                self._worker = threading.Thread(target=self._work, name="mctree-worker", daemon=True)
                self._worker.start()
        self._queue.put(job)
        return job

    def _work(self):
        while True:
            job = self._queue.get()
            if job is None:
                return
            if job.state_name == "queued":
                job.run()
            self._queue.task_done()

    def wait(self, timeout: Optional[float] = None):
        """Block until all submitted jobs are done (for tests and shutdown)."""
        done = threading.Event()

        def waiter():
            self._queue.join()
            done.set()
        threading.Thread(target=waiter, daemon=True).start()
        return done.wait(timeout)

    def shutdown(self):
        for job in self.jobs.values():
            job.stop()
        self._queue.put(None)
