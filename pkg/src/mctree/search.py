"""Autotuning driver.

Experiment 0 is the untransformed program. The fastest measured experiment
whose children have not been derived yet is expanded next: each child is
rewritten, evaluated and numbered in turn. Failed experiments stay in the
record but are never expanded. The search space is unbounded, so runs
normally end on a budget.

Every evaluated experiment is appended to a JSON-lines log, which is enough to
rebuild the search state and continue it.
"""

from __future__ import annotations

import heapq
import json
import logging
import threading
import time
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import __version__
from .evaluate import Outcome, Status, initial_fresh_counter
from .loopmodel import LoopNest, loopnests_from_data, loopnests_to_data
from .rewrite import render_pragma
from .transforms import Configuration, candidate_transformations

log = logging.getLogger(__name__)


class SearchError(RuntimeError):
    pass


class BaselineFailed(SearchError):
    def __init__(self, outcome: Outcome):
        super().__init__(f"baseline {outcome.describe()}\n{outcome.log_excerpt}".rstrip())
        self.outcome = outcome


class ResumeError(SearchError):
    pass


@dataclass
class Experiment:
    number: int
    configs: tuple[Configuration, ...]
    outcome: Outcome
    parent_number: Optional[int] = None
    child_index: Optional[int] = None
    nest: Optional[int] = None
    expanded: bool = False

    @property
    def config(self) -> Configuration:
        """Configuration of the first loop nest (the only one in single-nest programs)."""
        return self.configs[0]

    @property
    def seconds(self) -> Optional[float]:
        return self.outcome.seconds

    @property
    def transformation(self):
        if self.nest is None:
            return None
        return self.configs[self.nest].transformations[-1]

    def pragmas(self) -> list[str]:
        return [render_pragma(t) for c in self.configs for t in c.transformations]


class BestFirst:
    """Exploitation only: always expand the fastest unexpanded experiment.

    Ties go to the lower experiment number.
    """

    def __init__(self):
        self._heap: list[tuple[float, int]] = []

    def report(self, exp: Experiment):
        if exp.outcome.ok:
            heapq.heappush(self._heap, (exp.seconds, exp.number))

    def select(self) -> Optional[int]:
        if not self._heap:
            return None
        return heapq.heappop(self._heap)[1]

    def frontier(self) -> list[int]:
        return [n for _, n in sorted(self._heap)]


@dataclass(frozen=True)
class SearchParams:
    tile_sizes: tuple[int, ...]
    parallelize: bool = True

    def __post_init__(self):
        sizes = tuple(sorted(set(int(s) for s in self.tile_sizes)))
        if not sizes:
            raise ValueError("at least one tile size is required")
        if sizes[0] < 2:
            raise ValueError("tile sizes must be at least 2")
        object.__setattr__(self, "tile_sizes", sizes)


@dataclass
class SearchState:
    params: SearchParams
    baselines: list[LoopNest] = field(default_factory=list)
    experiments: list[Experiment] = field(default_factory=list)
    strategy: BestFirst = field(default_factory=BestFirst)
    best: Optional[int] = None
    expansions: list[int] = field(default_factory=list)
    # children of the experiment being expanded that are not evaluated yet
    expanding: Optional[int] = None
    pending: Sequence = ()
    next_child: int = 0
    # ("expand" | "experiment", number) in the order they happened
    events: list = field(default_factory=list)

    @property
    def frontier(self) -> list[int]:
        return self.strategy.frontier()

    @property
    def best_experiment(self) -> Optional[Experiment]:
        return None if self.best is None else self.experiments[self.best]

    def record(self, exp: Experiment):
        assert exp.number == len(self.experiments)
        self.experiments.append(exp)
        self.events.append(("experiment", exp.number))
        self.strategy.report(exp)
        if exp.outcome.ok and (self.best is None or exp.seconds < self.experiments[self.best].seconds):
            self.best = exp.number


class ChildList(Sequence):
    """Children of a global configuration, derived when accessed.

    Entries are ``(nest index, configurations)``; a child adds one
    transformation to one loop nest. Fresh ids continue from the largest
    counter among the nests.
    """

    def __init__(self, configs, params: SearchParams):
        counter = max(c.fresh_id_counter for c in configs)
        self.configs = tuple(configs)
        self._bases = [replace(c, fresh_id_counter=counter) for c in self.configs]
        self._candidates = [(i, t, n) for i, base in enumerate(self._bases)
                            for t, n in candidate_transformations(base, params.tile_sizes, params.parallelize)]

    def __len__(self):
        return len(self._candidates)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        i, t, counter = self._candidates[index]
        child = self._bases[i].derive(t, counter)
        return i, self.configs[:i] + (child,) + self.configs[i + 1:]

    def transformation(self, index):
        return self._candidates[index][1]


def child_configs(configs, params: SearchParams) -> ChildList:
    return ChildList(configs, params)


def baseline_configs(nests) -> tuple[Configuration, ...]:
    counter = initial_fresh_counter(nests)
    return tuple(Configuration.baseline(n, nest_index=i, fresh_id_counter=counter) for i, n in enumerate(nests))


def follow_path(nests, params: SearchParams, path=()) -> tuple[Configuration, ...]:
    """Start at the baseline and descend into the given child indices."""
    configs = baseline_configs(nests)
    for step, index in enumerate(path):
        children = child_configs(configs, params)
        if not 0 <= index < len(children):
            raise IndexError(f"step {step}: child {index} does not exist ({len(children)} children)")
        configs = children[index][1]
    return configs


def best_so_far_trace(state: SearchState) -> list[tuple[int, float]]:
    trace = []
    for exp in state.experiments:
        if exp.outcome.ok and (not trace or exp.seconds < trace[-1][1]):
            trace.append((exp.number, exp.seconds))
    return trace


# log records

def _header(params: SearchParams, evaluator) -> dict:
    return {"record": "header", "tool": "mctree", "version": __version__,
            "evaluator": evaluator.kind, "fingerprint": evaluator.fingerprint(),
            "tile_sizes": list(params.tile_sizes), "parallelize": params.parallelize}


def _experiment_record(exp: Experiment, state: SearchState) -> dict:
    rec = {"record": "experiment", "number": exp.number, "parent": exp.parent_number,
           "nest": exp.nest, "child": exp.child_index,
           "pragma": render_pragma(exp.transformation) if exp.transformation is not None else None,
           "status": exp.outcome.status.value, "seconds": exp.seconds}
    if exp.number == 0:
        rec["loopnests"] = loopnests_to_data(state.baselines)
    return rec


def _dumps(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


class LogWriter:
    def __init__(self, path):
        self.path = Path(path)

    def append(self, rec: dict):
        with open(self.path, "a", newline="\n") as f:
            f.write(_dumps(rec) + "\n")


def save_log(state: SearchState, path, evaluator) -> None:
    """Write the complete log of ``state`` (as an interrupted run would have left it)."""
    lines = [_dumps(_header(state.params, evaluator))]
    for kind, number in state.events:
        if kind == "expand":
            lines.append(_dumps({"record": "expand", "number": number}))
        else:
            lines.append(_dumps(_experiment_record(state.experiments[number], state)))
    Path(path).write_text("".join(l + "\n" for l in lines))


def read_log(path) -> list[dict]:
    """Records of a log; a truncated last line is cut off the file."""
    path = Path(path)
    data = path.read_bytes()
    end = data.rfind(b"\n") + 1
    records = []
    for lineno, line in enumerate(data[:end].splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ResumeError(f"{path}:{lineno}: corrupt record: {e}") from None
    if end < len(data):
        log.warning("dropping truncated last record of %s", path)
        with open(path, "r+b") as f:
            f.truncate(end)
    return records


def _outcome_from(rec: dict) -> Outcome:
    return Outcome(Status(rec["status"]), rec.get("seconds"))


def replay_records(records: list[dict], params: Optional[SearchParams] = None,
                   evaluator=None) -> SearchState:
    """Rebuild the search state from log records.

    With ``params``/``evaluator`` given, the log must have been produced with
    the same settings.
    """
    if not records or records[0].get("record") != "header":
        raise ResumeError("log has no header")
    header = records[0]
    logged = SearchParams(tuple(header["tile_sizes"]), header["parallelize"])
    if params is not None and params != logged:
        raise ResumeError(f"log was written with tile sizes {list(logged.tile_sizes)} and "
                          f"parallelize={logged.parallelize}; refusing to resume with different settings")
    if evaluator is not None:
        if header.get("evaluator") != evaluator.kind or header.get("fingerprint") != evaluator.fingerprint():
            raise ResumeError("log was written for a different program or cost model")

    body = records[1:]
    if not body or body[0].get("record") != "experiment" or body[0].get("number") != 0:
        raise ResumeError("log has no baseline experiment")

    state = SearchState(params=logged)
    state.baselines = loopnests_from_data(body[0]["loopnests"])
    baseline = Experiment(0, baseline_configs(state.baselines), _outcome_from(body[0]))
    state.record(baseline)

    for rec in body[1:]:
        kind = rec.get("record")
        if kind == "expand":
            _begin_expansion(state, rec["number"])
        elif kind == "experiment":
            if state.expanding is None or state.next_child >= len(state.pending):
                raise ResumeError(f"experiment {rec.get('number')} has no parent being expanded")
            if rec["number"] != len(state.experiments) or rec["parent"] != state.expanding:
                raise ResumeError(f"experiment {rec.get('number')} is out of order")
            nest, configs = state.pending[state.next_child]
            exp = Experiment(rec["number"], configs, _outcome_from(rec), parent_number=state.expanding,
                             child_index=state.next_child, nest=nest)
            if rec.get("pragma") != render_pragma(exp.transformation):
                raise ResumeError(f"experiment {exp.number}: logged {rec.get('pragma')!r} "
                                  f"but derivation gives {render_pragma(exp.transformation)!r}")
            state.next_child += 1
            state.record(exp)
        else:
            raise ResumeError(f"unknown record type {kind!r}")
    return state


def _begin_expansion(state: SearchState, expected: Optional[int] = None) -> Optional[int]:
    number = state.strategy.select()
    if number is None:
        if expected is not None:
            raise ResumeError(f"log expands {expected} but nothing is left to expand")
        return None
    if expected is not None and number != expected:
        raise ResumeError(f"log expands {expected} but the search would expand {number}")
    parent = state.experiments[number]
    parent.expanded = True
    state.expansions.append(number)
    state.events.append(("expand", number))
    state.expanding = number
    state.pending = child_configs(parent.configs, state.params)
    state.next_child = 0
    return number


def resume_log(path, evaluator, params: SearchParams) -> SearchState:
    state = replay_records(read_log(path), params, evaluator)
    evaluator.adopt(state.baselines, state.experiments[0].outcome)
    return state


class Tuner:
    """Runs (or continues) a search, appending every step to an optional log."""

    def __init__(self, evaluator, params: SearchParams, log_path=None, state: Optional[SearchState] = None,
                 on_experiment=None):
        self.evaluator = evaluator
        self.params = params
        self.writer = LogWriter(log_path) if log_path else None
        self.state = state
        self.on_experiment = on_experiment
        self.stop_event = threading.Event()

    @classmethod
    def resume(cls, evaluator, params: SearchParams, log_path, **kwargs) -> Tuner:
        state = resume_log(log_path, evaluator, params)
        return cls(evaluator, params, log_path=log_path, state=state, **kwargs)

    def _emit(self, rec):
        if self.writer:
            self.writer.append(rec)

    def start(self) -> SearchState:
        if self.state is not None:
            return self.state
        if self.writer:
            self.writer.path.write_text("")
        self._emit(_header(self.params, self.evaluator))
        nests, outcome = self.evaluator.baseline()
        if not outcome.ok:
            raise BaselineFailed(outcome)
        if not nests:
            raise SearchError("the program has no loop nests to tune")
        state = SearchState(params=self.params, baselines=list(nests))
        exp = Experiment(0, baseline_configs(state.baselines), outcome)
        state.record(exp)
        self.state = state
        self._emit(_experiment_record(exp, state))
        self._notify(exp)
        return state

    def _notify(self, exp):
        log.info("experiment %d: %s", exp.number, exp.outcome.describe())
        if self.on_experiment:
            self.on_experiment(exp)

    def run(self, max_experiments: Optional[int] = None, wall_clock: Optional[float] = None) -> SearchState:
        started = time.monotonic()
        state = self.start()

        def exhausted():
            if self.stop_event.is_set():
                return True
            if max_experiments is not None and len(state.experiments) >= max_experiments:
                return True
            return wall_clock is not None and time.monotonic() - started >= wall_clock

        while True:
            if state.expanding is not None and state.next_child < len(state.pending):
                if exhausted():
                    break
                self._evaluate_next(state)
                continue
            if exhausted():
                break
            number = _begin_expansion(state)
            if number is None:
                state.expanding = None
                break
            self._emit({"record": "expand", "number": number})
        return state

    def _evaluate_next(self, state: SearchState):
        nest, configs = state.pending[state.next_child]
        number = len(state.experiments)
        outcome = self.evaluator.evaluate(configs, number)
        exp = Experiment(number, configs, outcome, parent_number=state.expanding,
                         child_index=state.next_child, nest=nest)
        state.next_child += 1
        state.record(exp)
        self._emit(_experiment_record(exp, state))
        self._notify(exp)


def run(evaluator, tile_sizes, enable_parallel: bool = True, max_experiments: Optional[int] = None,
        wall_clock: Optional[float] = None, log_path=None) -> SearchState:
    tuner = Tuner(evaluator, SearchParams(tuple(tile_sizes), enable_parallel), log_path=log_path)
    return tuner.run(max_experiments=max_experiments, wall_clock=wall_clock)
