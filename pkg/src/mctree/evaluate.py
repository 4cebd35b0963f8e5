"""Measure configurations: compile and time the program, or score it with a cost model."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
import re
import shutil
import signal
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .loopmodel import LoopNest, dump_loopnests, max_auto_id, parse_loopnests
from .rewrite import RewritePlan, apply_plan, plan_rewrite, render_pragma, rewritten_path, write_rewritten
from .transforms import Configuration, Tile

SOURCE_SUFFIXES = {".c", ".cc", ".cpp", ".cxx", ".c++", ".C"}
LOOPNEST_FLAG = "-polly-output-loopnest"
DERIVED_FLAGS = ["-fopenmp", "-Werror=pass-failed"]
EXCERPT_CHARS = 2000

# at most one timed run on the machine at a time
_timing_lock = threading.Lock()


class Status(enum.Enum):
    OK = "ok"
    COMPILE_FAILED = "compile_failed"
    RUN_FAILED = "run_failed"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Outcome:
    status: Status
    seconds: Optional[float] = None
    log_excerpt: str = ""

    def __post_init__(self):
        if (self.status is Status.OK) != (self.seconds is not None):
            raise ValueError("seconds are recorded exactly for successful runs")
        if self.seconds is not None and not self.seconds > 0:
            raise ValueError(f"measured time must be positive, got {self.seconds}")

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    @classmethod
    def success(cls, seconds: float, log_excerpt: str = ""):
        return cls(Status.OK, seconds, log_excerpt)

    def describe(self) -> str:
        if self.ok:
            return f"{self.seconds:.6g}s"
        return self.status.value.replace("_", " ")


class InfrastructureError(RuntimeError):
    """The tool itself could not run a command (missing executable, bad permissions)."""


class ConfigurationError(RuntimeError):
    pass


def _excerpt(text: str) -> str:
    if len(text) <= EXCERPT_CHARS:
        return text
    return "..." + text[-EXCERPT_CHARS:]


@dataclass(frozen=True)
class RunResult:
    returncode: Optional[int]
    seconds: float
    output: str

    @property
    def timed_out(self) -> bool:
        return self.returncode is None


def run_command(cmd, timeout: Optional[float] = None, cwd=None) -> RunResult:
    """Run ``cmd`` in its own process group; on timeout the whole group is killed."""
    start = time.perf_counter()
    try:
        proc = subprocess.Popen([str(c) for c in cmd], cwd=cwd, stdout=subprocess.PIPE,
                                stderr=subprocess.STDOUT, start_new_session=True)
    except (FileNotFoundError, PermissionError, NotADirectoryError) as e:
        raise InfrastructureError(f"cannot execute {cmd[0]}: {e}") from e
    try:
        out, _ = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        _kill_group(proc)
        out, _ = proc.communicate()
        return RunResult(None, time.perf_counter() - start, out.decode(errors="replace"))
    elapsed = time.perf_counter() - start
    return RunResult(proc.returncode, elapsed, out.decode(errors="replace"))


def _kill_group(proc):
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass
    proc.wait()


@dataclass
class EvalRequest:
    compiler_cmdline: list
    extra_flags: list = field(default_factory=list)
    timeout: Optional[float] = None
    repeats: int = 1
    run_args: list = field(default_factory=list)
    loopnest_flag: str = LOOPNEST_FLAG
    cwd: Optional[Path] = None

    def __post_init__(self):
        self.compiler_cmdline = [str(a) for a in self.compiler_cmdline]
        if len(self.compiler_cmdline) < 2:
            raise ValueError("the compiler command line needs a compiler and a source file")
        if "-c" in self.compiler_cmdline:
            raise ValueError("the compiler command line must link an executable; remove -c")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        sources = [i for i, a in enumerate(self.compiler_cmdline[1:], 1)
                   if Path(a).suffix in SOURCE_SUFFIXES and not a.startswith("-")]
        if len(sources) != 1:
            raise ValueError(f"expected exactly one source file on the command line, found {len(sources)}")
        self._source_index = sources[0]

    @property
    def source(self) -> Path:
        path = Path(self.compiler_cmdline[self._source_index])
        return path if path.is_absolute() or self.cwd is None else Path(self.cwd) / path

    @property
    def output(self) -> Optional[str]:
        args = self.compiler_cmdline
        for i, a in enumerate(args):
            if a == "-o" and i + 1 < len(args):
                return args[i + 1]
            if a.startswith("-o") and len(a) > 2:
                return a[2:]
        return None

    def command(self, source: Optional[Path] = None, exe: Optional[Path] = None, extra=()) -> list[str]:
        """The user's command line with the source and output swapped and ``extra`` flags appended."""
        args = list(self.compiler_cmdline)
        if source is not None:
            args[self._source_index] = str(source)
        if exe is not None:
            replaced = False
            for i, a in enumerate(args):
                if a == "-o" and i + 1 < len(args):
                    args[i + 1] = str(exe)
                    replaced = True
                    break
                if a.startswith("-o") and len(a) > 2:
                    args[i] = "-o" + str(exe)
                    replaced = True
                    break
            if not replaced:
                args += ["-o", str(exe)]
        return args + list(extra) + list(self.extra_flags)

    def fingerprint(self) -> str:
        payload = json.dumps({"cmdline": self.compiler_cmdline, "extra": self.extra_flags,
                              "run_args": self.run_args, "repeats": self.repeats})
        return hashlib.sha256(payload.encode()).hexdigest()


def default_timeout(baseline_seconds: float, factor: float = 10.0) -> float:
    return max(factor * baseline_seconds, baseline_seconds + 5.0)


def _time_executable(req: EvalRequest, exe: Path, log: list) -> Outcome:
    best = math.inf
    for _ in range(req.repeats):
        with _timing_lock:
            res = run_command([exe, *req.run_args], timeout=req.timeout, cwd=req.cwd)
        log.append(res.output)
        if res.timed_out:
            return Outcome(Status.TIMEOUT, log_excerpt=_excerpt("".join(log)))
        if res.returncode != 0:
            return Outcome(Status.RUN_FAILED, log_excerpt=_excerpt("".join(log)))
        best = min(best, res.seconds)
    return Outcome.success(max(best, 1e-9), _excerpt("".join(log)))


def _compile(cmd, req: EvalRequest, log: list) -> Optional[Outcome]:
    res = run_command(cmd, timeout=req.timeout, cwd=req.cwd)
    log.append(res.output)
    if res.timed_out:
        return Outcome(Status.TIMEOUT, log_excerpt=_excerpt("".join(log)))
    if res.returncode != 0:
        return Outcome(Status.COMPILE_FAILED, log_excerpt=_excerpt("".join(log)))
    return None


def evaluate_baseline(req: EvalRequest, workdir: Path) -> tuple[Optional[str], Outcome]:
    """Experiment 0: compile with loop-nest output and debug info, then time the program."""
    workdir = Path(workdir).resolve() / "base"
    workdir.mkdir(parents=True, exist_ok=True)
    exe = workdir / (Path(req.output or "a.out").name)
    json_path = workdir / "loopnests.json"
    if json_path.exists():
        json_path.unlink()
    cmd = req.command(exe=exe, extra=["-mllvm", f"{req.loopnest_flag}={json_path}", "-g"])
    log: list = []
    failed = _compile(cmd, req, log)
    if failed:
        return None, failed
    if not json_path.is_file():
        raise ConfigurationError(f"the compiler did not write {json_path}; does it support {req.loopnest_flag}?")
    return json_path.read_text(), _time_executable(req, exe, log)


def evaluate_config(req: EvalRequest, rewritten: Path) -> Outcome:
    """Compile the rewritten source in place of the original and time the program."""
    rewritten = Path(rewritten).resolve()
    if not rewritten.is_file():
        raise FileNotFoundError(rewritten)
    exe = rewritten.parent / (Path(req.output or "a.out").name)
    cmd = req.command(source=rewritten, exe=exe, extra=DERIVED_FLAGS)
    log: list = []
    failed = _compile(cmd, req, log)
    if failed:
        return failed
    return _time_executable(req, exe, log)


# Synthetic evaluation

@dataclass(frozen=True)
class CostModel:
    """Deterministic stand-in for compiler and machine.

    time = base_time / speedup[level of outermost parallel loop] * tile factor
           * transform_overhead ** (transformations - 1) * noise

    The tile factor rates the first tiling of each source loop (in preorder)
    against ``preferred_tile`` by summed log2 distance; an untiled loop counts as
    ``untiled_distance``. Configurations without any tiling have factor 1.
    """
    base_time: float = 1.0
    parallel_speedup: tuple = (1.0,)
    preferred_tile: Optional[tuple] = None
    best_tile_factor: float = 0.5
    worst_tile_factor: float = 1.5
    tile_width: float = 4.0
    untiled_distance: float = 4.0
    transform_overhead: float = 1.0
    illegal: tuple = ()
    crashing: tuple = ()
    noise: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if not self.base_time > 0:
            raise ValueError("base_time must be positive")
        if not self.parallel_speedup or any(not s > 0 for s in self.parallel_speedup):
            raise ValueError("parallel speedups must be positive")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must be in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> CostModel:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known - {"loopnests"}
        if unknown:
            raise ValueError(f"unknown cost model fields: {', '.join(sorted(unknown))}")
        kwargs = {k: v for k, v in data.items() if k in known}
        for key in ("parallel_speedup", "preferred_tile", "illegal", "crashing"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def speedup(self, level: Optional[int]) -> float:
        if level is None:
            return 1.0
        return self.parallel_speedup[min(level, len(self.parallel_speedup) - 1)]

    def tile_factor(self, baseline: LoopNest, transformations) -> float:
        tiles = [t for t in transformations if isinstance(t, Tile)]
        if not tiles or self.preferred_tile is None:
            return 1.0
        dims = [l.id for l in baseline.loops()][:len(self.preferred_tile)]
        distance = 0.0
        for loop_id, preferred in zip(dims, self.preferred_tile):
            size = next((t.sizes[t.applied_ids.index(loop_id)] for t in tiles if loop_id in t.applied_ids), None)
            if size is None:
                distance += self.untiled_distance
            else:
                distance += abs(math.log2(size) - math.log2(preferred))
        spread = self.worst_tile_factor - self.best_tile_factor
        return self.best_tile_factor + spread * (1.0 - math.exp(-distance / self.tile_width))

    def noise_factor(self, pragmas) -> float:
        if not self.noise:
            return 1.0
        digest = hashlib.sha256(json.dumps([self.noise_seed, list(pragmas)]).encode()).digest()
        u = int.from_bytes(digest[:8], "big") / 2 ** 64
        return 1.0 + self.noise * (2.0 * u - 1.0)


def parallel_level(nest: LoopNest) -> Optional[int]:
    levels = [nest.depth_of(l.id) for l in nest.loops() if l.parallelized]
    return min(levels) if levels else None


def _baseline_of(config: Configuration) -> LoopNest:
    while config.parent is not None:
        config = config.parent
    if config.transformations:
        raise ValueError("configuration has no baseline ancestor; pass the baseline nest")
    return config.result


def synthetic_evaluate(model: CostModel, config: Configuration, baseline: Optional[LoopNest] = None) -> Outcome:
    return synthetic_evaluate_many(model, [config], [baseline or _baseline_of(config)])


def synthetic_evaluate_many(model: CostModel, configs, baselines) -> Outcome:
    pragmas = [render_pragma(t) for c in configs for t in c.transformations]
    for pattern in model.illegal:
        for p in pragmas:
            if re.search(pattern, p):
                return Outcome(Status.COMPILE_FAILED, log_excerpt=f"error: transformation rejected: {p}")
    for pattern in model.crashing:
        for p in pragmas:
            if re.search(pattern, p):
                return Outcome(Status.RUN_FAILED, log_excerpt=f"program crashed with {p}")
    seconds = model.base_time
    for config, baseline in zip(configs, baselines):
        seconds /= model.speedup(parallel_level(config.result))
        seconds *= model.tile_factor(baseline, config.transformations)
    if pragmas:
        seconds *= model.transform_overhead ** (len(pragmas) - 1)
    seconds *= model.noise_factor(pragmas)
    return Outcome.success(seconds)


# Evaluators driven by the search

class SyntheticEvaluator:
    kind = "synthetic"

    def __init__(self, model: CostModel, nests):
        self.model = model
        self.nests = list(nests)

    def fingerprint(self) -> str:
        payload = self.model.fingerprint() + dump_loopnests(self.nests)
        return hashlib.sha256(payload.encode()).hexdigest()

    def baseline(self):
        return self.nests, synthetic_evaluate_many(self.model, [Configuration.baseline(n) for n in self.nests], self.nests)

    def evaluate(self, configs, number: int) -> Outcome:
        return synthetic_evaluate_many(self.model, configs, self.nests)

    def adopt(self, nests, baseline_outcome: Outcome):
        self.nests = list(nests)

    def write_source(self, configs, path: Path):
        return None


class CompilerEvaluator:
    kind = "compiler"

    def __init__(self, request: EvalRequest, workdir: Path, keep_files: bool = False,
                 timeout_factor: float = 10.0):
        self.request = request
        self.workdir = Path(workdir)
        self.keep_files = keep_files
        self.timeout_factor = timeout_factor
        self.nests: list[LoopNest] = []

    def fingerprint(self) -> str:
        return self.request.fingerprint()

    def baseline(self):
        json_text, outcome = evaluate_baseline(self.request, self.workdir)
        if json_text is None:
            return None, outcome
        self.adopt(parse_loopnests(json_text), outcome)
        return self.nests, outcome

    def adopt(self, nests, baseline_outcome: Outcome):
        self.nests = list(nests)
        if self.request.timeout is None and baseline_outcome.ok:
            self.request.timeout = default_timeout(baseline_outcome.seconds, self.timeout_factor)

    def plan(self, configs, output_path: Path) -> RewritePlan:
        src = self.request.source
        return plan_rewrite(list(zip(self.nests, configs)), source_file=str(src), output_path=output_path)

    def write_source(self, configs, path: Path) -> Path:
        plan = self.plan(configs, path)
        with open(self.request.source, newline="") as f:
            text = apply_plan(f.read(), plan)
        return write_rewritten(plan, text)

    def evaluate(self, configs, number: int) -> Outcome:
        path = rewritten_path(self.workdir, self.request.source, number if self.keep_files else None)
        self.write_source(configs, path)
        try:
            return evaluate_config(self.request, path)
        finally:
            if not self.keep_files:
                shutil.rmtree(path.parent, ignore_errors=True)


def initial_fresh_counter(nests) -> int:
    return max_auto_id(nests)
