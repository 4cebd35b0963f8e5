"""Command line: ``mctree autotune|expand|export-dot|export-csv|replay|serve``.

Exit codes: 0 success, 1 usage, 2 baseline failure, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import DEFAULT_TILE_SIZES, __version__
from .evaluate import ConfigurationError, InfrastructureError
from .jobs import expand, make_evaluator
from .loopmodel import LoopNestParseError, LoopNestValidationError, parse_loopnests, loopnests_to_data
from .report import export_dot, export_progress_csv
from .rewrite import rewrite_source_multi
from .schemas import ExpandRequest, RunRequest
from .search import (BaselineFailed, ResumeError, SearchParams, Tuner, best_so_far_trace, read_log,
                     replay_records)

EXIT_OK, EXIT_USAGE, EXIT_BASELINE, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("mctree")


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def tile_sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text}")
    if not sizes or min(sizes) < 2:
        raise argparse.ArgumentTypeError("tile sizes must be integers of at least 2")
    return sizes


def add_search_options(p):
    p.add_argument("--tile-sizes", type=tile_sizes, default=list(DEFAULT_TILE_SIZES),
                   help="comma-separated tile sizes (default: 4,16,64,256,1024)")
    p.add_argument("--parallelize", action=argparse.BooleanOptionalAction, default=True,
                   help="derive thread-parallelization children")
    p.add_argument("--server", help="send the request to a running 'mctree serve' at this URL")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="mctree", description="Loop transformation autotuner")
    parser.add_argument("--version", action="version", version=f"mctree {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)

    p = sub.add_parser("autotune", help="search for the fastest transformation sequence",
                       usage="mctree autotune [options] -- <compiler command line>")
    add_search_options(p)
    p.add_argument("--synthetic", type=Path, help="cost model JSON; replaces compiling and timing")
    p.add_argument("--loopnests", type=Path, help="loop nests for --synthetic (if not in the model file)")
    p.add_argument("--source", type=Path, help="with --synthetic: source file to rewrite with the best result")
    p.add_argument("--max-experiments", type=int)
    p.add_argument("--wall-clock-budget", type=float, metavar="SECONDS")
    p.add_argument("--timeout", type=float, metavar="SECONDS",
                   help="per compile and per run (default: max(factor * baseline, baseline + 5s))")
    p.add_argument("--timeout-factor", type=float, default=10.0)
    p.add_argument("--repeats", type=int, default=1, help="runs per measurement; the minimum counts")
    p.add_argument("--log", type=Path, help="experiment log (default: OUTDIR/log.jsonl)")
    p.add_argument("--outdir", type=Path, default=Path("mctree-out"))
    p.add_argument("--keep-files", action="store_true", help="keep rewritten/exp<N>/ sources and binaries")
    p.add_argument("--resume", action="store_true", help="continue the run recorded in the log")
    p.add_argument("ccline", nargs=argparse.REMAINDER, help=argparse.SUPPRESS)

    p = sub.add_parser("expand", help="list the children of a configuration without compiling")
    add_search_options(p)
    p.add_argument("--loopnests", type=Path, required=True)
    p.add_argument("--path", default="", help="comma-separated child indices to descend through first")

    for name, what in (("export-dot", "search tree as Graphviz DOT"), ("export-csv", "progress as CSV")):
        p = sub.add_parser(name, help=f"write the {what} from a log")
        p.add_argument("--log", type=Path, required=True)
        p.add_argument("-o", "--output", type=Path)

    p = sub.add_parser("replay", help="summarize a log without evaluating anything")
    p.add_argument("--log", type=Path, required=True)

    p = sub.add_parser("serve", help="run the HTTP tuning service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--data-dir", type=Path)
    return parser


def _emit(text: str, output):
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _load_log_state(path: Path):
    if not path.is_file():
        raise UsageError(f"no log at {path}")
    return replay_records(read_log(path))


def cmd_expand(args) -> int:
    try:
        path = [int(s) for s in args.path.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--path: not a list of integers: {args.path}")
    nests = parse_loopnests(args.loopnests.read_text())
    req = ExpandRequest(loopnests=loopnests_to_data(nests), tile_sizes=args.tile_sizes,
                        parallelize=args.parallelize, path=path)
    if args.server:
        from .client import Client
        resp = Client(args.server).expand(req)
    else:
        try:
            resp = expand(req)
        except IndexError as e:
            raise UsageError(str(e))
    for line in resp.pragmas:
        print(f"# applied: {line}")
    for child in resp.children:
        print(child.pragma)
    c = resp.counts
    print(f"{len(resp.children)} children: {c.tile} tile, {c.interchange} interchange, "
          f"{c.parallelize_thread} parallelize_thread", file=sys.stderr)
    return EXIT_OK


def _run_request(args) -> RunRequest:
    ccline = list(args.ccline)
    if ccline and ccline[0] == "--":
        ccline = ccline[1:]
    if args.synthetic and ccline:
        raise UsageError("give either --synthetic or a compiler command line, not both")
    if not args.synthetic and not ccline:
        raise UsageError("autotune needs a compiler command line after '--' (or --synthetic)")
    if "-c" in ccline:
        raise UsageError("the compiler command line must include linking; remove -c")
    if args.source and not args.synthetic:
        raise UsageError("--source only applies to --synthetic runs")
    kwargs = dict(tile_sizes=args.tile_sizes, parallelize=args.parallelize,
                  max_experiments=args.max_experiments, wall_clock_budget=args.wall_clock_budget,
                  timeout=args.timeout, timeout_factor=args.timeout_factor, repeats=args.repeats,
                  keep_files=args.keep_files)
    try:
        if args.synthetic:
            model = json.loads(args.synthetic.read_text())
            nests = None
            if args.loopnests:
                nests = loopnests_to_data(parse_loopnests(args.loopnests.read_text()))
            elif "loopnests" in model:
                nests = loopnests_to_data(parse_loopnests(json.dumps({"loopnests": model.pop("loopnests")})))
            return RunRequest(synthetic=model, loopnests=nests, **kwargs)
        return RunRequest(compiler_cmdline=ccline, cwd=str(Path.cwd()), **kwargs)
    except ValueError as e:
        raise UsageError(str(e))


def cmd_autotune(args) -> int:
    req = _run_request(args)
    if args.server:
        return _autotune_remote(args, req)

    outdir = args.outdir
    outdir.mkdir(parents=True, exist_ok=True)
    log_path = args.log or outdir / "log.jsonl"
    try:
        evaluator = make_evaluator(req, outdir)
    except ValueError as e:
        raise UsageError(str(e))
    params = SearchParams(tuple(req.tile_sizes), req.parallelize)

    def progress(exp):
        if exp.number == 0:
            print(f"Baseline: {exp.outcome.describe()}")
        elif exp.number == tuner.state.best:
            print(f"Experiment {exp.number}: new best {exp.outcome.describe()}")

    if args.resume:
        if not log_path.is_file():
            raise UsageError(f"--resume: no log at {log_path}")
        tuner = Tuner.resume(evaluator, params, log_path, on_experiment=progress)
    else:
        tuner = Tuner(evaluator, params, log_path=log_path, on_experiment=progress)

    try:
        state = tuner.run(max_experiments=req.max_experiments, wall_clock=req.wall_clock_budget)
    except KeyboardInterrupt:
        state = tuner.state
        print("Interrupted; resume with --resume", file=sys.stderr)
        if state is None:
            return EXIT_INTERNAL

    best = state.best_experiment
    print(f"Best: experiment {best.number} of {len(state.experiments)}, {best.outcome.describe()} "
          f"(baseline {state.experiments[0].outcome.describe()})")
    for line in best.pragmas() or ["(no transformations)"]:
        print(line)

    if evaluator.kind == "compiler":
        target = outdir / "best" / evaluator.request.source.name
        evaluator.write_source(best.configs, target)
        print(f"Wrote {target}")
    elif args.source:
        with open(args.source, newline="") as f:
            text = rewrite_source_multi(f.read(), state.baselines, best.configs)
        target = outdir / "best" / args.source.name
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", newline="") as f:
            f.write(text)
        print(f"Wrote {target}")
    return EXIT_OK


def _autotune_remote(args, req: RunRequest) -> int:
    from .client import Client
    client = Client(args.server)
    status = client.submit(req)
    print(f"Submitted {status.id}")
    try:
        status = client.wait(status.id)
    except KeyboardInterrupt:
        status = client.stop(status.id)
    if status.state == "failed":
        print(f"error: {status.error}", file=sys.stderr)
        return EXIT_BASELINE if status.experiments == 0 else EXIT_INTERNAL
    if status.baseline_seconds is not None:
        print(f"Baseline: {status.baseline_seconds:.6g}s")
    if status.best:
        print(f"Best: experiment {status.best.number} of {status.experiments}, {status.best.seconds:.6g}s")
        for line in status.best.pragmas or ["(no transformations)"]:
            print(line)
    return EXIT_OK


def cmd_export(args) -> int:
    state = _load_log_state(args.log)
    text = export_dot(state) if args.command == "export-dot" else export_progress_csv(state)
    _emit(text, args.output)
    return EXIT_OK


def cmd_replay(args) -> int:
    state = _load_log_state(args.log)
    failed = sum(1 for e in state.experiments if not e.outcome.ok)
    print(f"{len(state.experiments)} experiments, {failed} failed, {len(state.expansions)} expansions")
    print("New best:")
    for number, seconds in best_so_far_trace(state):
        print(f"  {number:6d}  {seconds:.6g}s")
    best = state.best_experiment
    print(f"Best: experiment {best.number}, {best.outcome.describe()}")
    for line in best.pragmas() or ["(no transformations)"]:
        print(line)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(args.data_dir), host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {"autotune": cmd_autotune, "expand": cmd_expand, "export-dot": cmd_export,
            "export-csv": cmd_export, "replay": cmd_replay, "serve": cmd_serve}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("mctree: choose a command: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (LoopNestParseError, LoopNestValidationError, ResumeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (BaselineFailed, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BASELINE
    except InfrastructureError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
