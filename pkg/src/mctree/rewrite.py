"""Insert loop-transformation pragmas into a source file.

Every source loop of a tuned nest gets ``#pragma clang loop id(<id>)`` on the
line above it. The configuration's transformation pragmas go, in application
order, above the nest's first loop, followed by one empty line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .loopmodel import LoopNest
from .transforms import Configuration, Interchange, ParallelizeThread, Tile, Transformation


class RewriteError(ValueError):
    pass


def _ids(ids) -> str:
    return ",".join(str(i) for i in ids)


def render_pragma(t: Transformation) -> str:
    if isinstance(t, Tile):
        return (f"#pragma clang loop({_ids(t.applied_ids)}) tile sizes({_ids(t.sizes)}) "
                f"floor_ids({_ids(t.floor_ids)}) tile_ids({_ids(t.tile_ids)})")
    if isinstance(t, Interchange):
        return f"#pragma clang loop({_ids(t.applied_ids)}) interchange permutation({_ids(t.permutation)})"
    if isinstance(t, ParallelizeThread):
        return f"#pragma clang loop({t.applied_id}) parallelize_thread"
    raise TypeError(f"not a transformation: {t!r}")


def render_short(t: Transformation) -> str:
    """Pragma without the generated-id clauses, as a reader would write it."""
    if isinstance(t, Tile):
        return f"#pragma clang loop({_ids(t.applied_ids)}) tile sizes({_ids(t.sizes)})"
    return render_pragma(t)


@dataclass(frozen=True)
class Insertion:
    line: int
    column: int
    text: str


@dataclass(frozen=True)
class RewritePlan:
    source_file: Optional[str]
    insertions: tuple[Insertion, ...]
    output_path: Optional[Path] = None


def _same_file(loc_file: str, source_file: Optional[str]) -> bool:
    if source_file is None:
        return True
    if os.path.basename(loc_file) != os.path.basename(source_file):
        return False
    a, b = Path(loc_file), Path(source_file)
    if a.is_absolute() and b.is_absolute():
        return a.resolve() == b.resolve()
    return True


def plan_rewrite(nests_and_configs, source_file: Optional[str] = None,
                 output_path: Optional[Path] = None) -> RewritePlan:
    """Collect the pragma insertions for baseline nests paired with their configurations.

    ``source_file`` restricts the rewrite to loops located in that file.
    """
    insertions = []
    positions = set()
    for nest, config in nests_and_configs:
        loops = [l for l in nest.source_loops() if _same_file(l.location.file, source_file)]
        if not loops:
            continue
        for loop in loops:
            pos = (loop.location.line, loop.location.column)
            if pos in positions:
                raise RewriteError(f"two loops start at line {pos[0]}, column {pos[1]}")
            positions.add(pos)
        first = min(loops, key=lambda l: (l.location.line, l.location.column))
        block = [render_pragma(t) for t in (config.transformations if config else ())]
        if block:
            block.append("")
        for loop in loops:
            lines = block if loop is first else []
            lines = lines + [f"#pragma clang loop id({loop.id})"]
            for text in lines:
                insertions.append(Insertion(loop.location.line, loop.location.column, text))
    # stable: keeps block order for insertions sharing a position
    insertions.sort(key=lambda ins: (ins.line, ins.column))
    return RewritePlan(source_file=source_file, insertions=tuple(insertions), output_path=output_path)


def _line_ending(line: str, fallback: str) -> str:
    if line.endswith("\r\n"):
        return "\r\n"
    if line.endswith("\n") or line.endswith("\r"):
        return line[-1]
    return fallback


def apply_plan(source_text: str, plan: RewritePlan) -> str:
    lines = source_text.splitlines(keepends=True)
    fallback = _line_ending(lines[0], "\n") if lines else "\n"
    by_line: dict[int, list[Insertion]] = {}
    for ins in plan.insertions:
        if not 1 <= ins.line <= len(lines):
            raise RewriteError(f"line {ins.line} is outside the source ({len(lines)} lines)")
        by_line.setdefault(ins.line, []).append(ins)

    out = []
    for lineno, line in enumerate(lines, start=1):
        pending = by_line.get(lineno)
        if not pending:
            out.append(line)
            continue
        eol = _line_ending(line, fallback)
        indent = line[:len(line) - len(line.lstrip(" \t"))]
        groups: dict[int, list[str]] = {}
        for ins in pending:
            groups.setdefault(ins.column, []).append(ins.text)
        start = 0
        for col in sorted(groups):
            cut = col - 1
            if cut > len(line.rstrip("\r\n")):
                raise RewriteError(f"column {col} is outside line {lineno}")
            # code before the loop on the same line: break the line at the loop
            if cut > max(start, len(indent)):
                out.append(line[start:cut] + eol)
                start = cut
            for text in groups[col]:
                out.append((indent + text if text else "") + eol)
        out.append(line[start:])
    return "".join(out)


def rewrite_source(source_text: str, nest: LoopNest, config: Optional[Configuration],
                   source_file: Optional[str] = None) -> str:
    plan = plan_rewrite([(nest, config)], source_file=source_file)
    return apply_plan(source_text, plan)


def rewrite_source_multi(source_text: str, nests, configs, source_file: Optional[str] = None) -> str:
    plan = plan_rewrite(list(zip(nests, configs)), source_file=source_file)
    return apply_plan(source_text, plan)


def rewritten_path(outdir: Path, original: Path, experiment: Optional[int] = None) -> Path:
    base = Path(outdir) / "rewritten"
    if experiment is not None:
        base = base / f"exp{experiment}"
    return base / Path(original).name


def write_rewritten(plan: RewritePlan, text: str) -> Path:
    path = Path(plan.output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # newline="" keeps the source's line endings
    with open(path, "w", newline="") as f:
        f.write(text)
    return path
