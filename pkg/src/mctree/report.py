"""Export a search as a Graphviz digraph or as a CSV progress table."""

from __future__ import annotations

import csv
import io

from .evaluate import Status
from .search import SearchState, best_so_far_trace

OK_COLOR = "green"
FAILED_COLOR = "red"
BASELINE_COLOR = "blue"


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def node_color(exp) -> str:
    if exp.number == 0:
        return BASELINE_COLOR
    return OK_COLOR if exp.outcome.ok else FAILED_COLOR


def node_label(exp) -> str:
    lines = [f"Experiment {exp.number}"]
    lines += exp.pragmas()
    lines.append(exp.outcome.describe())
    # \l left-justifies each line
    return "".join(_escape(line) + "\\l" for line in lines)


def export_dot(state: SearchState) -> str:
    out = ["digraph mctree {", "  rankdir=LR;",
           '  node [shape=box, style="rounded,filled", fontname="monospace"];']
    for exp in state.experiments:
        color = node_color(exp)
        out.append(f'  exp{exp.number} [label="{node_label(exp)}", color={color}, fillcolor="{_fill(color)}"];')
    for exp in state.experiments:
        if exp.parent_number is not None:
            out.append(f"  exp{exp.parent_number} -> exp{exp.number};")
    out.append("}")
    return "\n".join(out) + "\n"


def _fill(color: str) -> str:
    return {OK_COLOR: "palegreen", FAILED_COLOR: "lightpink", BASELINE_COLOR: "lightblue"}[color]


def export_progress_csv(state: SearchState) -> str:
    new_best = {number for number, _ in best_so_far_trace(state)}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["experiment", "seconds", "status", "is_new_best"])
    for exp in state.experiments:
        seconds = repr(exp.seconds) if exp.outcome.status is Status.OK else ""
        writer.writerow([exp.number, seconds, exp.outcome.status.value,
                         "true" if exp.number in new_best else "false"])
    return buf.getvalue()
