"""Loop-nest structure and the canonical loop-nest JSON format.

The compiler (or a hand-written file) describes every transformable loop nest
as JSON::

    {"loopnests": [{"function": "kernel",
                    "loops": [{"id": "i",
                               "location": {"file": "gemm.c", "line": 8, "column": 3},
                               "subloops": [...]}]}]}

``id`` is optional; unnamed loops are numbered ``loop1``, ``loop2``, ... in
preorder across the whole document.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, replace
from typing import Iterator, Optional


class LoopNestParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class LoopNestValidationError(ValueError):
    pass


class LoopLookupError(KeyError):
    def __str__(self):
        return f"no loop with id {self.args[0]!r}"


class Origin(enum.Enum):
    SOURCE = "source"
    TILED = "tiled"
    INTERCHANGED = "interchanged"


@dataclass(frozen=True, order=True)
class SourceLocation:
    file: str
    line: int
    column: int

    def __post_init__(self):
        if not self.file:
            raise LoopNestValidationError("source location needs a file name")
        if self.line < 1 or self.column < 1:
            raise LoopNestValidationError(
                f"line and column are 1-based, got {self.line}:{self.column}")

    def __str__(self):
        return f"{self.file}:{self.line}:{self.column}"


@dataclass(frozen=True)
class Loop:
    id: str
    location: Optional[SourceLocation] = None
    children: tuple[Loop, ...] = ()
    parallelized: bool = False
    origin: Origin = Origin.SOURCE

    def walk(self) -> Iterator[Loop]:
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class LoopNest:
    function: str
    roots: tuple[Loop, ...]

    def __post_init__(self):
        seen = set()
        for loop in self.loops():
            if loop.id in seen:
                raise LoopNestValidationError(f"duplicate loop id {loop.id!r} in {self.function}")
            seen.add(loop.id)

    def loops(self) -> Iterator[Loop]:
        """All loops in preorder."""
        for root in self.roots:
            yield from root.walk()

    def ids(self) -> list[str]:
        return [loop.id for loop in self.loops()]

    def source_loops(self) -> list[Loop]:
        return [loop for loop in self.loops() if loop.location is not None]

    def depth_of(self, loop_id: str) -> int:
        for depth, loop in _walk_depth(self.roots, 0):
            if loop.id == loop_id:
                return depth
        raise LoopLookupError(loop_id)

    def pretty(self) -> str:
        lines = []
        for depth, loop in _walk_depth(self.roots, 0):
            flags = " [parallel]" if loop.parallelized else ""
            loc = f"  /* {loop.location} */" if loop.location else ""
            lines.append("  " * depth + f"for {loop.id}{flags}{loc}")
        return "\n".join(lines)


@dataclass(frozen=True)
class PerfectSubNest:
    """Chain of loop ids, outermost first; every loop but the last has the next as its only child."""
    loops: tuple[str, ...]

    def __post_init__(self):
        if not self.loops:
            raise ValueError("a perfect sub-nest has at least one loop")

    def __len__(self):
        return len(self.loops)


def _walk_depth(loops, depth):
    for loop in loops:
        yield depth, loop
        yield from _walk_depth(loop.children, depth + 1)


def find_loop(nest: LoopNest, loop_id: str) -> Loop:
    for loop in nest.loops():
        if loop.id == loop_id:
            return loop
    raise LoopLookupError(loop_id)


def perfect_chain(loop: Loop) -> list[Loop]:
    """Longest perfect chain starting at ``loop``; stops before parallelized loops."""
    if loop.parallelized:
        return []
    chain = [loop]
    while len(chain[-1].children) == 1 and not chain[-1].children[0].parallelized:
        chain.append(chain[-1].children[0])
    return chain


def perfect_subnests(nest: LoopNest) -> list[PerfectSubNest]:
    result = []
    for loop in nest.loops():
        chain = [l.id for l in perfect_chain(loop)]
        for n in range(len(chain), 0, -1):
            result.append(PerfectSubNest(tuple(chain[:n])))
    return result


def is_perfect_subnest(nest: LoopNest, ids) -> bool:
    ids = list(ids)
    if not ids:
        return False
    try:
        head = find_loop(nest, ids[0])
    except LoopLookupError:
        return False
    chain = [l.id for l in perfect_chain(head)]
    return chain[:len(ids)] == ids


_AUTO_ID = re.compile(r"loop(\d+)$")


def max_auto_id(nests) -> int:
    """Largest N among ids of the form ``loopN`` (0 if none)."""
    best = 0
    for nest in nests:
        for loop_id in nest.ids():
            if m := _AUTO_ID.match(loop_id):
                best = max(best, int(m.group(1)))
    return best


# JSON reading and writing

def parse_loopnests(json_text: str) -> list[LoopNest]:
    try:
        data = json.loads(json_text)
    except json.JSONDecodeError as e:
        offset = len(json_text[:e.pos].encode("utf-8"))
        raise LoopNestParseError(e.msg, offset) from e
    if isinstance(data, dict) and "scops" in data and "loopnests" not in data:
        data = adapt_polly_json(data)
    return loopnests_from_data(data)


def loopnests_from_data(data) -> list[LoopNest]:
    if not isinstance(data, dict) or not isinstance(data.get("loopnests"), list):
        raise LoopNestValidationError('expected an object with a "loopnests" list')

    explicit = set()

    def collect(entries, where):
        if not isinstance(entries, list):
            raise LoopNestValidationError(f"{where}: expected a list of loops")
        for n, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise LoopNestValidationError(f"{where}[{n}]: expected a loop object")
            if "id" in entry:
                if not isinstance(entry["id"], str) or not entry["id"]:
                    raise LoopNestValidationError(f"{where}[{n}]: loop id must be a nonempty string")
                if entry["id"] in explicit:
                    raise LoopNestValidationError(f"duplicate loop id {entry['id']!r}")
                explicit.add(entry["id"])
            collect(entry.get("subloops", []), f"{where}[{n}].subloops")

    for n, fn in enumerate(data["loopnests"]):
        if not isinstance(fn, dict):
            raise LoopNestValidationError(f"loopnests[{n}]: expected an object")
        collect(fn.get("loops", []), f"loopnests[{n}].loops")

    counter = 0

    def fresh():
        nonlocal counter
        while True:
            counter += 1
            name = f"loop{counter}"
            if name not in explicit:
                return name

    def build(entry, seen_positions, where):
        name = entry.get("id")
        label = repr(name) if name else where
        loc = entry.get("location")
        if not isinstance(loc, dict):
            raise LoopNestValidationError(f"loop {label}: missing location")
        try:
            location = SourceLocation(str(loc["file"]), int(loc["line"]), int(loc["column"]))
        except KeyError as e:
            raise LoopNestValidationError(f"loop {label}: location lacks {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            raise LoopNestValidationError(f"loop {label}: bad location: {e}") from None
        if location in seen_positions:
            raise LoopNestValidationError(
                f"loop {label}: another loop already starts at {location}")
        seen_positions.add(location)
        # ids are assigned in preorder, so name this loop before its subloops
        name = name or fresh()
        children = tuple(build(sub, seen_positions, f"{where}.subloops[{n}]")
                         for n, sub in _in_position_order(entry.get("subloops", [])))
        return Loop(id=name, location=location, children=children)

    result = []
    positions = set()
    for fn_index, fn in enumerate(data["loopnests"]):
        function = fn.get("function", "")
        if not isinstance(function, str):
            raise LoopNestValidationError("function name must be a string")
        roots = tuple(build(entry, positions, f"loopnests[{fn_index}].loops[{n}]")
                      for n, entry in _in_position_order(fn.get("loops", [])))
        result.append(LoopNest(function=function, roots=roots))
    return result


def _in_position_order(entries):
    # (document index, entry) sorted by source position
    return sorted(enumerate(entries), key=lambda item: _entry_position(item[1]))


def _entry_position(entry):
    loc = entry.get("location")
    if not isinstance(loc, dict):
        return ("", 0, 0)
    try:
        return (str(loc.get("file", "")), int(loc.get("line", 0)), int(loc.get("column", 0)))
    except (TypeError, ValueError):
        return ("", 0, 0)


def adapt_polly_json(data) -> dict:
    """Convert the ``{"scops": [{"children": [...]}]}`` layout to the canonical one.

    Loop entries there carry ``kind``, ``path``, ``line``, ``column``, ``function``
    and ``children``; statement entries are dropped.
    """
    def convert(children):
        loops = []
        for node in children:
            if node.get("kind") != "loop":
                continue
            loops.append({
                "location": {"file": node["path"], "line": node["line"], "column": node["column"]},
                "subloops": convert(node.get("children", [])),
            })
        return loops

    nests = []
    for scop in data["scops"]:
        children = scop.get("children", [])
        function = scop.get("function", "")
        if not function:
            for node in children:
                if node.get("function"):
                    function = node["function"]
                    break
        nests.append({"function": function, "loops": convert(children)})
    return {"loopnests": nests}


def loop_to_data(loop: Loop) -> dict:
    entry = {"id": loop.id}
    if loop.location is not None:
        loc = loop.location
        entry["location"] = {"file": loc.file, "line": loc.line, "column": loc.column}
    entry["subloops"] = [loop_to_data(c) for c in loop.children]
    return entry


def loopnests_to_data(nests) -> dict:
    return {"loopnests": [{"function": n.function, "loops": [loop_to_data(r) for r in n.roots]}
                          for n in nests]}


def dump_loopnests(nests, indent: Optional[int] = None) -> str:
    return json.dumps(loopnests_to_data(nests), indent=indent)


def replace_loop(loops: tuple[Loop, ...], target: str, replacement: tuple[Loop, ...]) -> tuple[tuple[Loop, ...], bool]:
    """Replace the loop with id ``target`` anywhere below ``loops`` by ``replacement``."""
    out = []
    found = False
    for loop in loops:
        if found:
            out.append(loop)
        elif loop.id == target:
            out.extend(replacement)
            found = True
        else:
            children, found = replace_loop(loop.children, target, replacement)
            out.append(replace(loop, children=children) if found else loop)
    return tuple(out), found
