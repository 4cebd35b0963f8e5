"""Tiling, interchange and thread-parallelization, and the search-space generator.

A :class:`Configuration` is a node in the search tree: the transformations
applied so far plus the loop structure they produce. :func:`derive_children`
lists every transformation that structurally applies to that structure.
Whether a transformation is semantically legal is left to the compiler.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .loopmodel import (Loop, LoopNest, Origin, find_loop, is_perfect_subnest,
                        perfect_chain, replace_loop)


class ApplicabilityError(ValueError):
    """A transformation was applied where the generator must never propose it."""


@dataclass(frozen=True)
class Tile:
    applied_ids: tuple[str, ...]
    sizes: tuple[int, ...]
    floor_ids: tuple[str, ...]
    tile_ids: tuple[str, ...]

    def __post_init__(self):
        n = len(self.applied_ids)
        if n < 1 or not (len(self.sizes) == len(self.floor_ids) == len(self.tile_ids) == n):
            raise ValueError("tile needs equally many loops, sizes, floor ids and tile ids")
        if any(s < 2 for s in self.sizes):
            raise ValueError(f"tile sizes must be at least 2, got {self.sizes}")


@dataclass(frozen=True)
class Interchange:
    applied_ids: tuple[str, ...]
    permutation: tuple[str, ...]

    def __post_init__(self):
        if sorted(self.applied_ids) != sorted(self.permutation) or len(set(self.applied_ids)) != len(self.applied_ids):
            raise ValueError(f"{self.permutation} is not a permutation of {self.applied_ids}")
        if tuple(self.applied_ids) == tuple(self.permutation):
            raise ValueError("identity permutation")


@dataclass(frozen=True)
class ParallelizeThread:
    applied_id: str


Transformation = Union[Tile, Interchange, ParallelizeThread]


def touched_ids(t: Transformation) -> tuple[str, ...]:
    if isinstance(t, ParallelizeThread):
        return (t.applied_id,)
    return t.applied_ids


def apply(nest: LoopNest, t: Transformation) -> LoopNest:
    ids = touched_ids(t)
    for loop_id in ids:
        try:
            if find_loop(nest, loop_id).parallelized:
                raise ApplicabilityError(f"loop {loop_id} is parallelized and cannot be transformed")
        except KeyError:
            raise ApplicabilityError(f"loop {loop_id} does not exist") from None

    if isinstance(t, ParallelizeThread):
        loop = find_loop(nest, t.applied_id)
        return _substitute(nest, loop.id, (replace(loop, parallelized=True),))

    if not is_perfect_subnest(nest, ids):
        raise ApplicabilityError(f"loops {','.join(ids)} do not form a perfect loop nest")
    chain = [find_loop(nest, i) for i in ids]
    body = chain[-1].children

    if isinstance(t, Tile):
        existing = set(nest.ids()) - set(ids)
        new_ids = t.floor_ids + t.tile_ids
        if len(set(new_ids)) != len(new_ids) or existing & set(new_ids):
            raise ApplicabilityError(f"tiling would reuse loop ids: {','.join(new_ids)}")
        names = list(new_ids)
        origins = [Origin.TILED] * len(names)
        locations = [None] * len(names)
        parallel = [False] * len(names)
    else:
        by_id = {l.id: l for l in chain}
        names = list(t.permutation)
        origins = [by_id[n].origin if n == o else Origin.INTERCHANGED
                   for n, o in zip(t.permutation, t.applied_ids)]
        locations = [by_id[n].location if n == o else None
                     for n, o in zip(t.permutation, t.applied_ids)]
        parallel = [False] * len(names)

    inner = body
    for name, origin, location, par in reversed(list(zip(names, origins, locations, parallel))):
        inner = (Loop(id=name, location=location, children=inner, parallelized=par, origin=origin),)
    return _substitute(nest, chain[0].id, inner)


def _substitute(nest: LoopNest, target: str, replacement) -> LoopNest:
    roots, found = replace_loop(nest.roots, target, replacement)
    assert found
    return LoopNest(function=nest.function, roots=roots)


@dataclass(frozen=True)
class Configuration:
    nest_index: int
    transformations: tuple[Transformation, ...]
    result: LoopNest
    parent: Optional[Configuration] = field(default=None, compare=False, repr=False)
    fresh_id_counter: int = 0

    @classmethod
    def baseline(cls, nest: LoopNest, nest_index: int = 0, fresh_id_counter: int = 0):
        return cls(nest_index=nest_index, transformations=(), result=nest, fresh_id_counter=fresh_id_counter)

    def derive(self, t: Transformation, fresh_id_counter: int) -> Configuration:
        return Configuration(nest_index=self.nest_index,
                             transformations=self.transformations + (t,),
                             result=apply(self.result, t),
                             parent=self,
                             fresh_id_counter=fresh_id_counter)


def replay(baseline: LoopNest, transformations) -> LoopNest:
    nest = baseline
    for t in transformations:
        nest = apply(nest, t)
    return nest


class _FreshIds:
    def __init__(self, counter: int, taken):
        self.counter = counter
        self.taken = set(taken)

    def next(self) -> str:
        while True:
            self.counter += 1
            name = f"loop{self.counter}"
            if name not in self.taken:
                return name


def interchange_candidates(chain: list[str]) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    """Permutations of a perfect chain that move its outermost loop.

    Trailing loops that stay in place are cut off, so each reordering of the
    whole nest is produced by exactly one start loop.
    """
    result = []
    for perm in itertools.permutations(chain):
        if perm[0] == chain[0]:
            continue
        n = len(chain)
        while perm[n - 1] == chain[n - 1]:
            n -= 1
        result.append((tuple(chain[:n]), tuple(perm[:n])))
    return result


def candidate_transformations(config: Configuration, tile_sizes, enable_parallel: bool = True):
    """The transformations ``derive_children`` applies, each with the id counter after it.

    Cheap compared to deriving: nothing is applied.
    """
    nest = config.result
    sizes = sorted(set(tile_sizes))
    taken = nest.ids()
    starts = [loop for loop in nest.loops() if not loop.parallelized]
    result = []

    for loop in starts:
        chain = [l.id for l in perfect_chain(loop)]
        for depth in range(1, len(chain) + 1):
            applied = tuple(chain[:depth])
            for size_vector in itertools.product(sizes, repeat=depth):
                fresh = _FreshIds(config.fresh_id_counter, taken)
                floors = tuple(fresh.next() for _ in applied)
                tiles = tuple(fresh.next() for _ in applied)
                result.append((Tile(applied, size_vector, floors, tiles), fresh.counter))

    for loop in starts:
        chain = [l.id for l in perfect_chain(loop)]
        for applied, perm in interchange_candidates(chain):
            result.append((Interchange(applied, perm), config.fresh_id_counter))

    if enable_parallel:
        for loop in starts:
            result.append((ParallelizeThread(loop.id), config.fresh_id_counter))
    return result


def derive_children(config: Configuration, tile_sizes, enable_parallel: bool = True) -> list[Configuration]:
    return [config.derive(t, counter) for t, counter in candidate_transformations(config, tile_sizes, enable_parallel)]


def count_children(depth: int, num_tile_sizes: int, enable_parallel: bool = True) -> tuple[int, int, int]:
    """Child counts (tilings, interchanges, parallelizations) for a perfect nest of ``depth`` loops."""
    tilings = sum((depth - k + 1) * num_tile_sizes ** k for k in range(1, depth + 1))
    return tilings, math.factorial(depth) - 1, depth if enable_parallel else 0


def kind(t: Transformation) -> str:
    return {Tile: "tile", Interchange: "interchange", ParallelizeThread: "parallelize_thread"}[type(t)]
