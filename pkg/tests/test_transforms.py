import itertools
import math
import time

import pytest

from mctree.loopmodel import Origin, find_loop
from mctree.rewrite import render_pragma, render_short
from mctree.transforms import (
    ApplicabilityError, Configuration, Interchange, ParallelizeThread, Tile, apply, count_children,
    derive_children, kind, replay,
)

from nests import chain_nest, gemm_nest, tree_nest

SIZES = (4, 16, 64, 256, 1024)


def order(nest):
    return [l.id for l in nest.loops()]


def kinds(children):
    counts = {"tile": 0, "interchange": 0, "parallelize_thread": 0}
    for c in children:
        counts[kind(c.transformations[-1])] += 1
    return counts["tile"], counts["interchange"], counts["parallelize_thread"]


def brute_force_counts(depth, t, par):
    # every (start, length) sub-chain times every size vector; every distinct reachable
    # whole-nest order from permuting any sub-chain, minus the original order
    ids = list(range(depth))
    tilings = sum(len(list(itertools.product(range(t), repeat=k)))
                  for s in range(depth) for k in range(1, depth - s + 1))
    orders = set()
    for s in range(depth):
        for k in range(1, depth - s + 1):
            for perm in itertools.permutations(ids[s:s + k]):
                orders.add(tuple(ids[:s] + list(perm) + ids[s + k:]))
    orders.discard(tuple(ids))
    return tilings, len(orders), depth if par else 0


def test_tile_gemm_three_deep():
    nest = apply(gemm_nest(), Tile(("i", "j", "k"), (448, 2048, 256), ("i1", "j1", "k1"), ("i2", "j2", "k2")))
    assert order(nest) == ["i1", "j1", "k1", "i2", "j2", "k2"]
    assert all(len(l.children) == (0 if l.id == "k2" else 1) for l in nest.loops())
    assert all(l.origin is Origin.TILED and l.location is None for l in nest.loops())


def test_interchange_after_tile():
    nest = apply(gemm_nest(), Tile(("i", "j", "k"), (448, 2048, 256), ("i1", "j1", "k1"), ("i2", "j2", "k2")))
    nest = apply(nest, Interchange(("i1", "j1", "k1", "i2", "j2"), ("j1", "k1", "i1", "j2", "i2")))
    assert order(nest) == ["j1", "k1", "i1", "j2", "i2", "k2"]


def test_interchange_keeps_unmoved_loops():
    nest = apply(gemm_nest(), Interchange(("i", "j"), ("j", "i")))
    assert order(nest) == ["j", "i", "k"]
    k = find_loop(nest, "k")
    assert k.origin is Origin.SOURCE and k.location.line == 12
    assert find_loop(nest, "i").origin is Origin.INTERCHANGED


def test_parallelize_changes_no_structure():
    base = gemm_nest()
    nest = apply(base, ParallelizeThread("i"))
    assert order(nest) == order(base)
    assert find_loop(nest, "i").parallelized
    assert not any(l.parallelized for l in nest.loops() if l.id != "i")


@pytest.mark.parametrize("t, rule", [
    (Tile(("i", "k"), (4, 4), ("a", "b"), ("c", "d")), "perfect"),
    (Tile(("i",), (4,), ("j",), ("x",)), "reuse"),
    (Interchange(("q", "i"), ("i", "q")), "does not exist"),
    (ParallelizeThread("nope"), "does not exist"),
])
def test_inapplicable(t, rule):
    with pytest.raises(ApplicabilityError, match=rule):
        apply(gemm_nest(), t)


def test_parallelized_loop_is_frozen():
    nest = apply(gemm_nest(), ParallelizeThread("j"))
    for t in (ParallelizeThread("j"), Tile(("j",), (4,), ("a",), ("b",)), Interchange(("i", "j"), ("j", "i"))):
        with pytest.raises(ApplicabilityError):
            apply(nest, t)


@pytest.mark.parametrize("bad", [
    lambda: Tile(("i",), (1,), ("a",), ("b",)),
    lambda: Tile(("i", "j"), (4,), ("a",), ("b",)),
    lambda: Tile((), (), (), ()),
    lambda: Interchange(("i", "j"), ("i", "j")),
    lambda: Interchange(("i", "j"), ("i", "k")),
])
def test_transformation_invariants(bad):
    with pytest.raises(ValueError):
        bad()


def test_gemm_children_counts():
    started = time.perf_counter()
    children = derive_children(Configuration.baseline(gemm_nest()), SIZES, True)
    assert time.perf_counter() - started < 1.0
    assert kinds(children) == (190, 5, 3)


def test_two_loop_tilings_of_two_and_four():
    children = derive_children(Configuration.baseline(chain_nest(["i", "j"])), {4, 2}, False)
    lines = [render_short(c.transformations[-1]) for c in children]
    assert lines[:6] == [
        "#pragma clang loop(i) tile sizes(2)",
        "#pragma clang loop(i) tile sizes(4)",
        "#pragma clang loop(i,j) tile sizes(2,2)",
        "#pragma clang loop(i,j) tile sizes(2,4)",
        "#pragma clang loop(i,j) tile sizes(4,2)",
        "#pragma clang loop(i,j) tile sizes(4,4)",
    ]
    # the inner loop j is a sub-nest of its own, adding two more tilings
    assert lines[6:8] == ["#pragma clang loop(j) tile sizes(2)", "#pragma clang loop(j) tile sizes(4)"]
    assert lines[8:] == ["#pragma clang loop(i,j) interchange permutation(j,i)"]
    assert kinds(children) == count_children(2, 2, False) == (8, 1, 0)


def test_three_loop_interchanges():
    children = derive_children(Configuration.baseline(gemm_nest()), SIZES, True)
    lines = [render_pragma(c.transformations[-1]) for c in children if kind(c.transformations[-1]) == "interchange"]
    assert lines == [
        "#pragma clang loop(i,j) interchange permutation(j,i)",
        "#pragma clang loop(i,j,k) interchange permutation(j,k,i)",
        "#pragma clang loop(i,j,k) interchange permutation(k,i,j)",
        "#pragma clang loop(i,j,k) interchange permutation(k,j,i)",
        "#pragma clang loop(j,k) interchange permutation(k,j)",
    ]


def test_single_parallelized_loop_has_no_children():
    config = Configuration.baseline(chain_nest(["i"])).derive(ParallelizeThread("i"), 0)
    assert derive_children(config, SIZES, True) == []


def test_four_deep_one_size():
    children = derive_children(Configuration.baseline(chain_nest(list("abcd"))), {8}, False)
    assert kinds(children) == (10, 23, 0) == brute_force_counts(4, 1, False)


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
@pytest.mark.parametrize("t", [1, 2, 3, 4, 5])
def test_counts_match_formula_and_oracle(depth, t):
    nest = chain_nest([f"l{n}" for n in range(depth)])
    sizes = [2 ** (n + 1) for n in range(t)]
    for par in (True, False):
        derived = kinds(derive_children(Configuration.baseline(nest), sizes, par))
        assert derived == count_children(depth, t, par) == brute_force_counts(depth, t, par)


@pytest.mark.parametrize("depth", [2, 3, 4])
def test_interchange_orders_are_distinct(depth):
    nest = chain_nest([f"l{n}" for n in range(depth)])
    orders = [tuple(order(c.result)) for c in derive_children(Configuration.baseline(nest), [2], False)
              if kind(c.transformations[-1]) == "interchange"]
    assert len(orders) == len(set(orders)) == math.factorial(depth) - 1


def test_count_children_examples():
    assert count_children(3, 5, True) == (190, 5, 3)
    assert count_children(1, 5, False) == (5, 0, 0)
    assert count_children(4, 2, True) == (52, 23, 4)


def test_derivation_is_deterministic():
    nest = tree_nest([[[], [[]]], [[]]])
    a = derive_children(Configuration.baseline(nest, fresh_id_counter=9), [4, 2], True)
    b = derive_children(Configuration.baseline(nest, fresh_id_counter=9), [2, 4, 4], True)
    assert a == b


def test_fresh_ids_come_from_counter():
    config = Configuration.baseline(gemm_nest(), fresh_id_counter=7)
    child = derive_children(config, [4], False)[0]
    assert child.transformations[-1] == Tile(("i",), (4,), ("loop8",), ("loop9",))
    assert child.fresh_id_counter == 9
    grandchild = derive_children(child, [4], False)[0]
    assert grandchild.transformations[-1].floor_ids == ("loop10",)


def test_fresh_ids_skip_existing_names():
    nest = chain_nest(["loop1", "loop2"])
    child = derive_children(Configuration.baseline(nest), [4], False)[0]
    assert child.transformations[-1].floor_ids == ("loop3",)


def test_children_replay_from_baseline():
    base = gemm_nest()
    config = Configuration.baseline(base)
    for index in (3, 0, 1):
        config = derive_children(config, [4, 16], True)[index]
    assert config.parent.parent.parent.transformations == ()
    assert replay(base, config.transformations) == config.result


def test_no_child_touches_parallelized_loop():
    config = Configuration.baseline(gemm_nest()).derive(ParallelizeThread("j"), 0)
    children = derive_children(config, [4], True)
    for c in children:
        t = c.transformations[-1]
        ids = (t.applied_id,) if isinstance(t, ParallelizeThread) else t.applied_ids
        assert "j" not in ids
    # i has j as its only child, so i is only parallelizable or tileable alone
    assert {render_short(c.transformations[-1]) for c in children} == {
        "#pragma clang loop(i) tile sizes(4)", "#pragma clang loop(k) tile sizes(4)",
        "#pragma clang loop(i) parallelize_thread", "#pragma clang loop(k) parallelize_thread"}
