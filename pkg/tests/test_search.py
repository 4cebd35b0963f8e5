import json

import pytest

from mctree.evaluate import CostModel, Outcome, Status, SyntheticEvaluator
from mctree.search import (
    BaselineFailed, Experiment, ResumeError, SearchParams, SearchState, Tuner, baseline_configs,
    best_so_far_trace, child_configs, follow_path, read_log, replay_records, resume_log, run, save_log,
)
from mctree.transforms import ParallelizeThread, Tile, derive_children

from nests import chain_nest, gemm_nest, local_minimum_model, tiling_model

SIZES = (4, 16, 64, 256, 1024)


def synthetic(model=None, nests=None):
    return SyntheticEvaluator(model or local_minimum_model(), nests or [gemm_nest()])


def state_with_times(times):
    state = SearchState(params=SearchParams(SIZES))
    state.baselines = [gemm_nest()]
    configs = baseline_configs(state.baselines)
    for n, t in enumerate(times):
        outcome = Outcome.success(t) if t else Outcome(Status.COMPILE_FAILED)
        state.record(Experiment(n, configs, outcome, parent_number=None if n == 0 else 0))
    return state


def is_descendant(state, number, ancestor):
    while number is not None:
        if number == ancestor:
            return True
        number = state.experiments[number].parent_number
    return False


def test_budget_of_one_keeps_only_the_baseline():
    state = run(synthetic(), SIZES, True, max_experiments=1)
    assert len(state.experiments) == 1
    assert state.frontier == [0] and state.best == 0 and state.expansions == []


def test_zero_wall_clock_stops_after_baseline():
    state = run(synthetic(), SIZES, True, wall_clock=0)
    assert len(state.experiments) == 1


def test_best_so_far_trace_examples():
    assert best_so_far_trace(state_with_times([5.0, 6.1, 4.2, 4.9])) == [(0, 5.0), (2, 4.2)]
    assert best_so_far_trace(state_with_times([3.0])) == [(0, 3.0)]
    assert best_so_far_trace(state_with_times([3.0, None, 1.0])) == [(0, 3.0), (2, 1.0)]


def test_trace_identical_across_runs():
    a = run(synthetic(), SIZES, True, max_experiments=300)
    b = run(synthetic(), SIZES, True, max_experiments=300)
    assert best_so_far_trace(a) == best_so_far_trace(b)


def test_run_invariants():
    model = local_minimum_model(illegal=(r"interchange permutation\(k",), noise=0.2, noise_seed=4)
    state = run(synthetic(model), [4, 64], True, max_experiments=400)
    exps = state.experiments
    assert [e.number for e in exps] == list(range(len(exps)))
    assert exps[0].parent_number is None and exps[0].configs[0].transformations == ()
    for e in exps[1:]:
        parent = exps[e.parent_number]
        assert parent.number < e.number and parent.expanded and parent.outcome.ok
        changed = [i for i, (a, b) in enumerate(zip(parent.configs, e.configs)) if a != b]
        assert changed == [e.nest]
        assert e.configs[e.nest].transformations[:-1] == parent.configs[e.nest].transformations
    assert any(not e.outcome.ok for e in exps)
    assert all(e.outcome.ok for e in exps if e.expanded)
    assert set(state.frontier) == {e.number for e in exps if e.outcome.ok and not e.expanded}


def test_best_first_pop_order():
    state = run(synthetic(tiling_model(noise=0.3)), [4, 16], True, max_experiments=500)
    # rebuild the frontier from the event order and check each pop against it
    frontier = set()
    for kind, number in state.events:
        exp = state.experiments[number]
        if kind == "experiment":
            if exp.outcome.ok:
                frontier.add(number)
        else:
            times = [state.experiments[n].seconds for n in frontier]
            assert exp.seconds == min(times)
            assert number == min(n for n in frontier if state.experiments[n].seconds == exp.seconds)
            frontier.remove(number)


def test_local_minimum():
    state = run(synthetic(), SIZES, True, max_experiments=500)
    best = state.best_experiment
    assert best.configs[0].transformations[0] == ParallelizeThread("i")
    [par] = [e.number for e in state.experiments if e.parent_number == 0
             and e.transformation == ParallelizeThread("i")]
    after = state.expansions[state.expansions.index(par):]
    assert all(is_descendant(state, n, par) for n in after)
    assert all(e.seconds > state.experiments[par].seconds for e in state.experiments
               if e.outcome.ok and not is_descendant(state, e.number, par))


def test_tiling_optimum_found():
    state = run(synthetic(tiling_model()), SIZES, False, max_experiments=2000)
    [t] = state.best_experiment.configs[0].transformations
    assert isinstance(t, Tile) and t.applied_ids == ("i", "j", "k") and t.sizes == (1024, 16, 64)


def test_search_ends_when_frontier_empties():
    model = CostModel(illegal=("tile",))
    state = run(synthetic(model, [chain_nest(["i"])]), [4], True)
    assert [e.outcome.ok for e in state.experiments] == [True, False, True]
    assert state.frontier == [] and state.expansions == [0, 2]


def test_failed_baseline_aborts():
    class Broken:
        kind = "synthetic"

        def fingerprint(self):
            return "x"

        def baseline(self):
            return None, Outcome(Status.COMPILE_FAILED, log_excerpt="prog.c:1: error")
    with pytest.raises(BaselineFailed, match="error"):
        Tuner(Broken(), SearchParams(SIZES)).run()


def test_multiple_nests_change_one_at_a_time():
    nests = [chain_nest(["i", "j"], first_line=1), chain_nest(["p"], first_line=10, function="g")]
    state = run(synthetic(CostModel(parallel_speedup=(2.0,)), nests), [4], True, max_experiments=60)
    assert {e.nest for e in state.experiments[1:]} == {0, 1}
    ids = [t.floor_ids for e in state.experiments for c in e.configs for t in c.transformations
           if isinstance(t, Tile)]
    assert all(f[0].startswith("loop") for f in ids)


def test_follow_path_errors():
    with pytest.raises(IndexError):
        follow_path([gemm_nest()], SearchParams(SIZES), [9999])


# logs

def test_logs_are_deterministic(tmp_path):
    for name in ("a", "b"):
        run(synthetic(local_minimum_model(noise=0.1, noise_seed=3)), SIZES, True, max_experiments=200,
            log_path=tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_log_layout(tmp_path):
    path = tmp_path / "log.jsonl"
    run(synthetic(), [4], True, max_experiments=5, log_path=path)
    records = [json.loads(l) for l in path.read_text().splitlines()]
    assert records[0]["record"] == "header" and records[0]["tile_sizes"] == [4]
    assert records[1]["number"] == 0 and "loopnests" in records[1]
    assert records[2] == {"record": "expand", "number": 0}
    assert records[3]["pragma"] == "#pragma clang loop(i) tile sizes(4) floor_ids(loop1) tile_ids(loop2)"
    assert records[3]["parent"] == 0 and records[3]["status"] == "ok"
    assert len(records) == 7


@pytest.mark.parametrize("interrupt", [1, 2, 50, 199])
def test_resume_matches_uninterrupted(tmp_path, interrupt):
    model = local_minimum_model(noise=0.1, noise_seed=7)
    full, part = tmp_path / "full.jsonl", tmp_path / "part.jsonl"
    run(synthetic(model), SIZES, True, max_experiments=200 if interrupt < 100 else 300, log_path=full)
    run(synthetic(model), SIZES, True, max_experiments=interrupt, log_path=part)
    ev = synthetic(model)
    Tuner.resume(ev, SearchParams(SIZES), part).run(max_experiments=200 if interrupt < 100 else 300)
    assert part.read_bytes() == full.read_bytes()


def test_resume_drops_truncated_record(tmp_path):
    model = local_minimum_model()
    full, part = tmp_path / "full.jsonl", tmp_path / "part.jsonl"
    run(synthetic(model), SIZES, True, max_experiments=100, log_path=full)
    run(synthetic(model), SIZES, True, max_experiments=60, log_path=part)
    with open(part, "a") as f:
        f.write('{"record":"experiment","numb')
    Tuner.resume(synthetic(model), SearchParams(SIZES), part).run(max_experiments=100)
    assert part.read_bytes() == full.read_bytes()


def test_resume_continues_state(tmp_path):
    path = tmp_path / "log.jsonl"
    first = run(synthetic(), SIZES, True, max_experiments=80, log_path=path)
    state = resume_log(path, synthetic(), SearchParams(SIZES))
    assert [e.outcome for e in state.experiments] == [e.outcome for e in first.experiments]
    assert state.expansions == first.expansions and state.frontier == first.frontier


def test_save_log_equals_written_log(tmp_path):
    path = tmp_path / "log.jsonl"
    ev = synthetic()
    state = run(ev, SIZES, True, max_experiments=250, log_path=path)
    save_log(state, tmp_path / "saved.jsonl", ev)
    assert (tmp_path / "saved.jsonl").read_bytes() == path.read_bytes()


def test_resume_empty_log(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text("")
    with pytest.raises(ResumeError, match="header"):
        resume_log(path, synthetic(), SearchParams(SIZES))
    run(synthetic(), SIZES, True, max_experiments=3, log_path=path)
    path.write_text(path.read_text().splitlines()[0] + "\n")
    with pytest.raises(ResumeError, match="baseline"):
        resume_log(path, synthetic(), SearchParams(SIZES))


def test_resume_refuses_other_settings(tmp_path):
    path = tmp_path / "log.jsonl"
    run(synthetic(), SIZES, True, max_experiments=10, log_path=path)
    with pytest.raises(ResumeError, match="tile sizes"):
        resume_log(path, synthetic(), SearchParams((4, 16)))
    with pytest.raises(ResumeError, match="tile sizes"):
        resume_log(path, synthetic(), SearchParams(SIZES, parallelize=False))
    with pytest.raises(ResumeError, match="cost model"):
        resume_log(path, synthetic(CostModel(base_time=2.0)), SearchParams(SIZES))


def test_resume_detects_tampering(tmp_path):
    path = tmp_path / "log.jsonl"
    run(synthetic(), SIZES, True, max_experiments=10, log_path=path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[5])
    rec["pragma"] = "#pragma clang loop(q) parallelize_thread"
    lines[5] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ResumeError, match="derivation"):
        replay_records(read_log(path))


def test_replay_without_evaluator(tmp_path):
    path = tmp_path / "log.jsonl"
    state = run(synthetic(), SIZES, True, max_experiments=30, log_path=path)
    again = replay_records(read_log(path))
    assert best_so_far_trace(again) == best_so_far_trace(state)


def test_child_list_matches_eager_derivation():
    params = SearchParams((4, 16))
    configs = baseline_configs([gemm_nest(), chain_nest(["a", "b"], first_line=30)])
    children = child_configs(configs, params)
    eager = [(0, c) for c in derive_children(configs[0], params.tile_sizes)]
    eager += [(1, c) for c in derive_children(configs[1], params.tile_sizes)]
    assert len(children) == len(eager)
    for (i, lazy), (j, child) in zip(children, eager):
        assert i == j and lazy[j].transformations == child.transformations
        assert lazy[1 - j] == configs[1 - j]
    assert [children.transformation(k) for k in range(3)] == \
        [c.transformations[-1] for _, c in eager[:3]]
    assert [c[1] for c in children[2:5]] == [c[1] for c in list(children)[2:5]]
