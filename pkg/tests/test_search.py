import math
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from gfuse.search import (
    COMPLETE,
    CONTINUE,
    STOP,
    AshaScheduler,
    RungLadder,
    SearchFailed,
    SearchSpace,
    SpaceExhausted,
    TrialRecord,
    read_history,
    replay_decisions,
    run_search,
    suggest,
    worst_at_rung,
    write_history,
)

CUBE = SearchSpace({"a": (1, 2, 3), "b": (1, 2, 3), "c": (1, 2, 3)})


def done(tid, config, rmse):
    return TrialRecord(tid, config, status="completed", rungs=[(0, rmse)])


# --- space -------------------------------------------------------------------

def test_iteration_count_space_has_32768_points():
    space = SearchSpace.iteration_counts((1, 2), 5)
    assert space.size == 2 ** 15 == 32768
    assert len(space.names) == 15


def test_space_size_is_product_of_dims():
    assert SearchSpace.iteration_counts((1, 2, 3), 2).size == 3 ** 6
    assert SearchSpace({"x": (1, 2), "y": (1, 2, 3, 4)}).size == 8
    assert sum(1 for _ in CUBE.points()) == 27


def test_point_maps_to_iteration_counts():
    space = SearchSpace.iteration_counts((1, 2), 5)
    point = {name: 1 for name in space.names}
    point["s3.fusion"] = 2
    counts = space.to_iteration_counts(point)
    assert counts[2] == (1, 1, 2) and counts[0] == (1, 1, 1) and len(counts) == 5


def test_invalid_spaces():
    with pytest.raises(ValueError):
        SearchSpace({})
    with pytest.raises(ValueError):
        SearchSpace({"a": (1, 1)})
    with pytest.raises(ValueError):
        RungLadder((5, 5))
    with pytest.raises(ValueError):
        RungLadder((5,), fraction=1.0)


# --- suggester ---------------------------------------------------------------

def test_cold_start_is_reproducible_and_in_space():
    a = suggest([], CUBE, 7)
    assert a == suggest([], CUBE, 7) and CUBE.contains(a)


def test_startup_draws_without_replacement():
    history = []
    for i in range(8):
        history.append(done(i, suggest(history, CUBE, [0, i]), float(i)))
    keys = [CUBE.key(t.config) for t in history]
    assert len(set(keys)) == 8


def test_good_values_are_preferred():
    rng = np.random.default_rng(0)
    history = []
    for i in range(16):
        cfg = {"a": int(rng.integers(1, 4)), "b": int(rng.integers(1, 4)), "c": 2 if i < 4 else 1}
        history.append(done(i, cfg, 1.0 if i < 4 else 5.0))
    counts = {1: 0, 2: 0, 3: 0}
    for seed in range(1000):
        counts[suggest(history, CUBE, seed)["c"]] += 1
    assert counts[2] > counts[1]


def test_uninformative_history_gives_uniform_suggestions():
    # Latin square over (a, b, c): every value appears equally often in every dimension
    history = [done(i, {"a": a, "b": b, "c": (a + b) % 3 + 1}, 3.0)
               for i, (a, b) in enumerate((a, b) for a in (1, 2, 3) for b in (1, 2, 3))]
    draws = [suggest(history, CUBE, seed) for seed in range(1000)]
    for name in CUBE.names:
        observed = [sum(d[name] == v for d in draws) for v in (1, 2, 3)]
        assert chisquare(observed).pvalue > 0.01, (name, observed)


def test_exhausted_space_is_signalled():
    space = SearchSpace({"x": (1, 2)})
    history = [done(0, {"x": 1}, 1.0), done(1, {"x": 2}, 2.0)]
    with pytest.raises(SpaceExhausted):
        suggest(history, space, 0)


def test_suggestions_are_never_repeated():
    history = []
    for i in range(27):
        cfg = suggest(history, CUBE, [1, i])
        history.append(done(i, cfg, float(sum(cfg.values()))))
    assert len({CUBE.key(t.config) for t in history}) == 27


# --- scheduler ---------------------------------------------------------------

def test_first_report_at_a_rung_continues():
    sched = AshaScheduler(RungLadder((1, 2, 3)))
    assert sched.on_result(0, 0, 100.0) == CONTINUE


def test_quarter_of_four_contenders_is_one():
    assert len(worst_at_rung([(0, 1.0), (1, 2.0), (2, 3.0), (3, 4.0)], 0.25)) == 1
    assert worst_at_rung([(0, 1.0), (1, 2.0), (2, 3.0), (3, 4.0)], 0.25) == {3}


def test_duplicate_and_post_stop_reports_rejected():
    sched = AshaScheduler(RungLadder((1, 2, 3)))
    sched.on_result(0, 0, 1.0)
    with pytest.raises(ValueError, match="duplicate"):
        sched.on_result(0, 0, 1.0)
    assert sched.on_result(1, 0, 5.0) == STOP
    with pytest.raises(ValueError, match="stopped"):
        sched.on_result(1, 1, 0.5)
    with pytest.raises(ValueError, match="outside"):
        sched.on_result(2, 3, 1.0)


def test_final_rung_completes():
    sched = AshaScheduler(RungLadder((1,)))
    assert [sched.on_result(i, 0, 10.0 - i) for i in range(3)] == [COMPLETE] * 3


def oracle_decisions(c_values, rung_steps, fraction, order_seed):
    """Discrete-event simulation of c/t curves with all trials launched together.

    Every live trial reaches a rung at the same time; the order in which their
    reports land is a seeded shuffle.  Decisions follow: first report at a rung
    continues; otherwise stop iff the report is among the worst ceil(f*m).
    """
    rng = np.random.default_rng(order_seed)
    alive = list(range(len(c_values)))
    log = []
    for r, t in enumerate(rung_steps):
        arrivals = [alive[i] for i in rng.permutation(len(alive))]
        seen = []
        survivors = []
        for tid in arrivals:
            rmse = c_values[tid] / t
            seen.append(rmse)
            if r == len(rung_steps) - 1:
                log.append((tid, r, "complete"))
                continue
            m = len(seen)
            worse_than_me = sum(1 for s in seen[:-1] if s > rmse)
            # rank counted from the worst; ties put the latest report first
            rank_from_worst = worse_than_me + 1
            stopped = m > 1 and rank_from_worst <= math.ceil(fraction * m)
            log.append((tid, r, "stop" if stopped else "continue"))
            if not stopped:
                survivors.append(tid)
        alive = sorted(survivors)
    return log


def simulate_with_scheduler(c_values, rung_steps, fraction, order_seed):
    rng = np.random.default_rng(order_seed)
    sched = AshaScheduler(RungLadder(rung_steps, fraction))
    alive = list(range(len(c_values)))
    log = []
    for r, t in enumerate(rung_steps):
        arrivals = [alive[i] for i in rng.permutation(len(alive))]
        nxt = []
        for tid in arrivals:
            decision = sched.on_result(tid, r, c_values[tid] / t)
            log.append((tid, r, decision))
            if decision == CONTINUE:
                nxt.append(tid)
        alive = sorted(nxt)
    return log


@pytest.mark.parametrize("order_seed", range(10))
def test_c_over_t_decisions_match_discrete_event_oracle(order_seed):
    c_values = [float(c) for c in range(1, 9)]
    got = simulate_with_scheduler(c_values, (5, 10, 20), 0.25, order_seed)
    assert got == oracle_decisions(c_values, (5, 10, 20), 0.25, order_seed)
    # the best curve is never cut
    assert (0, 2, COMPLETE) in got


def test_c_over_t_synchronous_cut_removes_two_largest():
    results = [(c, c / 5) for c in range(1, 9)]
    assert worst_at_rung(results, 0.25) == {7, 8}


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2**31), st.integers(1, 4))
def test_rung_populations_shrink_and_lifecycle_is_monotone(n, seed, n_rungs):
    rng = np.random.default_rng(seed)
    ladder = RungLadder(tuple(range(1, n_rungs + 1)))
    sched = AshaScheduler(ladder)
    alive = list(range(n))
    reached = []
    stopped = set()
    for r in range(n_rungs):
        reached.append(len(alive))
        nxt = []
        for tid in rng.permutation(alive):
            d = sched.on_result(int(tid), r, float(rng.random()))
            assert int(tid) not in stopped
            if d == STOP:
                stopped.add(int(tid))
            elif d == CONTINUE:
                nxt.append(int(tid))
        alive = nxt
    assert all(b <= a for a, b in zip(reached, reached[1:]))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(1, 6), st.integers(0, 2**31))
def test_synchronous_survival_bound(n, rungs, seed):
    rng = np.random.default_rng(seed)
    alive = list(range(n))
    for _ in range(rungs):
        results = [(t, float(rng.random())) for t in alive]
        cut = worst_at_rung(results, 0.25)
        alive = [t for t in alive if t not in cut]
    assert len(alive) <= math.ceil(0.75 ** rungs * n) + rungs


def test_improving_arrivals_are_never_stopped():
    # asynchronous rule: a report better than everything before it always continues
    sched = AshaScheduler(RungLadder((1, 2)))
    assert all(sched.on_result(i, 0, 100.0 - i) == CONTINUE for i in range(12))


# --- driver ------------------------------------------------------------------

def quadratic_objective(seed, space=CUBE, sigma=0.3):
    rng = np.random.default_rng(seed)
    target = rng.integers(1, 4, size=3)
    table = {space.key(p): float(((np.array(space.key(p)) - target) ** 2).sum() + rng.normal(0, sigma))
             for p in space.points()}
    return table, lambda cfg, ctx: ctx.report(0, table[space.key(cfg)])


def test_budget_one_returns_the_single_trial():
    table, obj = quadratic_objective(0)
    res = run_search(CUBE, RungLadder((1,)), 1, obj, seed=3)
    assert len(res.trials) == 1 and res.best is res.trials[0]
    assert res.best.status == "completed"


def test_search_finds_top_five_percent_in_18_of_20_seeds():
    hits = 0
    for seed in range(20):
        table, obj = quadratic_objective(seed)
        cutoff = sorted(table.values())[math.ceil(0.05 * 27) - 1]
        res = run_search(CUBE, RungLadder((1,)), 12, obj, seed=seed)
        hits += res.best.best_rmse <= cutoff
    assert hits >= 18


def test_parallelism_does_not_change_the_best_config():
    table, _ = quadratic_objective(5)

    def slow(cfg, ctx):
        time.sleep(0.001 * (sum(cfg.values()) % 3))
        ctx.report(0, table[CUBE.key(cfg)])

    one = run_search(CUBE, RungLadder((1,)), 27, slow, parallelism=1, seed=1)
    four = run_search(CUBE, RungLadder((1,)), 27, slow, parallelism=4, seed=1)
    assert one.best.config == four.best.config
    assert len(four.trials) == 27


def test_parallel_trials_really_overlap():
    active, peak = [0], [0]
    lock = threading.Lock()

    def obj(cfg, ctx):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        ctx.report(0, 1.0)

    run_search(CUBE, RungLadder((1,)), 8, obj, parallelism=4)
    assert peak[0] > 1


def test_stopped_trials_end_early_and_history_replays(tmp_path):
    events = []

    def curve(cfg, ctx):
        c = sum(cfg.values())
        for r, t in enumerate((5, 10, 20)):
            if not ctx.report(r, c / t):
                return

    res = run_search(CUBE, RungLadder((5, 10, 20)), 12, curve, seed=2, sink=events.append)
    statuses = {t.status for t in res.trials}
    assert "stopped_early" in statuses and "completed" in statuses
    for t in res.trials:
        if t.status == "stopped_early":
            assert len(t.rungs) < 3
    path = tmp_path / "history.jsonl"
    write_history(path, events)
    loaded = read_history(path)
    logged = [e["decision"] for e in loaded if e["event"] == "decision"]
    assert replay_decisions(loaded, RungLadder((5, 10, 20))) == logged
    summary = res.summary()
    assert summary["n_trials"] == 12 and set(summary["marginals"]) == set(CUBE.names)


def test_all_failures_are_reported_with_diagnostics():
    def broken(cfg, ctx):
        raise RuntimeError(f"boom {cfg['a']}")

    with pytest.raises(SearchFailed, match="boom") as info:
        run_search(CUBE, RungLadder((1,)), 3, broken)
    assert all(t.status == "failed" and t.error for t in info.value.trials)


def test_rung_results_must_increase():
    t = TrialRecord(0, {"a": 1})
    t.add_rung(0, 1.0)
    with pytest.raises(ValueError):
        t.add_rung(0, 0.5)
