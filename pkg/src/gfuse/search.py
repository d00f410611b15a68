"""Iteration-count search: discrete space, density-ratio suggester, async successive halving.

The suggester is a tree-structured Parzen estimator over categorical
dimensions: after a random start-up phase it splits finished trials into a
good and a bad group by score quantile, builds smoothed per-dimension
frequency tables for each group, and proposes the sampled candidate with the
largest good/bad likelihood ratio.

The scheduler is asynchronous successive halving: whenever a trial reports a
result at a rung, it is stopped if it ranks among the worst ``fraction`` of
everything recorded at that rung so far.
"""

from __future__ import annotations

import itertools
import json
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

COMPONENTS = ("color", "depth", "fusion")
STATUSES = ("pending", "running", "stopped_early", "completed", "failed")


class SpaceExhausted(Exception):
    """Every point of the search space has already been suggested."""


@dataclass
class SearchSpace:
    dims: dict[str, tuple[int, ...]]

    def __post_init__(self):
        if not self.dims:
            raise ValueError("search space needs at least one dimension")
        self.dims = {k: tuple(int(v) for v in vals) for k, vals in self.dims.items()}
        for k, vals in self.dims.items():
            if not vals or len(set(vals)) != len(vals):
                raise ValueError(f"dimension {k!r} needs distinct values, got {vals}")

    @classmethod
    def iteration_counts(cls, choices=(1, 2), scales: int = 5) -> "SearchSpace":
        """Three count dimensions (color, depth, fusion) per scale."""
        return cls({f"s{s}.{c}": tuple(choices) for s in range(1, scales + 1) for c in COMPONENTS})

    @property
    def names(self) -> list[str]:
        return list(self.dims)

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.dims.values())

    def __len__(self) -> int:
        return self.size

    def points(self):
        for combo in itertools.product(*self.dims.values()):
            yield dict(zip(self.dims, combo))

    def key(self, point: dict) -> tuple:
        return tuple(point[k] for k in self.dims)

    def contains(self, point: dict) -> bool:
        return set(point) == set(self.dims) and all(point[k] in v for k, v in self.dims.items())

    def to_iteration_counts(self, point: dict, scales: int = 5, default: int = 1) -> list[tuple[int, int, int]]:
        return [tuple(point.get(f"s{s}.{c}", default) for c in COMPONENTS) for s in range(1, scales + 1)]

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.dims.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls({k: tuple(v) for k, v in d.items()})


@dataclass
class RungLadder:
    steps: tuple[int, ...] = (200, 400, 800)
    fraction: float = 0.25

    def __post_init__(self):
        self.steps = tuple(int(s) for s in self.steps)
        if not self.steps or any(b <= a for a, b in zip(self.steps, self.steps[1:])) or self.steps[0] <= 0:
            raise ValueError(f"rung steps must be positive and strictly increasing, got {self.steps}")
        if not 0.0 < self.fraction < 1.0:
            raise ValueError(f"elimination fraction must lie in (0, 1), got {self.fraction}")

    @property
    def final(self) -> int:
        return len(self.steps) - 1


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    status: str = "pending"
    rungs: list[tuple[int, float]] = field(default_factory=list)
    seconds: float = 0.0
    error: str | None = None

    @property
    def best_rmse(self) -> float:
        return min((r for _, r in self.rungs), default=math.inf)

    def add_rung(self, rung: int, rmse: float) -> None:
        if self.rungs and rung <= self.rungs[-1][0]:
            raise ValueError(f"trial {self.trial_id}: rung {rung} reported after rung {self.rungs[-1][0]}")
        self.rungs.append((rung, float(rmse)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rungs"] = [list(r) for r in self.rungs]
        return d


# ---------------------------------------------------------------------------
# suggester

@dataclass(frozen=True)
class SuggesterSettings:
    n_startup: int = 8
    gamma: float = 0.25
    n_candidates: int = 24
    prior_weight: float = 1.0  # Laplace smoothing added to every category count


def _uniform_untried(space: SearchSpace, tried: set, rng: np.random.Generator) -> dict:
    if len(tried) >= space.size:
        raise SpaceExhausted(f"all {space.size} points have been suggested")
    if space.size <= 4 * len(tried) + 64:
        remaining = [p for p in space.points() if space.key(p) not in tried]
        return remaining[rng.integers(len(remaining))]
    while True:
        point = {k: v[rng.integers(len(v))] for k, v in space.dims.items()}
        if space.key(point) not in tried:
            return point


def _category_probs(values: list[int], choices: tuple[int, ...], prior: float) -> np.ndarray:
    counts = np.array([sum(1 for v in values if v == c) for c in choices], dtype=np.float64)
    return (counts + prior) / (counts.sum() + prior * len(choices))


def suggest(history: list[TrialRecord], space: SearchSpace, seed,
            settings: SuggesterSettings = SuggesterSettings()) -> dict:
    """Propose the next untried configuration.

    Trials that produced at least one rung result count as observations,
    scored by their best RMSE.  Raises :class:`SpaceExhausted` when nothing
    is left to try.
    """
    rng = np.random.default_rng(seed)
    tried = {space.key(t.config) for t in history}
    observed = [t for t in history if t.rungs]
    if len(history) < settings.n_startup or not observed:
        return _uniform_untried(space, tried, rng)

    scores = np.array([t.best_rmse for t in observed])
    n_good = max(1, math.ceil(settings.gamma * len(observed)))
    cut = np.sort(scores)[n_good - 1]
    good = [t for t, s in zip(observed, scores) if s <= cut]
    bad = [t for t, s in zip(observed, scores) if s > cut]

    log_ratio = {}
    l_probs = {}
    for name, choices in space.dims.items():
        lp = _category_probs([t.config[name] for t in good], choices, settings.prior_weight)
        gp = _category_probs([t.config[name] for t in bad], choices, settings.prior_weight)
        l_probs[name] = lp
        log_ratio[name] = np.log(lp) - np.log(gp)

    picks = {name: rng.choice(len(choices), size=settings.n_candidates, p=l_probs[name])
             for name, choices in space.dims.items()}
    candidates = []
    for j in range(settings.n_candidates):
        point = {name: space.dims[name][picks[name][j]] for name in space.dims}
        score = sum(log_ratio[name][picks[name][j]] for name in space.dims)
        candidates.append((score, j, point))
    # highest ratio first; sample order breaks ties
    candidates.sort(key=lambda c: (-c[0], c[1]))
    for _, _, point in candidates:
        if space.key(point) not in tried:
            return point
    return _uniform_untried(space, tried, rng)


# ---------------------------------------------------------------------------
# scheduler

CONTINUE, STOP, COMPLETE = "continue", "stop", "complete"


def worst_at_rung(results: list[tuple[int, float]], fraction: float) -> set[int]:
    """Trial ids forming the worst ``ceil(fraction * m)`` of ``m`` results.

    Higher RMSE is worse; among equal values the later report is worse.
    """
    k = math.ceil(fraction * len(results))
    order = sorted(range(len(results)), key=lambda i: (results[i][1], i), reverse=True)
    return {results[i][0] for i in order[:k]}


class AshaScheduler:
    """Asynchronous successive halving over one rung ladder."""

    def __init__(self, ladder: RungLadder):
        self.ladder = ladder
        self.recorded: dict[int, list[tuple[int, float]]] = {r: [] for r in range(len(ladder.steps))}
        self.decisions: list[dict] = []
        self._seen: set[tuple[int, int]] = set()
        self._stopped: set[int] = set()

    def on_result(self, trial_id: int, rung: int, rmse: float) -> str:
        if not 0 <= rung < len(self.ladder.steps):
            raise ValueError(f"rung {rung} outside ladder of {len(self.ladder.steps)} rungs")
        if (trial_id, rung) in self._seen:
            raise ValueError(f"duplicate report for trial {trial_id} at rung {rung}")
        if trial_id in self._stopped:
            raise ValueError(f"trial {trial_id} reported after being stopped")
        self._seen.add((trial_id, rung))
        results = self.recorded[rung]
        results.append((trial_id, float(rmse)))
        if rung == self.ladder.final:
            decision = COMPLETE
        elif len(results) == 1:
            decision = CONTINUE  # nothing to compare against yet
        elif trial_id in worst_at_rung(results, self.ladder.fraction):
            decision = STOP
        else:
            decision = CONTINUE
        if decision == STOP:
            self._stopped.add(trial_id)
        self.decisions.append({"trial": trial_id, "rung": rung, "rmse": float(rmse), "decision": decision})
        return decision


def replay_decisions(events: list[dict], ladder: RungLadder) -> list[str]:
    """Re-run the scheduler over recorded ``report`` events in their logged order."""
    sched = AshaScheduler(ladder)
    return [sched.on_result(e["trial"], e["rung"], e["rmse"]) for e in events if e.get("event") == "report"]


# ---------------------------------------------------------------------------
# driver

class TrialStopped(Exception):
    pass


class TrialContext:
    """Handed to the objective; ``report`` returns False once the trial should end."""

    def __init__(self, trial: TrialRecord, coordinator: "_Coordinator"):
        self.trial = trial
        self.ladder = coordinator.ladder
        self._coord = coordinator

    @property
    def trial_id(self) -> int:
        return self.trial.trial_id

    def report(self, rung: int, rmse: float) -> bool:
        return self._coord.report(self.trial, rung, rmse)


Objective = Callable[[dict, TrialContext], None]


class _Coordinator:
    def __init__(self, space, ladder, budget, seed, settings, sink):
        self.space = space
        self.ladder = ladder
        self.budget = budget
        self.seed = seed
        self.settings = settings
        self.sink = sink
        self.scheduler = AshaScheduler(ladder)
        self.trials: list[TrialRecord] = []
        self.lock = threading.Lock()
        self.exhausted = False

    def emit(self, event: dict) -> None:
        if self.sink is not None:
            self.sink(event)

    def next_trial(self) -> TrialRecord | None:
        with self.lock:
            if self.exhausted or len(self.trials) >= self.budget:
                return None
            tid = len(self.trials)
            try:
                config = suggest(self.trials, self.space, [self.seed, tid], self.settings)
            except SpaceExhausted:
                self.exhausted = True
                return None
            trial = TrialRecord(tid, config, status="running")
            self.trials.append(trial)
            self.emit({"event": "suggest", "trial": tid, "config": config})
            return trial

    def report(self, trial: TrialRecord, rung: int, rmse: float) -> bool:
        with self.lock:
            if trial.status != "running":
                raise TrialStopped(f"trial {trial.trial_id} is {trial.status}")
            trial.add_rung(rung, rmse)
            self.emit({"event": "report", "trial": trial.trial_id, "rung": rung, "rmse": float(rmse)})
            decision = self.scheduler.on_result(trial.trial_id, rung, rmse)
            self.emit({"event": "decision", "trial": trial.trial_id, "rung": rung, "decision": decision})
            if decision == STOP:
                trial.status = "stopped_early"
            elif decision == COMPLETE:
                trial.status = "completed"
            return decision == CONTINUE

    def finish(self, trial: TrialRecord, seconds: float, error: str | None) -> None:
        with self.lock:
            trial.seconds = seconds
            if error is not None:
                trial.status = "failed"
                trial.error = error
            elif trial.status == "running":
                # objective returned without reaching the last rung
                trial.status = "completed" if trial.rungs else "failed"
                if not trial.rungs:
                    trial.error = "objective reported no results"
            self.emit({"event": "end", "trial": trial.trial_id, "status": trial.status,
                       "best_rmse": trial.best_rmse if trial.rungs else None, "error": trial.error})


@dataclass
class SearchResult:
    best: TrialRecord
    trials: list[TrialRecord]
    space: SearchSpace

    def marginals(self) -> dict[str, dict[int, float | None]]:
        """Per dimension and value: mean best RMSE of trials with results."""
        out = {}
        scored = [t for t in self.trials if t.rungs]
        for name, choices in self.space.dims.items():
            out[name] = {}
            for v in choices:
                vals = [t.best_rmse for t in scored if t.config[name] == v]
                out[name][v] = float(np.mean(vals)) if vals else None
        return out

    def summary(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "n_trials": len(self.trials),
            "status_counts": {s: sum(t.status == s for t in self.trials) for s in STATUSES},
            "marginals": {k: {str(v): m for v, m in d.items()} for k, d in self.marginals().items()},
        }


class SearchFailed(RuntimeError):
    def __init__(self, trials: list[TrialRecord]):
        self.trials = trials
        detail = "; ".join(f"trial {t.trial_id}: {t.error}" for t in trials)
        super().__init__(f"all {len(trials)} trials failed: {detail}")


def pick_best(trials: list[TrialRecord]) -> TrialRecord:
    """Lowest best-so-far RMSE, preferring trials that completed the ladder."""
    completed = [t for t in trials if t.status == "completed" and t.rungs]
    pool = completed or [t for t in trials if t.rungs]
    if not pool:
        raise SearchFailed(trials)
    return min(pool, key=lambda t: (t.best_rmse, t.trial_id))


def run_search(space: SearchSpace, ladder: RungLadder, budget: int, objective: Objective,
               parallelism: int = 1, seed: int = 0, settings: SuggesterSettings = SuggesterSettings(),
               sink: Callable[[dict], None] | None = None) -> SearchResult:
    """Run up to ``budget`` trials, ``parallelism`` at a time.

    ``objective(config, ctx)`` trains one configuration and calls
    ``ctx.report(rung, rmse)`` at each ladder rung, returning as soon as
    ``report`` answers False.
    """
    if budget < 1 or parallelism < 1:
        raise ValueError("budget and parallelism must be >= 1")
    coord = _Coordinator(space, ladder, budget, seed, settings, sink)

    def worker():
        while True:
            trial = coord.next_trial()
            if trial is None:
                return
            t0 = time.perf_counter()
            error = None
            try:
                objective(dict(trial.config), TrialContext(trial, coord))
            except TrialStopped:
                pass
            except Exception as exc:  # a failing trial must not take the search down
                error = f"{type(exc).__name__}: {exc}"
            coord.finish(trial, time.perf_counter() - t0, error)

    if parallelism == 1:
        worker()
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(worker) for _ in range(parallelism)]
            for f in futures:
                f.result()
    best = pick_best(coord.trials)
    return SearchResult(best, coord.trials, space)


def write_history(path, events: list[dict]) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_history(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
