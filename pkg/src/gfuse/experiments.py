"""Multi-run drivers: module ablations and the training objective used by search."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .backbone import ModelConfig
from .model import variant_config
from .objective import evaluate
from .search import SearchSpace, TrialContext
from .trainer import TrainConfig, predict, resolve_data, train


def run_ablation(model_cfg: ModelConfig, train_cfg: TrainConfig, data, variants=("a", "b", "c", "d", "e"),
                 seeds=(0, 1, 2), sink=None) -> list[dict]:
    """Train every variant under every seed with otherwise identical settings.

    Returns one row per variant with per-seed and mean validation metrics.
    The seed sets both the parameter initialisation and the batch order.
    """
    train_ds, val_ds = resolve_data(data)
    rows = []
    for v in variants:
        per_seed = []
        for s in seeds:
            mc = replace(variant_config(model_cfg, v), seed=int(s))
            tc = replace(train_cfg, seed=int(s))
            tagged = (lambda e, v=v, s=s: sink({**e, "variant": v, "seed": s})) if sink else None
            result = train(mc, (train_ds, val_ds), tc, report_sink=tagged)
            report = evaluate(predict(result.model, val_ds, tc.eval_batch_size), val_ds.gt)
            per_seed.append(report.to_dict())
        keys = ("rmse", "mae", "irmse", "imae", "rel", "delta_1_25")
        row = {"variant": v, **{k: float(np.mean([r[k] for r in per_seed])) for k in keys},
               "seeds": list(seeds), "per_seed_rmse": [r["rmse"] for r in per_seed]}
        flags = variant_config(model_cfg, v)
        row.update({f: getattr(flags, f) for f in
                    ("use_confidence", "use_depth_to_rgb", "use_rgb_to_depth", "use_transformer")})
        rows.append(row)
    return rows


def training_objective(model_cfg: ModelConfig, train_cfg: TrainConfig, data, space: SearchSpace):
    """Objective for :func:`gfuse.search.run_search` that trains a model per trial.

    Each rung of the ladder is a training-step budget; the trial reports its
    best validation RMSE so far when it reaches one.
    """
    train_ds, val_ds = resolve_data(data)

    def objective(point: dict, ctx: TrialContext) -> None:
        steps = ctx.ladder.steps
        per_epoch = math.ceil(len(train_ds) / train_cfg.batch_size)
        epochs = max(train_cfg.epochs, math.ceil(steps[-1] / per_epoch))
        mc = replace(model_cfg, iteration_counts=space.to_iteration_counts(point))
        tc = replace(train_cfg, epochs=epochs, max_steps=steps[-1])
        rung_of = {s: i for i, s in enumerate(steps)}
        best = [math.inf]

        def should_continue(step: int, rmse: float) -> bool:
            best[0] = min(best[0], rmse)
            if step in rung_of:
                return ctx.report(rung_of[step], best[0])
            return True

        train(mc, (train_ds, val_ds), tc, should_continue=should_continue, extra_eval_steps=steps)

    return objective
