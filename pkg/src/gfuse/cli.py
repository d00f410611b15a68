"""Command-line entry point: ``gfuse <subcommand> ...``.

Every run writes a ``run_manifest.json`` into its output directory holding
the fully resolved configuration; ``gfuse replay --manifest PATH`` repeats
the run from it.  Failures print a JSON object on stderr and exit with 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__

log = logging.getLogger("gfuse")
MANIFEST_NAME = "run_manifest.json"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message)
        sys.exit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "msg": record.getMessage(), "logger": record.name})


def _configure_environment() -> None:
    level = os.environ.get("GFUSE_LOG", "warning").upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(getattr(logging, level, logging.WARNING))
    threads = os.environ.get("GFUSE_THREADS")
    if threads:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(threads))


# ---------------------------------------------------------------------------
# config helpers

def _read_json(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})") from None


def load_run_config(path: str | None):
    """``{"model": {...}, "train": {...}}``; both sections optional."""
    from .backbone import ModelConfig
    from .trainer import TrainConfig

    raw = _read_json(path) if path else {}
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise CliError(f"unknown config sections {sorted(unknown)}; expected 'model' and/or 'train'")
    return ModelConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {}))


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            return int(parts[0]), int(parts[0])
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _file_out(path: str) -> tuple[str, str]:
    """For subcommands whose --out is a file: (directory, file path)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    return directory, path


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands; each returns (output directory, resolved config, seed, outputs)

def cmd_synth_data(args):
    from .data import SceneSpec, write_dataset

    h, w = args.size
    spec = SceneSpec(sparsity=args.sparsity, pattern=args.pattern)
    counts = {"train": args.count, "val": args.val_count, "test": args.test_count}
    out = _out_dir(args.out)
    manifest = write_dataset(out, counts, h, w, spec, base_seed=args.seed)
    config = {"counts": counts, "size": [h, w], "scene_spec": asdict(spec)}
    return out, config, args.seed, [manifest]


def cmd_train(args):
    from .trainer import JsonlSink, save_checkpoint, train

    mc, tc = load_run_config(args.config)
    out = _out_dir(args.out)
    log_path = os.path.join(out, "train_log.jsonl")
    open(log_path, "w").close()
    result = train(mc, args.data, tc, report_sink=JsonlSink(log_path))
    ckpt = save_checkpoint(os.path.join(out, "checkpoint"), result.best, mc, tc)
    print(json.dumps({"best_step": result.best.step, "best_rmse": result.best.rmse}))
    return out, {"model": mc.to_dict(), "train": tc.to_dict(), "data": args.data}, tc.seed, [ckpt, log_path]


def cmd_eval(args):
    from .data import load_split
    from .objective import evaluate
    from .trainer import load_model, predict

    model = load_model(args.checkpoint)
    ds = load_split(args.data, args.split)
    report = evaluate(predict(model, ds), ds.gt, unit_scale=args.unit_scale)
    out = _out_dir(args.out)
    path = os.path.join(out, args.report)
    _write_json(path, report.to_dict())
    print(report.to_json())
    config = {"checkpoint": args.checkpoint, "data": args.data, "split": args.split, "unit_scale": args.unit_scale}
    return out, config, None, [path]


def cmd_infer(args):
    from .data import read_depth_file, write_depth_file
    from .tensor import load_tensor
    from .trainer import load_model

    model = load_model(args.checkpoint)
    rgb = load_tensor(args.rgb)
    sparse = read_depth_file(args.sparse)
    validity = (sparse > 0).astype(np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3 or rgb.shape[1:] != sparse.shape[1:]:
        raise CliError(f"rgb {rgb.shape} must be 3 x H x W matching sparse depth {sparse.shape}")
    pred = model.predict(rgb, sparse, validity)
    out_dir, path = _file_out(args.out)
    write_depth_file(path, np.clip(pred, 0.0, 65535 / 256))
    return out_dir, {"checkpoint": args.checkpoint, "rgb": args.rgb, "sparse": args.sparse}, None, [path]


def cmd_search(args):
    from .search import RungLadder, SearchSpace, run_search, write_history

    space = SearchSpace.from_dict(_read_json(args.space)) if args.space else \
        SearchSpace.iteration_counts(tuple(args.choices), args.scales)
    ladder = RungLadder(tuple(args.rungs), args.fraction)
    out = _out_dir(args.out)
    events = []
    if args.objective == "synthetic":
        objective = _synthetic_objective(space, ladder, args.seed)
        config_extra = {"objective": "synthetic"}
    else:
        from .experiments import training_objective

        if not args.data:
            raise CliError("search with the training objective needs --data")
        mc, tc = load_run_config(args.config)
        objective = training_objective(mc, tc, args.data, space)
        config_extra = {"objective": "train", "model": mc.to_dict(), "train": tc.to_dict(), "data": args.data}
    result = run_search(space, ladder, args.budget, objective, parallelism=args.parallelism,
                        seed=args.seed, sink=events.append)
    hist = os.path.join(out, "history.jsonl")
    write_history(hist, events)
    summary = os.path.join(out, "summary.json")
    _write_json(summary, {**result.summary(), "trials": [t.to_dict() for t in result.trials]})
    print(json.dumps({"best_config": result.best.config, "best_rmse": result.best.best_rmse}))
    config = {"space": space.to_dict(), "ladder": {"steps": list(ladder.steps), "fraction": ladder.fraction},
              "budget": args.budget, "parallelism": args.parallelism, **config_extra}
    return out, config, args.seed, [hist, summary]


def _synthetic_objective(space, ladder, seed):
    """Quadratic bowl around a seeded optimum with seeded per-config noise; RMSE decays as 1/rung."""
    rng = np.random.default_rng(seed)
    names = space.names
    target = {n: space.dims[n][rng.integers(len(space.dims[n]))] for n in names}

    def objective(point, ctx):
        key_seed = [seed, *[space.dims[n].index(point[n]) for n in names]]
        noise = np.random.default_rng(key_seed).normal(0.0, 0.1)
        base = 1.0 + sum((point[n] - target[n]) ** 2 for n in names) + noise
        for r in range(len(ladder.steps)):
            if not ctx.report(r, base * (1.0 + 1.0 / (r + 1))):
                return

    return objective


def cmd_pareto(args):
    from .pareto import read_points_csv, write_front_csv, write_front_json

    points = read_points_csv(args.inp)
    out_dir, path = _file_out(args.out)
    report = write_front_json(path, points)
    csv_path = os.path.splitext(path)[0] + ".csv"
    write_front_csv(csv_path, points)
    print(json.dumps({"front": report["front"]}))
    return out_dir, {"in": args.inp}, None, [path, csv_path]


def cmd_gradcheck(args):
    from . import tensor as T
    from .backbone import ModelConfig
    from .model import DepthCompletionModel
    from .objective import masked_loss

    raw = _read_json(args.config) if args.config else {}
    cfg = ModelConfig.from_dict(raw.get("model", raw))
    model = DepthCompletionModel(cfg)
    rng = np.random.default_rng(args.seed)
    h, w = cfg.input_size
    rgb = rng.random((1, 3, h, w))
    gt = rng.uniform(1.0, cfg.depth_scale, size=(1, 1, h, w))
    validity = (rng.random((1, 1, h, w)) < 0.2).astype(np.float64)
    # perturb all parameters away from zero so gated paths carry gradient
    for p in model.parameters():
        p.assign(p.data + rng.normal(0.0, 0.05, size=p.shape))

    def loss():
        pred = model(T.Tensor(rgb), T.Tensor(gt * validity), T.Tensor(validity))
        return masked_loss(pred * (1.0 / cfg.depth_scale), gt / cfg.depth_scale, (1.0, 0.0))

    err = T.grad_check(loss, model.parameters(), max_entries=args.max_entries, seed=args.seed)
    err = float(err)
    passed = bool(err < args.threshold)
    result = {"max_rel_error": err, "threshold": args.threshold, "passed": passed}
    print(json.dumps(result))
    outputs = []
    if args.out:
        out = _out_dir(args.out)
        outputs.append(os.path.join(out, "gradcheck.json"))
        _write_json(outputs[0], result)
    else:
        out = None
    if not passed:
        raise CliError(f"gradient check failed: max relative error {err:.3e} >= {args.threshold:g}")
    config = {"model": cfg.to_dict(), "max_entries": args.max_entries, "threshold": args.threshold}
    return out, config, args.seed, outputs


ABLATION_FIELDS = ["variant", "use_confidence", "use_depth_to_rgb", "use_rgb_to_depth", "use_transformer",
                   "rmse", "mae", "irmse", "imae", "rel", "delta_1_25"]


def cmd_ablate(args):
    from .experiments import run_ablation
    from .trainer import JsonlSink

    mc, tc = load_run_config(args.config)
    out = _out_dir(args.out)
    log_path = os.path.join(out, "ablation_log.jsonl")
    open(log_path, "w").close()
    rows = run_ablation(mc, tc, args.data, tuple(args.variants), tuple(args.seeds), sink=JsonlSink(log_path))
    json_path = os.path.join(out, "ablation.json")
    _write_json(json_path, rows)
    csv_path = os.path.join(out, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    config = {"model": mc.to_dict(), "train": tc.to_dict(), "data": args.data,
              "variants": list(args.variants), "seeds": list(args.seeds)}
    return out, config, None, [json_path, csv_path, log_path]


def cmd_replay(args):
    manifest = _read_json(args.manifest)
    argv = list(manifest["argv"])
    if argv and argv[0] == "replay":
        raise CliError("refusing to replay a replay manifest")
    if args.out:
        argv = _replace_out(argv, os.path.abspath(args.out))
    here = os.getcwd()
    os.chdir(manifest.get("cwd", here))
    try:
        code = dispatch(argv)
    finally:
        os.chdir(here)
    if code:
        raise CliError(f"replayed command exited with {code}")
    return None, None, None, []


def _replace_out(argv: list[str], new_out: str) -> list[str]:
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            old = argv[i + 1]
            if os.path.splitext(old)[1]:
                new_out = os.path.join(new_out, os.path.basename(old))
            argv[i + 1] = new_out
            return argv
        if a.startswith("--out="):
            argv[i] = f"--out={new_out}"
            return argv
    raise CliError("manifest command has no --out to redirect")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gfuse", description="Gated cross-attention depth completion at desk scale.")
    p.add_argument("--version", action="version", version=f"gfuse {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate a synthetic dataset")
    s.add_argument("--count", type=int, default=200, help="number of training scenes")
    s.add_argument("--val-count", type=int, default=50)
    s.add_argument("--test-count", type=int, default=0)
    s.add_argument("--size", type=_parse_size, default=(96, 96), help="N or HxW, multiples of 32")
    s.add_argument("--sparsity", type=float, default=0.05)
    s.add_argument("--pattern", choices=["uniform", "scanline"], default="uniform")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="JSON with optional 'model' and 'train' sections")
    s.add_argument("--data", required=True, help="dataset manifest.json")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--unit-scale", type=float, default=1000.0)
    s.add_argument("--report", default="report.json", help="file name inside --out")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="complete one sparse depth map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--rgb", required=True, help="3 x H x W tensor file")
    s.add_argument("--sparse", required=True, help="16-bit PGM sparse depth")
    s.add_argument("--out", required=True, help="output PGM path")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("search", help="iteration-count search")
    s.add_argument("--space", help="JSON mapping dimension name to a list of values")
    s.add_argument("--choices", type=_parse_ints, default=[1, 2], help="values per dimension for the default space")
    s.add_argument("--scales", type=int, default=5)
    s.add_argument("--budget", type=int, default=50)
    s.add_argument("--parallelism", type=int, default=1)
    s.add_argument("--rungs", type=_parse_ints, default=[200, 400, 800], help="training steps per rung")
    s.add_argument("--fraction", type=float, default=0.25)
    s.add_argument("--objective", choices=["train", "synthetic"], default="train")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("pareto", help="Pareto front of (time, rmse) points")
    s.add_argument("--in", dest="inp", required=True, help="CSV with name,time_s,rmse")
    s.add_argument("--out", required=True, help="output JSON path; a CSV is written beside it")
    s.set_defaults(func=cmd_pareto)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    s.add_argument("--config", help="JSON ModelConfig (or a file with a 'model' section)")
    s.add_argument("--max-entries", type=int, default=None, help="sampled entries per parameter")
    s.add_argument("--threshold", type=float, default=1e-5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train module-toggle variants")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--variants", type=lambda t: [v for v in t.split(",") if v], default=list("abcde"))
    s.add_argument("--seeds", type=_parse_ints, default=[0, 1, 2])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("replay", help="rerun a command from its run manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", help="redirect outputs to this directory")
    s.set_defaults(func=cmd_replay)
    return p


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.time()
    try:
        out, config, seed, outputs = args.func(args)
    except (CliError, ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 2
    if out is not None and config is not None:
        manifest = {
            "command": args.command,
            "argv": argv,
            "cwd": os.getcwd(),
            "config": config,
            "seed": seed,
            "version": __version__,
            "started": started,
            "finished": time.time(),
            "outputs": outputs,
        }
        _write_json(os.path.join(out, MANIFEST_NAME), manifest)
    return 0


def main() -> None:
    _configure_environment()
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
