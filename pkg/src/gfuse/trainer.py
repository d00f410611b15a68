"""Optimizers, learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import ModelConfig
from .data import Dataset, load_split
from .model import DepthCompletionModel
from .objective import VALID_THRESHOLD, LossWeights, evaluate, masked_loss, valid_mask
from .tensor import GradTape, NonFiniteError, Tensor


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 2
    lr_initial: float = 1e-3
    weight_decay: float = 0.05
    lr_halving_epochs: list[int] = field(default_factory=lambda: [4, 8, 10])
    eval_every_steps: int = 50
    seed: int = 0
    optimizer: str = "adamw"
    clip_norm: float | None = 10.0
    # (first epoch, alpha, beta) rows; None selects MSE then RMSE for the last sixth
    loss_schedule: list[tuple[int, float, float]] | None = None
    loss_threshold: float = VALID_THRESHOLD
    init_output_bias: bool = True
    max_steps: int | None = None
    eval_batch_size: int = 25

    def __post_init__(self):
        self.lr_halving_epochs = [int(e) for e in self.lr_halving_epochs]
        if self.loss_schedule is not None:
            self.loss_schedule = [tuple(r) for r in self.loss_schedule]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every_steps < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs, batch sizes and eval_every_steps must be >= 1")
        if not self.lr_initial > 0:
            raise ValueError(f"lr_initial must be > 0, got {self.lr_initial}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        h = self.lr_halving_epochs
        if any(b <= a for a, b in zip(h, h[1:])) or any(e < 0 or e >= self.epochs for e in h):
            raise ValueError(f"lr_halving_epochs {h} must be strictly increasing and within [0, {self.epochs})")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0 or null")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def loss_weights(self) -> LossWeights:
        if self.loss_schedule is None:
            return LossWeights.pretrain_then_finetune(self.epochs)
        return LossWeights(*self.loss_schedule[0][1:], schedule=self.loss_schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["loss_schedule"] is not None:
            d["loss_schedule"] = [list(r) for r in d["loss_schedule"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(epoch: int, lr_initial: float, halving_epochs) -> float:
    """``lr_initial`` halved once for every halving epoch already reached."""
    return lr_initial * 0.5 ** sum(1 for e in halving_epochs if epoch >= e)


# ---------------------------------------------------------------------------
# optimizers

class AdamW:
    """Adaptive moments with weight decay applied directly to the parameters."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            new = p.data * (1.0 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.assign(new)

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


class SGD:
    """Heavy-ball SGD with the same decoupled weight decay."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.0, momentum: float = 0.9):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.buf = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.momentum
            b += g
            p.assign(p.data * (1.0 - lr * self.weight_decay) - lr * b)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float | None):
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    step: int
    epoch: int
    rmse: float
    history: list[tuple[int, float]]
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        steps = [s for s, _ in self.history]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("checkpoint history steps must be strictly increasing")


def save_checkpoint(out_dir: str | os.PathLike, ckpt: Checkpoint, model_cfg: ModelConfig,
                    train_cfg: TrainConfig | None = None) -> str:
    """One tensor file per parameter plus a JSON manifest; returns the manifest path."""
    pdir = os.path.join(out_dir, "params")
    os.makedirs(pdir, exist_ok=True)
    files = {}
    for name, value in ckpt.params.items():
        fname = f"{name}.gft"
        T.save_tensor(os.path.join(pdir, fname), value)
        files[name] = os.path.join("params", fname)
    manifest = {
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "rmse": ckpt.rmse,
        "history": [list(h) for h in ckpt.history],
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "params": files,
    }
    path = os.path.join(out_dir, "checkpoint.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[Checkpoint, ModelConfig]:
    """Accepts the checkpoint directory or its ``checkpoint.json``."""
    if os.path.isdir(path):
        path = os.path.join(path, "checkpoint.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        manifest = json.load(fh)
    params = {name: T.load_tensor(os.path.join(root, rel)) for name, rel in manifest["params"].items()}
    ckpt = Checkpoint(manifest["step"], manifest["epoch"], manifest["rmse"],
                      [tuple(h) for h in manifest["history"]], params)
    return ckpt, ModelConfig.from_dict(manifest["model_config"])


def load_model(path: str | os.PathLike) -> DepthCompletionModel:
    ckpt, cfg = load_checkpoint(path)
    model = DepthCompletionModel(cfg)
    model.load_state_dict(ckpt.params)
    return model


# ---------------------------------------------------------------------------
# training

class TrainingFailed(RuntimeError):
    pass


class JsonlSink:
    """Thread-safe line-delimited JSON event log; also usable as ``report_sink``."""

    def __init__(self, path: str | os.PathLike | None = None, **static):
        self.path = path
        self.static = static
        self.events: list[dict] = []
        self._lock = threading.Lock()

    def __call__(self, event: dict) -> None:
        record = {**self.static, **event}
        with self._lock:
            self.events.append(record)
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")


def predict(model: DepthCompletionModel, ds: Dataset, batch_size: int = 25) -> np.ndarray:
    out = []
    for start in range(0, len(ds), batch_size):
        b = ds.batch(range(start, min(start + batch_size, len(ds))))
        out.append(model.predict(b.rgb, b.sparse, b.validity))
    return np.concatenate(out)


def validation_rmse(model: DepthCompletionModel, ds: Dataset, batch_size: int = 25) -> float:
    """RMSE in millimetres over all valid pixels of ``ds``."""
    return evaluate(predict(model, ds, batch_size), ds.gt, unit_scale=1000.0).rmse


@dataclass
class TrainResult:
    best: Checkpoint
    model: DepthCompletionModel
    steps: int
    stopped_early: bool
    seconds: float


def resolve_data(data) -> tuple[Dataset, Dataset]:
    if isinstance(data, (str, os.PathLike)):
        return load_split(data, "train"), load_split(data, "val")
    train_ds, val_ds = data
    return train_ds, val_ds


def train(model_cfg: ModelConfig, data, train_cfg: TrainConfig,
          report_sink: Callable[[dict], None] | None = None,
          should_continue: Callable[[int, float], bool] | None = None,
          extra_eval_steps=(), model: DepthCompletionModel | None = None) -> TrainResult:
    """Train a model and return the checkpoint with the lowest validation RMSE.

    ``data`` is a dataset manifest path or a ``(train, val)`` pair.  Each
    evaluation is reported to ``report_sink`` as ``{"event": "eval", ...}``;
    ``should_continue(step, rmse)`` may end training early by returning False.
    """
    t0 = time.perf_counter()
    sink = report_sink or (lambda event: None)
    train_ds, val_ds = resolve_data(data)
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation splits must be nonempty")
    fresh = model is None
    model = model or DepthCompletionModel(model_cfg)
    if fresh and train_cfg.init_output_bias:
        model.set_output_bias(float(train_ds.gt[valid_mask(train_ds.gt, train_cfg.loss_threshold)].mean()))

    params = model.parameters()
    opt_cls = AdamW if train_cfg.optimizer == "adamw" else SGD
    opt = opt_cls(params, weight_decay=train_cfg.weight_decay)
    weights = train_cfg.loss_weights()
    extra = set(int(s) for s in extra_eval_steps)

    history: list[tuple[int, float]] = []
    best: Checkpoint | None = None

    def run_eval(step: int, epoch: int) -> bool:
        nonlocal best
        rmse = validation_rmse(model, val_ds, train_cfg.eval_batch_size)
        if not math.isfinite(rmse):
            fail(step, f"non-finite validation rmse {rmse}")
        history.append((step, rmse))
        if best is None or rmse < best.rmse:
            best = Checkpoint(step, epoch, rmse, [], model.state_dict())
        sink({"event": "eval", "step": step, "epoch": epoch, "rmse": rmse})
        return should_continue is None or bool(should_continue(step, rmse))

    def fail(step: int, reason: str):
        sink({"event": "failure", "step": step, "reason": reason})
        raise TrainingFailed(f"training aborted at step {step}: {reason}")

    step = 0
    stopped = not run_eval(0, 0)
    n = len(train_ds)
    epoch = 0
    while not stopped and epoch < train_cfg.epochs:
        lr = learning_rate(epoch, train_cfg.lr_initial, train_cfg.lr_halving_epochs)
        alpha_beta = weights.at(epoch)
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, train_cfg.batch_size):
            b = train_ds.batch(order[start:start + train_cfg.batch_size])
            try:
                with GradTape() as tape:
                    pred = model(Tensor(b.rgb), Tensor(b.sparse), Tensor(b.validity))
                    loss = masked_loss(pred, b.gt, alpha_beta, train_cfg.loss_threshold)
                grads = tape.gradient(loss, params)
            except NonFiniteError as exc:
                fail(step, f"non-finite value: {exc}")
            if not all(np.all(np.isfinite(g)) for g in grads):
                fail(step, "non-finite gradient")
            grads, _ = clip_by_global_norm(grads, train_cfg.clip_norm)
            opt.step(grads, lr)
            losses.append(loss.item())
            step += 1
            at_end = train_cfg.max_steps is not None and step >= train_cfg.max_steps
            if step % train_cfg.eval_every_steps == 0 or step in extra or at_end:
                if not run_eval(step, epoch):
                    stopped = True
            if stopped or at_end:
                break
        sink({"event": "epoch", "epoch": epoch, "step": step, "lr": lr, "mean_loss": float(np.mean(losses))})
        if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
            break
        epoch += 1
    if history[-1][0] != step:
        run_eval(step, min(epoch, train_cfg.epochs - 1))

    best.history = list(history)
    model.load_state_dict(best.params)
    seconds = time.perf_counter() - t0
    sink({"event": "done", "step": step, "best_step": best.step, "best_rmse": best.rmse, "seconds": seconds})
    return TrainResult(best, model, step, stopped, seconds)
