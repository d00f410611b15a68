"""Gated cross-attention fusion between color and depth features.

One step, for color features ``x`` and depth features ``y``::

    f = x * sigmoid(Wf*y + bf)                        confidence gate
    u = f + sigmoid(Wp*y + bp) * tanh(Wi*y + bi)      depth corrects color
    o = sigmoid(Wo*y + bo) * tanh(Wt*u + bt)          color completes depth
    x', y' = x + u, y + o

where ``*`` is a 1x5 or 5x1 convolution that preserves spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .backbone import BranchPair, ModelConfig
from .nn import Conv2d, ParamStore
from .tensor import Tensor

GATE_NAMES = ("f", "p", "i", "o", "t")
HORIZONTAL = (1, 5)
VERTICAL = (5, 1)


@dataclass(frozen=True)
class GcaFlags:
    use_confidence: bool = True
    use_depth_to_rgb: bool = True
    use_rgb_to_depth: bool = True

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "GcaFlags":
        return cls(cfg.use_confidence, cfg.use_depth_to_rgb, cfg.use_rgb_to_depth)


class GcaParams:
    """The five gate convolutions for one scale, direction and repetition."""

    def __init__(self, store: ParamStore, name: str, channels: int, kernel: tuple[int, int]):
        if kernel not in (HORIZONTAL, VERTICAL):
            raise ValueError(f"GCA kernel must be 1x5 or 5x1, got {kernel}")
        self.kernel = kernel
        self.convs = {g: Conv2d(store, f"{name}.w{g}", channels, channels, kernel) for g in GATE_NAMES}

    def __getitem__(self, gate: str) -> Conv2d:
        return self.convs[gate]


def gca_step(x: Tensor, y: Tensor, params: GcaParams, flags: GcaFlags = GcaFlags()) -> tuple[Tensor, Tensor]:
    if x.shape != y.shape:
        raise ValueError(f"gca_step: color {x.shape} and depth {y.shape} features differ in shape")
    f = x * T.sigmoid(params["f"](y)) if flags.use_confidence else x
    if flags.use_depth_to_rgb:
        u = f + T.sigmoid(params["p"](y)) * T.tanh(params["i"](y))
    else:
        u = f
    if not flags.use_rgb_to_depth:
        return x + u, y
    o = T.sigmoid(params["o"](y)) * T.tanh(params["t"](u))
    return x + u, y + o


class GcaScale:
    """Horizontal then vertical GCA steps, repeated ``reps`` times at one scale.

    Repetitions get their own parameters unless ``tied``.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, reps: int, tied: bool = False):
        if reps < 1:
            raise ValueError(f"reps must be >= 1, got {reps}")
        self.reps = reps
        n_sets = 1 if tied else reps
        self.steps = [
            (GcaParams(store, f"{name}.r{r}.h", channels, HORIZONTAL),
             GcaParams(store, f"{name}.r{r}.v", channels, VERTICAL))
            for r in range(n_sets)
        ]

    def __call__(self, pair: BranchPair, scale: int, flags: GcaFlags = GcaFlags()) -> BranchPair:
        return gca_scale_pass(pair, scale, self.reps, self.steps, flags)


GCA_SCALES = (1, 2, 3, 4)  # 1/2 .. 1/16 resolution


def gca_scale_pass(pair: BranchPair, scale: int, reps: int, steps, flags: GcaFlags = GcaFlags()) -> BranchPair:
    """Apply ``reps`` rounds of horizontal+vertical steps at ``scale`` (1/2**scale resolution)."""
    if scale not in GCA_SCALES:
        raise ValueError(f"GCA runs at scales 1/2..1/16 (1..4), got {scale}")
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    x, y = pair
    for r in range(reps):
        horizontal, vertical = steps[r % len(steps)]
        x, y = gca_step(x, y, horizontal, flags)
        x, y = gca_step(x, y, vertical, flags)
    return BranchPair(x, y)
