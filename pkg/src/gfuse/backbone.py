"""Dual-branch residual encoder and single depth decoder.

The color branch sees the RGB image; the depth branch sees the sparse depth
map (divided by ``depth_scale``) stacked with its validity mask.  Each of the
five encoder stages halves the resolution, so inputs must be multiples of 32.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

from . import tensor as T
from .nn import Conv2d, ConvTranspose2d, ParamStore
from .tensor import Tensor

NUM_SCALES = 5


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (96, 96)
    base_channels: int = 16
    channels_per_scale: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    use_confidence: bool = True
    use_depth_to_rgb: bool = True
    use_rgb_to_depth: bool = True
    use_transformer: bool = True
    # one (color_extract_reps, depth_extract_reps, fusion_reps) triple per scale 1/2 .. 1/32
    iteration_counts: list[tuple[int, int, int]] = field(default_factory=lambda: [(1, 1, 1)] * NUM_SCALES)
    attention_heads: int = 4
    attention_layers: int = 2
    mlp_ratio: int = 2
    tie_fusion_weights: bool = False
    depth_scale: float = 80.0
    replace_valid: bool = False
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.channels_per_scale = [int(c) for c in self.channels_per_scale]
        self.iteration_counts = [tuple(int(v) for v in t) for t in self.iteration_counts]
        self.validate()

    def validate(self) -> None:
        h, w = self.input_size
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            raise ValueError(f"input_size {self.input_size} must be positive multiples of 32")
        if len(self.channels_per_scale) != NUM_SCALES:
            raise ValueError(f"channels_per_scale needs {NUM_SCALES} entries, got {len(self.channels_per_scale)}")
        if self.base_channels <= 0 or any(c <= 0 for c in self.channels_per_scale):
            raise ValueError("channel widths must be strictly positive")
        if len(self.iteration_counts) != NUM_SCALES or any(len(t) != 3 for t in self.iteration_counts):
            raise ValueError(f"iteration_counts needs {NUM_SCALES} triples")
        if any(v < 1 for t in self.iteration_counts for v in t):
            raise ValueError("iteration_counts entries must be >= 1")
        if self.attention_heads < 1 or self.channels_per_scale[-1] % self.attention_heads:
            raise ValueError(
                f"attention_heads={self.attention_heads} must divide the lowest-scale width "
                f"{self.channels_per_scale[-1]}"
            )
        if self.attention_layers < 1 or self.mlp_ratio < 1:
            raise ValueError("attention_layers and mlp_ratio must be >= 1")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["iteration_counts"] = [list(t) for t in self.iteration_counts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def widths(self) -> list[int]:
        """Channel width at full resolution followed by the five stages."""
        return [self.base_channels, *self.channels_per_scale]


class BranchPair(NamedTuple):
    x: Tensor  # color features
    y: Tensor  # depth features


@dataclass
class EncoderState:
    pairs: list[BranchPair]  # index 0 is full resolution, index s is 1/2**s

    def __post_init__(self):
        if len(self.pairs) != NUM_SCALES + 1:
            raise ValueError(f"EncoderState needs {NUM_SCALES + 1} scales, got {len(self.pairs)}")


class ResidualBlock:
    """Two 3x3 convolutions with Mish and an identity skip."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.conv1 = Conv2d(store, f"{name}.conv1", channels, channels, 3)
        self.conv2 = Conv2d(store, f"{name}.conv2", channels, channels, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return x + T.mish(self.conv2(T.mish(self.conv1(x))))


class DownBlock:
    """Residual block whose first convolution has stride 2; the skip is a strided 1x1 projection."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int):
        self.conv1 = Conv2d(store, f"{name}.conv1", cin, cout, 3, stride=2)
        self.conv2 = Conv2d(store, f"{name}.conv2", cout, cout, 3)
        self.proj = Conv2d(store, f"{name}.proj", cin, cout, 1, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(x) + T.mish(self.conv2(T.mish(self.conv1(x))))


class EncoderBranch:
    def __init__(self, store: ParamStore, name: str, in_channels: int, cfg: ModelConfig, rep_index: int):
        widths = cfg.widths()
        self.stem = Conv2d(store, f"{name}.stem", in_channels, widths[0], 3)
        self.stages = []
        for s in range(1, NUM_SCALES + 1):
            reps = cfg.iteration_counts[s - 1][rep_index]
            blocks = [DownBlock(store, f"{name}.s{s}.down", widths[s - 1], widths[s])]
            blocks += [ResidualBlock(store, f"{name}.s{s}.res{r}", widths[s]) for r in range(reps)]
            self.stages.append(blocks)

    def stage(self, s: int, x: Tensor) -> Tensor:
        for block in self.stages[s - 1]:
            x = block(x)
        return x


Fuser = Callable[[int, BranchPair], BranchPair]


class Encoder:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.cfg = cfg
        self.color = EncoderBranch(store, "enc.rgb", 3, cfg, 0)
        self.depth = EncoderBranch(store, "enc.depth", 2, cfg, 1)

    def encode(self, rgb: Tensor, sparse_depth: Tensor, validity: Tensor, fuse: Fuser | None = None) -> EncoderState:
        """Run both branches; ``fuse(scale, pair)`` may rewrite each stage's output before the next stage."""
        check_inputs(rgb, sparse_depth, validity)
        depth_in = T.concat([sparse_depth * (1.0 / self.cfg.depth_scale), validity], axis=1)
        pair = BranchPair(T.mish(self.color.stem(rgb)), T.mish(self.depth.stem(depth_in)))
        pairs = [pair]
        for s in range(1, NUM_SCALES + 1):
            pair = BranchPair(self.color.stage(s, pair.x), self.depth.stage(s, pair.y))
            if fuse is not None:
                pair = fuse(s, pair)
            pairs.append(pair)
        return EncoderState(pairs)


class Decoder:
    """Deconvolution upsampling along the depth branch with additive skips."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        widths = cfg.widths()
        self.up = {}
        self.refine = {}
        for s in range(NUM_SCALES, 0, -1):
            self.up[s] = ConvTranspose2d(store, f"dec.s{s}.up", widths[s], widths[s - 1], 2, 2)
            self.refine[s] = Conv2d(store, f"dec.s{s}.refine", widths[s - 1], widths[s - 1], 3)
        self.head = Conv2d(store, "dec.head", widths[0], 1, 3, weight_init="zeros")

    def decode(self, state: EncoderState) -> Tensor:
        d = state.pairs[NUM_SCALES].y
        for s in range(NUM_SCALES, 0, -1):
            skip = state.pairs[s - 1].y
            up = T.mish(self.up[s](d))
            if up.shape != skip.shape:
                raise ValueError(f"decode: upsampled {up.shape} does not match skip {skip.shape} at scale 1/{2 ** (s - 1)}")
            d = T.mish(self.refine[s](up + skip))
        return self.head(d)


def check_inputs(rgb: Tensor, sparse_depth: Tensor, validity: Tensor) -> None:
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ValueError(f"rgb must be N x 3 x H x W, got {rgb.shape}")
    n, _, h, w = rgb.shape
    for name, t in (("sparse_depth", sparse_depth), ("validity", validity)):
        if t.shape != (n, 1, h, w):
            raise ValueError(f"{name} must be {(n, 1, h, w)}, got {t.shape}")
    if h % 32 or w % 32:
        ph, pw = (-h) % 32, (-w) % 32
        raise ValueError(f"spatial size {h}x{w} must be divisible by 32; pad by {ph} rows and {pw} columns")
