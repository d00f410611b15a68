"""The full depth-completion network: encoder, GCA fusion, global fusion, decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import NUM_SCALES, BranchPair, Decoder, Encoder, EncoderState, ModelConfig
from .gca import GCA_SCALES, GcaFlags, GcaScale
from .global_fusion import FusionParams, global_fuse
from .nn import ParamStore
from .tensor import Tensor


class DepthCompletionModel:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore(cfg.seed)
        self.encoder = Encoder(self.store, cfg)
        widths = cfg.widths()
        self.flags = GcaFlags.from_config(cfg)
        self.gca = {
            s: GcaScale(self.store, f"gca.s{s}", widths[s], cfg.iteration_counts[s - 1][2], cfg.tie_fusion_weights)
            for s in GCA_SCALES
        }
        self.fusion = None
        if cfg.use_transformer:
            h, w = cfg.input_size
            tokens = (h // 2 ** NUM_SCALES) * (w // 2 ** NUM_SCALES)
            layers = cfg.attention_layers * cfg.iteration_counts[NUM_SCALES - 1][2]
            self.fusion = FusionParams(self.store, "global", widths[NUM_SCALES], tokens, layers,
                                       cfg.attention_heads, cfg.mlp_ratio)
        self.decoder = Decoder(self.store, cfg)

    # parameters -------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.store)

    def named_parameters(self):
        return list(self.store.items())

    def count_params(self) -> int:
        return self.store.count()

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.store.state_dict()

    def load_state_dict(self, state) -> None:
        self.store.load_state_dict(state)

    def set_output_bias(self, depth_m: float) -> None:
        """Make the untrained prediction equal ``depth_m`` everywhere."""
        self.decoder.head.bias.assign(np.array([depth_m / self.cfg.depth_scale]))

    # forward ------------------------------------------------------------------
    def _fuse(self, s: int, pair: BranchPair) -> BranchPair:
        if s in self.gca:
            return self.gca[s](pair, s, self.flags)
        if s == NUM_SCALES and self.fusion is not None:
            return BranchPair(*global_fuse(pair.x, pair.y, self.fusion))
        return pair

    def encode(self, rgb, sparse_depth, validity, fuse: bool = True) -> EncoderState:
        rgb, sparse_depth, validity = (T.as_tensor(v) for v in (rgb, sparse_depth, validity))
        return self.encoder.encode(rgb, sparse_depth, validity, self._fuse if fuse else None)

    def decode(self, state: EncoderState) -> Tensor:
        return self.decoder.decode(state) * self.cfg.depth_scale

    def forward(self, rgb, sparse_depth, validity) -> Tensor:
        rgb, sparse_depth, validity = (T.as_tensor(v) for v in (rgb, sparse_depth, validity))
        if rgb.shape[2:] != tuple(self.cfg.input_size):
            raise ValueError(f"model built for {self.cfg.input_size}, got input {rgb.shape[2:]}")
        pred = self.decode(self.encode(rgb, sparse_depth, validity))
        if self.cfg.replace_valid:
            keep = 1.0 - validity.data
            pred = pred * keep + sparse_depth * validity.data
        return pred

    __call__ = forward

    def predict(self, rgb: np.ndarray, sparse_depth: np.ndarray, validity: np.ndarray) -> np.ndarray:
        """Inference on numpy arrays; accepts single samples (C x H x W) or batches."""
        single = np.ndim(rgb) == 3
        if single:
            rgb, sparse_depth, validity = rgb[None], sparse_depth[None], validity[None]
        out = self.forward(Tensor(rgb), Tensor(sparse_depth), Tensor(validity)).numpy()
        return out[0] if single else out


def count_params(model: DepthCompletionModel) -> int:
    return model.count_params()


def flops_estimate(model: DepthCompletionModel, h: int | None = None, w: int | None = None) -> int:
    """Multiply-accumulate count of one forward pass on a single H x W sample."""
    h = h or model.cfg.input_size[0]
    w = w or model.cfg.input_size[1]
    zeros = np.zeros((1, 1, h, w))
    with T.count_macs() as macs:
        model.forward(Tensor(np.zeros((1, 3, h, w))), Tensor(zeros), Tensor(zeros))
    return int(macs[0])


# Module-toggle variants: (a) no confidence gate, (b) no depth->color
# correction, (c) no color->depth completion, (d) no global fusion, (e) all on.
VARIANTS: dict[str, dict[str, bool]] = {
    "a": {"use_confidence": False},
    "b": {"use_depth_to_rgb": False},
    "c": {"use_rgb_to_depth": False},
    "d": {"use_transformer": False},
    "e": {},
}


def variant_config(cfg, variant: str):
    """Copy of ``cfg`` with the flags of one named variant applied."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    flags = dict(use_confidence=True, use_depth_to_rgb=True, use_rgb_to_depth=True, use_transformer=True)
    flags.update(VARIANTS[variant])
    return type(cfg).from_dict({**cfg.to_dict(), **flags})
