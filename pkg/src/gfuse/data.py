"""Synthetic RGB / sparse-depth / ground-truth scenes and depth-file I/O.

Scenes imitate a driving view: a ground plane whose depth grows towards a
horizon, a far backdrop, and a few box-shaped occluders with planar depth.
The RGB image carries depth-correlated shading plus stripes and noise
patches that have no depth counterpart, so color edges outnumber depth
edges.

Depth files are 16-bit PGM (P5, maxval 65535, big-endian samples) using the
KITTI value convention: ``meters = raw / 256`` and raw 0 marks an invalid
pixel.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor.io import load_tensor, save_tensor

PATTERNS = ("uniform", "scanline")


@dataclass
class SceneSpec:
    sparsity: float = 0.05
    pattern: str = "uniform"
    min_depth: float = 1.0
    max_depth: float = 80.0
    n_objects: tuple[int, int] = (2, 5)
    n_texture_patches: tuple[int, int] = (5, 9)
    noise_sigma: float = 0.0  # gaussian noise on sparse samples, meters

    def __post_init__(self):
        self.n_objects = tuple(self.n_objects)
        self.n_texture_patches = tuple(self.n_texture_patches)
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown sparsity pattern {self.pattern!r}; choose from {PATTERNS}")
        if not 0.0 < self.sparsity < 1.0:
            raise ValueError(f"sparsity must lie in (0, 1), got {self.sparsity}")
        if not 0.0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if self.max_depth * 256 > 65535:
            raise ValueError("max_depth above 255.99 m cannot be stored in a 16-bit depth file")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Scene:
    rgb: np.ndarray           # 3 x H x W in [0, 1]
    gt_depth: np.ndarray      # 1 x H x W, meters
    sparse_depth: np.ndarray  # 1 x H x W, 0 where invalid
    validity: np.ndarray      # 1 x H x W in {0, 1}


def _depth_layers(rng: np.random.Generator, h: int, w: int, spec: SceneSpec):
    """Ground-truth depth plus an integer label map of the surface each pixel belongs to."""
    rows = np.arange(h, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(w, dtype=np.float64)[None, :] + 0.5
    horizon = rng.uniform(0.3, 0.45) * h
    near = rng.uniform(spec.min_depth + 1.0, spec.min_depth + 4.0)
    far = rng.uniform(0.7, 0.95) * spec.max_depth

    # ground: depth inversely proportional to distance below the horizon
    below = np.maximum(rows - horizon, 1e-3)
    ground = near * (h - horizon) / below * (1.0 + 0.05 * (cols - w / 2) / w)
    backdrop = far + rng.uniform(-0.05, 0.05) * far * (cols / w)
    depth = np.where(rows > horizon, np.minimum(ground, backdrop), backdrop)
    labels = np.where((rows > horizon) & (ground < backdrop), 1, 0) + np.zeros((h, w), dtype=np.int64)

    for k in range(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1)):
        d0 = rng.uniform(spec.min_depth + 2.0, 0.6 * spec.max_depth)
        # objects stand on the ground: bottom edge at the ground row of their depth
        base = min(horizon + near * (h - horizon) / d0, h - 1.0)
        height = rng.uniform(0.15, 0.5) * h * min(1.0, 8.0 / d0 + 0.2)
        width = rng.uniform(0.1, 0.35) * w * min(1.0, 8.0 / d0 + 0.2)
        left = rng.uniform(-0.1 * w, w - 0.5 * width)
        top = base - height
        inside = (rows >= top) & (rows <= base) & (cols >= left) & (cols <= left + width)
        gx, gy = rng.uniform(-0.3, 0.3, size=2) * d0 / w
        plane = d0 + gx * (cols - left) + gy * (rows - top)
        closer = inside & (plane < depth)
        depth = np.where(closer, plane, depth)
        labels = np.where(closer, k + 2, labels)

    return np.clip(depth, spec.min_depth, spec.max_depth), labels


def _render_rgb(rng: np.random.Generator, depth: np.ndarray, labels: np.ndarray, spec: SceneSpec):
    h, w = depth.shape
    n_labels = int(labels.max()) + 1
    palette = rng.uniform(0.15, 0.9, size=(n_labels, 3))
    shade = 1.0 - 0.6 * (depth - spec.min_depth) / (spec.max_depth - spec.min_depth)
    rgb = palette[labels].transpose(2, 0, 1) * shade[None]

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    for _ in range(rng.integers(spec.n_texture_patches[0], spec.n_texture_patches[1] + 1)):
        ph, pw = rng.integers(h // 8, h // 2 + 1), rng.integers(w // 8, w // 2 + 1)
        top, left = rng.integers(0, h - ph + 1), rng.integers(0, w - pw + 1)
        patch = (rows >= top) & (rows < top + ph) & (cols >= left) & (cols < left + pw)
        if rng.random() < 0.5:
            period = rng.integers(3, 9)
            angle = rng.uniform(0, np.pi)
            phase = (np.cos(angle) * cols + np.sin(angle) * rows) / period
            texture = 0.35 * (np.floor(phase) % 2 - 0.5)
        else:
            texture = 0.25 * rng.standard_normal((h, w))
        tint = rng.uniform(0.5, 1.0, size=3)
        rgb = rgb + np.where(patch, texture, 0.0)[None] * tint[:, None, None]
    return np.clip(rgb, 0.0, 1.0)


def sparsify(gt_depth: np.ndarray, pattern: str = "uniform", rate: float = 0.05, seed: int = 0):
    """Return ``(sparse_depth, validity)`` sampled from ``gt_depth`` (... x H x W).

    ``uniform`` keeps each pixel independently with probability ``rate``.
    ``scanline`` keeps ``ceil(rate * H)`` evenly spaced rows and, on each,
    evenly spaced columns so that the overall kept fraction is about ``rate``.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"sparsity rate must lie in (0, 1), got {rate}")
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    h, w = gt_depth.shape[-2:]
    if pattern == "uniform":
        rng = np.random.default_rng(seed)
        mask = rng.random(gt_depth.shape) < rate
    elif pattern == "scanline":
        rows, cols = scanline_layout(h, w, rate)
        mask2 = np.zeros((h, w), dtype=bool)
        mask2[np.ix_(rows, cols)] = True
        mask = np.broadcast_to(mask2, gt_depth.shape)
    else:
        raise ValueError(f"unknown sparsity pattern {pattern!r}; choose from {PATTERNS}")
    validity = mask.astype(np.float64)
    return gt_depth * validity, validity


def scanline_layout(h: int, w: int, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices kept by the scanline pattern."""
    n_rows = min(h, math.ceil(rate * h))
    rows = np.floor((np.arange(n_rows) + 0.5) * h / n_rows).astype(int)
    per_row = min(w, max(1, round(rate * h * w / n_rows)))
    cols = np.floor((np.arange(per_row) + 0.5) * w / per_row).astype(int)
    return rows, cols


def generate_scene(seed: int, h: int = 96, w: int = 96, spec: SceneSpec | None = None) -> Scene:
    if h % 32 or w % 32 or h <= 0 or w <= 0:
        raise ValueError(f"scene size {h}x{w} must be positive multiples of 32")
    spec = spec or SceneSpec()
    rng = np.random.default_rng([seed, 0])
    depth, labels = _depth_layers(rng, h, w, spec)
    rgb = _render_rgb(rng, depth, labels, spec)
    gt = depth[None]
    sparse, validity = sparsify(gt, spec.pattern, spec.sparsity, seed=[seed, 1])
    if spec.noise_sigma > 0:
        noise = np.random.default_rng([seed, 2]).normal(0.0, spec.noise_sigma, size=gt.shape)
        sparse = np.where(validity > 0, np.clip(sparse + noise, 1.0 / 256, None), 0.0)
    return Scene(rgb=rgb, gt_depth=gt, sparse_depth=sparse, validity=validity)


# ---------------------------------------------------------------------------
# depth files

class DepthFileError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def write_depth_file(path: str | os.PathLike, depth: np.ndarray) -> None:
    """Write meters as 16-bit PGM; values are rounded to the nearest 1/256 m."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3 and d.shape[0] == 1:
        d = d[0]
    if d.ndim != 2:
        raise ValueError(f"depth map must be H x W or 1 x H x W, got {np.shape(depth)}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("depth map must be finite and non-negative")
    raw = np.rint(d * 256.0)
    if raw.max(initial=0) > 65535:
        raise ValueError(f"depth {d.max():.3f} m exceeds the 16-bit range (255.99 m)")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(raw.astype(">u2").tobytes())


def parse_depth_bytes(buf: bytes) -> np.ndarray:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise DepthFileError(f"truncated PGM header at byte {pos}")
        fields.append((m.group(1), m.start(1)))
        pos = m.end(1)
    (magic, off0), (ws, off1), (hs, off2), (mv, off3) = fields
    if magic != b"P5":
        raise DepthFileError(f"not a binary PGM (magic {magic!r}) at byte {off0}")
    try:
        w, h, maxval = int(ws), int(hs), int(mv)
    except ValueError:
        bad = next(off for tok, off in fields[1:] if not tok.isdigit())
        raise DepthFileError(f"non-numeric PGM header field at byte {bad}") from None
    if w <= 0 or h <= 0:
        raise DepthFileError(f"invalid PGM size {w}x{h} at byte {off1}")
    if maxval != 65535:
        raise DepthFileError(f"PGM maxval must be 65535 for 16-bit depth, got {maxval} at byte {off3}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DepthFileError(f"missing whitespace after PGM header at byte {pos}")
    start = pos + 1
    need = 2 * w * h
    if len(buf) - start < need:
        raise DepthFileError(f"truncated PGM payload: need {need} bytes from byte {start}, have {len(buf) - start}")
    raw = np.frombuffer(buf, dtype=">u2", count=w * h, offset=start).reshape(h, w)
    return raw.astype(np.float64)[None] / 256.0


def read_depth_file(path: str | os.PathLike) -> np.ndarray:
    """Depth in meters as a 1 x H x W array; invalid pixels read as 0."""
    with open(path, "rb") as fh:
        return parse_depth_bytes(fh.read())


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    rgb: np.ndarray       # N x 3 x H x W
    sparse: np.ndarray    # N x 1 x H x W
    validity: np.ndarray  # N x 1 x H x W
    gt: np.ndarray        # N x 1 x H x W
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.rgb.shape[0]

    def batch(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.rgb[idx], self.sparse[idx], self.validity[idx], self.gt[idx],
                       [self.seeds[i] for i in idx] if self.seeds else [])

    @classmethod
    def from_scenes(cls, scenes: list[Scene], seeds=()) -> "Dataset":
        if not scenes:
            raise ValueError("dataset needs at least one scene")
        return cls(
            np.stack([s.rgb for s in scenes]),
            np.stack([s.sparse_depth for s in scenes]),
            np.stack([s.validity for s in scenes]),
            np.stack([s.gt_depth for s in scenes]),
            list(seeds),
        )


SPLITS = ("train", "val", "test")


def split_seeds(counts: dict[str, int], base_seed: int = 0) -> dict[str, list[int]]:
    """Consecutive, disjoint seed ranges per split in train/val/test order."""
    out, start = {}, base_seed
    for name in SPLITS:
        n = int(counts.get(name, 0))
        if n < 0:
            raise ValueError(f"negative scene count for split {name!r}")
        out[name] = list(range(start, start + n))
        start += n
    return out


def make_dataset(seeds, h: int, w: int, spec: SceneSpec | None = None) -> Dataset:
    seeds = list(seeds)
    return Dataset.from_scenes([generate_scene(s, h, w, spec) for s in seeds], seeds)


def write_dataset(out_dir: str | os.PathLike, counts: dict[str, int], h: int, w: int,
                  spec: SceneSpec | None = None, base_seed: int = 0) -> str:
    """Write scenes to ``out_dir`` and return the manifest path.

    Depth maps go to PGM; RGB goes to lossless tensor files so training from
    disk sees exactly the generated colors.
    """
    spec = spec or SceneSpec()
    os.makedirs(out_dir, exist_ok=True)
    seeds = split_seeds(counts, base_seed)
    manifest = {"size": [h, w], "scene_spec": asdict(spec), "base_seed": base_seed, "splits": {}}
    for name, split in seeds.items():
        entries = []
        for s in split:
            scene = generate_scene(s, h, w, spec)
            stem = f"{name}_{s:06d}"
            paths = {"rgb": f"{stem}_rgb.gft", "sparse": f"{stem}_sparse.pgm", "gt": f"{stem}_gt.pgm"}
            save_tensor(os.path.join(out_dir, paths["rgb"]), scene.rgb)
            write_depth_file(os.path.join(out_dir, paths["sparse"]), scene.sparse_depth)
            write_depth_file(os.path.join(out_dir, paths["gt"]), scene.gt_depth)
            entries.append({"seed": s, **paths})
        manifest["splits"][name] = entries
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_split(manifest_path: str | os.PathLike, split: str) -> Dataset:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if split not in manifest.get("splits", {}):
        raise KeyError(f"manifest {manifest_path} has no split {split!r}")
    entries = manifest["splits"][split]
    if not entries:
        raise ValueError(f"split {split!r} in {manifest_path} is empty")
    root = os.path.dirname(os.path.abspath(manifest_path))
    rgb, sparse, gt = [], [], []
    for e in entries:
        rgb.append(load_tensor(os.path.join(root, e["rgb"])))
        sparse.append(read_depth_file(os.path.join(root, e["sparse"])))
        gt.append(read_depth_file(os.path.join(root, e["gt"])))
    sparse_arr = np.stack(sparse)
    return Dataset(np.stack(rgb), sparse_arr, (sparse_arr > 0).astype(np.float64), np.stack(gt),
                   [e["seed"] for e in entries])


def nearest_fill(sparse: np.ndarray, validity: np.ndarray) -> np.ndarray:
    """Baseline: every pixel takes the depth of its nearest valid pixel (per sample)."""
    from scipy.ndimage import distance_transform_edt

    out = np.empty_like(sparse, dtype=np.float64)
    flat_s = sparse.reshape(-1, *sparse.shape[-2:])
    flat_v = validity.reshape(-1, *validity.shape[-2:])
    flat_o = out.reshape(-1, *sparse.shape[-2:])
    for k in range(flat_s.shape[0]):
        if not flat_v[k].any():
            raise ValueError("nearest_fill needs at least one valid pixel per map")
        _, (ri, ci) = distance_transform_edt(flat_v[k] == 0, return_indices=True)
        flat_o[k] = flat_s[k][ri, ci]
    return out
