"""Procedural segmentation+depth scenes, preprocessing and the on-disk dataset format.

A scene is a far background (class 0) whose depth falls off with image row,
overlaid with rectangles and ellipses. Each foreground class sits in its own
depth band, so either task is predictable from the other up to noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptDataError
from .tensor import load_array, save_array

VOID = 255

# base RGB colour per class, cycled when there are more classes than rows
_PALETTE = np.array(
    [
        [0.55, 0.70, 0.90],
        [0.85, 0.25, 0.20],
        [0.20, 0.75, 0.30],
        [0.90, 0.80, 0.15],
        [0.60, 0.30, 0.80],
        [0.15, 0.70, 0.75],
        [0.95, 0.55, 0.10],
        [0.50, 0.50, 0.50],
    ]
)


@dataclass
class GenConfig:
    height: int = 32
    width: int = 64
    num_classes: int = 7
    num_shapes: tuple = (10, 16)
    half_height: tuple = (0.15, 0.4)
    half_width: tuple = (0.1, 0.25)
    far_bias: float = 0.3
    depth_mode: str = "inverse_disparity"
    noise_std: float = 0.03
    min_depth: float = 1.0
    near_depth: float = 1.5
    far_depth: float = 12.0
    background_depth: tuple = (40.0, 16.0)
    depth_jitter: float = 0.08
    invalid_frac: float = 0.02
    void_frac: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.num_shapes = tuple(self.num_shapes)
        self.background_depth = tuple(self.background_depth)
        self.half_height = tuple(self.half_height)
        self.half_width = tuple(self.half_width)
        if self.depth_mode not in ("raw", "inverse_disparity"):
            raise ConfigError(f"unknown depth_mode {self.depth_mode!r}")
        if self.height % 8 or self.width % 8:
            raise ConfigError("height and width must be divisible by 8")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.near_depth < self.min_depth:
            raise ConfigError("near_depth must not be below min_depth")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)

    def class_depths(self) -> np.ndarray:
        """Base depth of each foreground class (index 0 unused), geometric from far to near."""
        k = self.num_classes - 1
        steps = np.arange(k) / max(k - 1, 1)
        d = self.far_depth * (self.near_depth / self.far_depth) ** steps
        return np.concatenate([[np.nan], d])


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    crop_scales: tuple = (1.0, 1.2, 1.5)
    normalize_mean: tuple = (0.0, 0.0, 0.0)
    normalize_std: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.crop_scales = tuple(self.crop_scales)
        if any(s < 1 for s in self.crop_scales):
            raise ConfigError("crop scales must be >= 1")


@dataclass
class SceneSample:
    image: np.ndarray  # 3 x H x W
    seg: np.ndarray  # H x W, class ids or VOID
    depth: np.ndarray  # H x W, 0 marks invalid

    def copy(self) -> "SceneSample":
        return SceneSample(self.image.copy(), self.seg.copy(), self.depth.copy())


def generate_scene(cfg: GenConfig, rng: np.random.Generator, return_masks: bool = False):
    H, W, C = cfg.height, cfg.width, cfg.num_classes
    rows = np.arange(H, dtype=np.float64)[:, None]
    far, near = cfg.background_depth
    depth = np.broadcast_to(far + (near - far) * rows / max(H - 1, 1), (H, W)).copy()
    seg = np.zeros((H, W), dtype=np.uint8)

    lo, hi = cfg.num_shapes
    k = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    base = cfg.class_depths()
    # far classes are drawn more often: nearer shapes occlude them
    class_p = base[1:] ** cfg.far_bias
    class_p /= class_p.sum()
    shapes = []
    for _ in range(k):
        cls = int(rng.choice(np.arange(1, C), p=class_p))
        d = base[cls] * (1.0 + cfg.depth_jitter * rng.uniform(-1.0, 1.0))
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        hh = rng.uniform(*cfg.half_height) * H
        hw = rng.uniform(*cfg.half_width) * W
        ellipse = bool(rng.random() < 0.5)
        shapes.append((d, cls, cy, cx, hh, hw, ellipse))
    yy, xx = np.mgrid[0:H, 0:W]
    yy = yy + 0.5
    xx = xx + 0.5
    # painter's order: far shapes first so nearer ones occlude them
    for d, cls, cy, cx, hh, hw, ellipse in sorted(shapes, key=lambda s: -s[0]):
        if ellipse:
            inside = ((yy - cy) / hh) ** 2 + ((xx - cx) / hw) ** 2 <= 1.0
        else:
            inside = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        seg[inside] = cls
        depth[inside] = d

    colors = _PALETTE[np.arange(C) % len(_PALETTE)]
    shade = 0.45 + 0.55 * (cfg.near_depth / depth) ** 0.5
    image = colors[seg].transpose(2, 0, 1) * shade[None]
    image = image + cfg.noise_std * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)

    void = rng.random((H, W)) < cfg.void_frac
    invalid = void | (rng.random((H, W)) < cfg.invalid_frac)
    seg[void] = VOID
    depth[invalid] = 0.0
    if cfg.depth_mode == "inverse_disparity":
        depth = to_inverse_disparity(depth)
    sample = SceneSample(image.astype(np.float32), seg, depth.astype(np.float32))
    if return_masks:
        return sample, {"void": void, "invalid": invalid}
    return sample


def to_inverse_disparity(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth)
    out = np.zeros_like(depth, dtype=np.float64 if depth.dtype != np.float32 else np.float32)
    valid = depth > 0
    out[valid] = 1.0 / depth[valid]
    return out


def sample_rng(seed: int, index: int, split: str = "train") -> np.random.Generator:
    """Independent stream per (seed, split, sample index)."""
    split_id = {"train": 0, "eval": 1}.get(split)
    if split_id is None:
        split_id = int.from_bytes(split.encode()[:4].ljust(4, b"\0"), "little") + 2
    return np.random.default_rng(np.random.SeedSequence([seed, split_id, index]))


def generate_dataset(cfg: GenConfig, n: int, split: str = "train") -> list[SceneSample]:
    return [generate_scene(cfg, sample_rng(cfg.seed, i, split)) for i in range(n)]


# -- augmentation --------------------------------------------------------------------

def _bilinear_coords(n_out: int, n_in: int, scale: float):
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes with half-pixel-centred bilinear interpolation."""
    h, w = arr.shape[-2:]
    y0, y1, fy = _bilinear_coords(out_h, h, out_h / h)
    x0, x1, fx = _bilinear_coords(out_w, w, out_w / w)
    fy = fy[:, None]
    top = arr[..., y0, :][..., x0] * (1 - fx) + arr[..., y0, :][..., x1] * fx
    bot = arr[..., y1, :][..., x0] * (1 - fx) + arr[..., y1, :][..., x1] * fx
    return (top * (1 - fy) + bot * fy).astype(arr.dtype)


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    yi = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xi = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return arr[..., yi, :][..., xi]


def _resize_depth(depth: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear on values; a pixel stays valid only if all its source taps were valid."""
    h, w = depth.shape
    y0, y1, _ = _bilinear_coords(out_h, h, out_h / h)
    x0, x1, _ = _bilinear_coords(out_w, w, out_w / w)
    valid = depth > 0
    ok = valid[y0][:, x0] & valid[y0][:, x1] & valid[y1][:, x0] & valid[y1][:, x1]
    out = resize_bilinear(depth, out_h, out_w)
    out[~ok] = 0
    return out


def normalize_image(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=image.dtype).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=image.dtype).reshape(-1, 1, 1)
    return (image - mean) / std


def augment(sample: SceneSample, cfg: AugmentConfig, rng: np.random.Generator) -> SceneSample:
    """Joint random flip and scaled crop, then image normalisation."""
    image, seg, depth = sample.image, sample.seg, sample.depth
    H, W = seg.shape
    if rng.random() < cfg.hflip_prob:
        image, seg, depth = image[..., ::-1], seg[..., ::-1], depth[..., ::-1]
    scale = float(cfg.crop_scales[int(rng.integers(len(cfg.crop_scales)))])
    if scale != 1.0:
        sh, sw = int(round(H * scale)), int(round(W * scale))
        oy = int(rng.integers(0, sh - H + 1))
        ox = int(rng.integers(0, sw - W + 1))
        image = resize_bilinear(np.ascontiguousarray(image), sh, sw)[:, oy : oy + H, ox : ox + W]
        seg = resize_nearest(seg, sh, sw)[oy : oy + H, ox : ox + W]
        depth = _resize_depth(np.ascontiguousarray(depth), sh, sw)[oy : oy + H, ox : ox + W]
    image = normalize_image(np.ascontiguousarray(image), cfg.normalize_mean, cfg.normalize_std)
    return SceneSample(image, np.ascontiguousarray(seg), np.ascontiguousarray(depth))


def hflip(sample: SceneSample) -> SceneSample:
    return SceneSample(
        np.ascontiguousarray(sample.image[..., ::-1]),
        np.ascontiguousarray(sample.seg[..., ::-1]),
        np.ascontiguousarray(sample.depth[..., ::-1]),
    )


def image_stats(samples: list[SceneSample]) -> tuple[list[float], list[float]]:
    imgs = np.stack([s.image for s in samples]).astype(np.float64)
    mean = imgs.mean(axis=(0, 2, 3))
    std = imgs.std(axis=(0, 2, 3))
    return mean.tolist(), np.maximum(std, 1e-6).tolist()


def stack_batch(samples: list[SceneSample], mean=None, std=None):
    """Stack into (images N x 3 x H x W, seg N x H x W, depth N x 1 x H x W)."""
    imgs = np.stack([s.image for s in samples])
    if mean is not None:
        imgs = normalize_image(imgs.transpose(1, 0, 2, 3), mean, std).transpose(1, 0, 2, 3)
    seg = np.stack([s.seg for s in samples]).astype(np.int64)
    depth = np.stack([s.depth for s in samples])[:, None]
    return np.ascontiguousarray(imgs), seg, depth


# -- on-disk format -------------------------------------------------------------------

def write_dataset(directory: str | Path, samples: list[SceneSample], gen_cfg: GenConfig, split: str = "train") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_array(d / f"{i}.img", s.image)
        save_array(d / f"{i}.seg", s.seg.astype(np.uint8))
        save_array(d / f"{i}.dep", s.depth)
    mean, std = image_stats(samples) if samples else ([0.0] * 3, [1.0] * 3)
    manifest = {
        "count": len(samples),
        "H": gen_cfg.height,
        "W": gen_cfg.width,
        "C": gen_cfg.num_classes,
        "depth_mode": gen_cfg.depth_mode,
        "generator": gen_cfg.to_dict(),
        "seed": gen_cfg.seed,
        "split": split,
        "image_mean": mean,
        "image_std": std,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
        for key in ("count", "H", "W", "C", "depth_mode"):
            manifest[key]
    except FileNotFoundError:
        raise CorruptDataError(f"{path}: manifest missing") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptDataError(f"{path}: corrupt manifest ({exc})") from None
    return manifest


def read_dataset(directory: str | Path) -> tuple[list[SceneSample], dict]:
    d = Path(directory)
    manifest = read_manifest(d)
    H, W = manifest["H"], manifest["W"]
    samples = []
    for i in range(manifest["count"]):
        try:
            img = load_array(d / f"{i}.img")
            seg = load_array(d / f"{i}.seg")
            dep = load_array(d / f"{i}.dep")
        except FileNotFoundError:
            raise CorruptDataError(f"{d}: sample {i} is missing") from None
        if img.shape != (3, H, W) or seg.shape != (H, W) or dep.shape != (H, W):
            raise CorruptDataError(f"{d}: sample {i} does not match manifest size {H}x{W}")
        samples.append(SceneSample(img, seg, dep))
    return samples, manifest
