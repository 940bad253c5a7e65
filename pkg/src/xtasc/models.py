"""Shared encoder, task decoders, task-transfer networks and the composed model.

Task 1 is semantic segmentation (C logits per pixel), task 2 is depth
(one linear channel per pixel). The transfer network ``ttnet_f`` maps a
depth map to segmentation logits and ``ttnet_g`` maps segmentation
probabilities to a depth map.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, CorruptDataError
from .nn import Conv2d, ConvBNReLU, ConvReLU, Module, ResidualBlock
from .tensor import Tensor

VARIANTS = ("ST", "MT", "ALIGN", "XTC")


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 7
    encoder_stages: list = field(default_factory=lambda: [16, 32, 64])
    decoder_channels: int = 32
    decoder_blocks: int | None = None
    decoder_convs: int = 3
    ttnet_channels: list = field(default_factory=lambda: [16, 32, 64])
    variant: str = "XTC"

    def __post_init__(self):
        self.encoder_stages = list(self.encoder_stages)
        self.ttnet_channels = list(self.ttnet_channels)
        if self.decoder_blocks is None:
            self.decoder_blocks = len(self.encoder_stages) - 1
        self.validate()

    @property
    def downsamplings(self) -> int:
        return len(self.encoder_stages) - 1

    def validate(self) -> None:
        if not self.encoder_stages:
            raise ConfigError("encoder_stages must be nonempty")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.decoder_blocks != self.downsamplings:
            raise ConfigError(
                f"decoder_blocks={self.decoder_blocks} must equal the encoder's "
                f"{self.downsamplings} downsamplings"
            )
        tc = self.ttnet_channels
        if not tc or any(b <= a for a, b in zip(tc, tc[1:])):
            raise ConfigError(f"ttnet_channels must be strictly increasing, got {tc}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")

    def spatial_multiple(self) -> int:
        return int(np.lcm(2 ** self.decoder_blocks, 2 ** len(self.ttnet_channels)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Encoder(Module):
    """Stem conv, then one residual block per stage; every stage after the first halves H and W."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        s = cfg.encoder_stages
        self.stem = ConvBNReLU(cfg.in_channels, s[0], rng)
        self.stages = [
            ResidualBlock(s[i - 1] if i else s[0], s[i], rng, stride=2 if i else 1)
            for i in range(len(s))
        ]
        self.channels = list(s)

    def forward(self, x: Tensor) -> list[Tensor]:
        h = self.stem(x)
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


class DecoderBlock(Module):
    def __init__(self, cin: int, cout: int, n_convs: int, rng: np.random.Generator):
        super().__init__()
        self.convs = [ConvBNReLU(cin if i == 0 else cout, cout, rng) for i in range(n_convs)]

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv(x)
        return T.upsample_nearest2x(x)


class Decoder(Module):
    """U-Net style decoder over the encoder's stage features, deepest first.

    Block b runs at the resolution of encoder stage ``S-1-b``: it concatenates
    the upsampled output of block b-1 with that stage's features (block 0 sees
    the deepest stage alone), applies the conv stack and upsamples by 2. The
    1x1 head sees the last block's output next to the full-resolution stage.
    """

    def __init__(self, stage_channels: list[int], width: int, out_dim: int, n_convs: int, rng: np.random.Generator):
        super().__init__()
        S = len(stage_channels)
        self.n_blocks = S - 1
        blocks = []
        for b in range(self.n_blocks):
            k = S - 1 - b
            cin = stage_channels[k] if b == 0 else width + stage_channels[k]
            blocks.append(DecoderBlock(cin, width, n_convs, rng))
        self.blocks = blocks
        head_in = stage_channels[0] + (width if self.n_blocks else 0)
        self.head = Conv2d(head_in, out_dim, 1, rng)

    def forward(self, feats: list[Tensor]) -> Tensor:
        S = len(feats)
        h = feats[-1]
        for b, block in enumerate(self.blocks):
            if b > 0:
                skip = feats[S - 1 - b]
                if skip.shape[2:] != h.shape[2:]:
                    raise ShapeError(f"decoder skip {skip.shape[2:]} does not match features {h.shape[2:]}")
                h = T.concat([h, skip], axis=1)
            h = block(h)
        if self.n_blocks:
            if h.shape[2:] != feats[0].shape[2:]:
                raise ShapeError(f"decoder output {h.shape[2:]} does not match input resolution {feats[0].shape[2:]}")
            h = T.concat([h, feats[0]], axis=1)
        return self.head(h)


class TTNet(Module):
    """Small U-Net: contracting blocks (2 conv+ReLU, 2x2 max-pool) mirrored by expanding blocks."""

    def __init__(self, in_ch: int, out_ch: int, channels: list[int], rng: np.random.Generator):
        super().__init__()
        L = list(channels)
        n = len(L)
        self.levels = n
        self.down = [
            _Seq([ConvReLU(in_ch if i == 0 else L[i - 1], L[i], rng), ConvReLU(L[i], L[i], rng)])
            for i in range(n)
        ]
        up = [_Seq([ConvReLU(L[-1], L[-1], rng), ConvReLU(L[-1], L[-1], rng)])]
        for j in range(1, n):
            up.append(_Seq([ConvReLU(2 * L[n - j], L[n - 1 - j], rng), ConvReLU(L[n - 1 - j], L[n - 1 - j], rng)]))
        self.up = up
        self.head = Conv2d(2 * L[0], out_ch, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        m = 2 ** self.levels
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"TTNet input {x.shape[2:]} not divisible by {m}")
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
            h = T.maxpool2d(h)
        n = self.levels
        for j, block in enumerate(self.up):
            if j > 0:
                h = T.concat([h, skips[n - j]], axis=1)
            h = T.upsample_nearest2x(block(h))
        return self.head(T.concat([h, skips[0]], axis=1))


class _Seq(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


@dataclass
class ForwardOutput:
    direct_seg: Tensor
    direct_depth: Tensor
    transferred_seg: Tensor | None = None
    transferred_depth: Tensor | None = None
    features: list = field(default_factory=list)


def build_encoder(cfg: ModelConfig, rng: np.random.Generator) -> Encoder:
    return Encoder(cfg, rng)


def build_decoder(cfg: ModelConfig, out_dim: int, rng: np.random.Generator) -> Decoder:
    return Decoder(cfg.encoder_stages, cfg.decoder_channels, out_dim, cfg.decoder_convs, rng)


def build_ttnet(in_ch: int, out_ch: int, cfg: ModelConfig, rng: np.random.Generator) -> TTNet:
    return TTNet(in_ch, out_ch, cfg.ttnet_channels, rng)


class XTaskNet(Module):
    """Shared encoder with two decoders, plus transfer networks for ALIGN/XTC.

    The ST variant holds two independent encoder+decoder pairs instead.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        C = cfg.num_classes
        if cfg.variant == "ST":
            self.encoder1 = build_encoder(cfg, rng)
            self.dec1 = build_decoder(cfg, C, rng)
            self.encoder2 = build_encoder(cfg, rng)
            self.dec2 = build_decoder(cfg, 1, rng)
        else:
            self.encoder = build_encoder(cfg, rng)
            self.dec1 = build_decoder(cfg, C, rng)
            self.dec2 = build_decoder(cfg, 1, rng)
            if cfg.variant in ("ALIGN", "XTC"):
                self.ttnet_f = build_ttnet(1, C, cfg, rng)
                self.ttnet_g = build_ttnet(C, 1, cfg, rng)

    @property
    def has_ttnets(self) -> bool:
        return "ttnet_f" in self._modules

    def shared_reference_layer(self) -> Tensor:
        """Last conv weight of the deepest shared encoder stage."""
        if self.cfg.variant == "ST":
            raise ConfigError("the ST variant has no shared layer")
        return self.encoder.stages[-1].conv2.weight

    def param_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected N x {self.cfg.in_channels} x H x W input, got {x.shape}")
        m = self.cfg.spatial_multiple()
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"input spatial size {x.shape[2:]} must be divisible by {m}")

    def forward(self, x: Tensor, variant: str | None = None) -> ForwardOutput:
        variant = variant or self.cfg.variant
        built = self.cfg.variant
        if (variant == "ST") != (built == "ST"):
            raise ConfigError(f"a {built} model cannot run as {variant}")
        if variant in ("ALIGN", "XTC") and not self.has_ttnets:
            raise ConfigError(f"a {built} model has no transfer networks for {variant}")
        self.check_input(x)
        if variant == "ST":
            feats = self.encoder1(x)
            return ForwardOutput(self.dec1(feats), self.dec2(self.encoder2(x)), features=feats)
        feats = self.encoder(x)
        seg = self.dec1(feats)
        depth = self.dec2(feats)
        out = ForwardOutput(seg, depth, features=feats)
        if variant in ("ALIGN", "XTC"):
            out.transferred_seg = self.ttnet_f(depth)
            out.transferred_depth = self.ttnet_g(T.softmax(seg, axis=1))
        return out


def forward(net: XTaskNet, batch: Tensor, variant: str | None = None) -> ForwardOutput:
    return net.forward(batch, variant)


# -- checkpoints -----------------------------------------------------------------------

def _fname(name: str) -> str:
    return name.replace("/", "_") + ".t"


def save_checkpoint(directory: str | Path, net: XTaskNet, step: int, extra: dict | None = None) -> Path:
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    (d / "buffers").mkdir(exist_ok=True)
    params = []
    for name, p in net.named_parameters():
        T.save_array(d / "params" / _fname(name), p.data)
        params.append({"name": name, "shape": list(p.shape), "file": f"params/{_fname(name)}"})
    buffers = []
    for name, b in net.named_buffers():
        T.save_array(d / "buffers" / _fname(name), b)
        buffers.append({"name": name, "shape": list(b.shape), "file": f"buffers/{_fname(name)}"})
    dtype = next(iter(net.parameters())).data.dtype
    manifest = {
        "config": net.cfg.to_dict(),
        "dtype": "f64" if dtype == np.float64 else "f32",
        "step": step,
        "parameters": params,
        "buffers": buffers,
        "extra": extra or {},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_checkpoint(directory: str | Path) -> tuple[XTaskNet, dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise CorruptDataError(f"{d}: unreadable checkpoint manifest ({exc})") from None
    with T.precision(manifest.get("dtype", "f32")):
        net = XTaskNet(ModelConfig.from_dict(manifest["config"]))
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    for entry in manifest["parameters"]:
        arr = T.load_array(d / entry["file"])
        p = params.get(entry["name"])
        if p is None or p.shape != arr.shape:
            raise CorruptDataError(f"checkpoint parameter {entry['name']} does not fit the model")
        p.data = arr.copy()
    for entry in manifest["buffers"]:
        arr = T.load_array(d / entry["file"])
        b = buffers.get(entry["name"])
        if b is None or b.shape != arr.shape:
            raise CorruptDataError(f"checkpoint buffer {entry['name']} does not fit the model")
        b[...] = arr
    if len(manifest["parameters"]) != len(params):
        raise CorruptDataError("checkpoint is missing parameters")
    return net, manifest
