"""Training loop, optimizer, schedule and evaluation runner."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import AugmentConfig, SceneSample, augment, normalize_image, read_dataset, stack_batch
from .errors import ConfigError, DivergenceError, ShapeError
from .losses import LossConfig, Weighting, compute_losses, depth_l1, gradnorm_update, seg_ce
from .metrics import MetricsReport, build_report, report_delta_m
from .models import VARIANTS, ModelConfig, XTaskNet, load_checkpoint, save_checkpoint
from .tensor import Tensor


@dataclass
class TrainConfig:
    variant: str = "XTC"
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-4
    lr_halve_every: int = 25
    lambda1: float = 0.01
    lambda2: float = 0.01
    weighting: str = "uncertainty"
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    seed: int = 0
    dataset_dir: str | None = None
    eval_dir: str | None = None
    out_dir: str | None = None
    eval_every: int = 10
    precision: str = "f32"
    augment: bool = True
    hflip_prob: float = 0.5
    crop_scales: tuple = (1.0, 1.2, 1.5)
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.crop_scales = tuple(self.crop_scales)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch statistics")
        if self.lr_halve_every < 1:
            raise ConfigError("lr_halve_every must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda1, self.lambda2, self.effective_weighting(), self.gradnorm_alpha, self.gradnorm_lr)

    def effective_weighting(self) -> str:
        # two disjoint networks: a task weight only rescales one network's step size
        return "equal" if self.variant == "ST" else self.weighting

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        d = dict(self.model)
        d["variant"] = self.variant
        if num_classes is not None:
            d["num_classes"] = num_classes
        return ModelConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- optimizer --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: list[Tensor], grads: list, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; a missing gradient counts as zero."""
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(epoch: int, lr0: float, halve_every: int) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be nonnegative")
    return lr0 * 0.5 ** (epoch // halve_every)


# -- batching ---------------------------------------------------------------------------

def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


_INIT, _SHUFFLE, _AUGMENT = 1, 2, 3


def make_batch(samples: list[SceneSample], mean, std, aug: AugmentConfig | None, rng: np.random.Generator | None):
    if aug is None:
        prepared = [SceneSample(normalize_image(s.image, mean, std), s.seg, s.depth) for s in samples]
    else:
        prepared = [augment(s, aug, rng) for s in samples]
    return stack_batch(prepared)


def _check_fits(cfg: ModelConfig, samples: list[SceneSample]) -> None:
    m = cfg.spatial_multiple()
    H, W = samples[0].seg.shape
    if H % m or W % m:
        raise ShapeError(f"dataset size {H}x{W} is not divisible by {m} required by the model")


# -- training ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    net: XTaskNet
    weighting: Weighting
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    final_checkpoint: Path | None = None
    seconds: float = 0.0


def train(cfg: TrainConfig, train_samples: list[SceneSample] | None = None,
          eval_samples: list[SceneSample] | None = None, norm: tuple | None = None) -> TrainResult:
    """Run the full protocol. Samples may be passed in memory instead of via directories."""
    start = time.perf_counter()
    num_classes = None
    if train_samples is None:
        if cfg.dataset_dir is None:
            raise ConfigError("no training data given")
        train_samples, manifest = read_dataset(cfg.dataset_dir)
        num_classes = manifest["C"]
        norm = norm or (manifest["image_mean"], manifest["image_std"])
    if eval_samples is None and cfg.eval_dir is not None:
        eval_samples, _ = read_dataset(cfg.eval_dir)
    if norm is None:
        norm = ([0.0] * 3, [1.0] * 3)
    mean, std = norm
    if len(train_samples) < cfg.batch_size:
        raise ConfigError("fewer training samples than one batch")

    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.json").write_text(json.dumps(cfg.to_dict(), indent=1))
        loss_log = open(out / "losses.ndjson", "w")
        metric_log = open(out / "metrics.ndjson", "w")

    with T.precision(cfg.precision):
        mcfg = cfg.model_config(num_classes)
        _check_fits(mcfg, train_samples)
        net = XTaskNet(mcfg, _rng(cfg.seed, _INIT))
        loss_cfg = cfg.loss_config()
        weighting = Weighting(loss_cfg.weighting)
        params = net.parameters() + weighting.parameters()
        opt = Adam(params)
        shuffle_rng = _rng(cfg.seed, _SHUFFLE)
        aug = AugmentConfig(cfg.hflip_prob, cfg.crop_scales, tuple(mean), tuple(std)) if cfg.augment else None
        result = TrainResult(net, weighting)
        n = len(train_samples)
        steps_per_epoch = n // cfg.batch_size
        step = 0
        try:
            for epoch in range(cfg.epochs):
                lr = lr_schedule(epoch, cfg.lr, cfg.lr_halve_every)
                order = shuffle_rng.permutation(n)
                net.train()
                for b in range(steps_per_epoch):
                    idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                    batch = [train_samples[i] for i in idx]
                    x, y_seg, y_dep = make_batch(batch, mean, std, aug, _rng(cfg.seed, _AUGMENT, epoch, b))
                    rec = train_step(net, weighting, opt, x, y_seg, y_dep, cfg.variant, loss_cfg, lr)
                    rec.update(epoch=epoch, step=step, lr=lr)
                    result.losses.append(rec)
                    if out is not None:
                        loss_log.write(json.dumps(rec) + "\n")
                    step += 1
                last = epoch == cfg.epochs - 1
                if eval_samples and ((epoch + 1) % cfg.eval_every == 0 or last):
                    ev = evaluate(net, eval_samples, norm, loss_cfg=loss_cfg)
                    rec = {"epoch": epoch, "step": step, **ev.to_dict()}
                    result.evals.append(rec)
                    if out is not None:
                        metric_log.write(json.dumps(rec) + "\n")
                        metric_log.flush()
                if out is not None and ((epoch + 1) % cfg.eval_every == 0 or last):
                    extra = {"epoch": epoch, "weighting": weighting.state_dict(), "norm": [list(mean), list(std)]}
                    save_checkpoint(out / f"ckpt_epoch{epoch + 1:04d}", net, step, extra)
                    if last:
                        result.final_checkpoint = save_checkpoint(out / "final", net, step, extra)
        finally:
            if out is not None:
                loss_log.close()
                metric_log.close()
    result.seconds = time.perf_counter() - start
    return result


def train_step(net: XTaskNet, weighting: Weighting, opt: Adam, x, y_seg, y_dep, variant: str,
               loss_cfg: LossConfig, lr: float) -> dict:
    out = net(Tensor(x))
    objective, L1, L2, report = compute_losses(out, y_seg, y_dep, variant, loss_cfg, weighting)
    if not math.isfinite(report.total):
        raise DivergenceError(f"loss became {report.total}")
    shared = None
    if weighting.scheme == "gradnorm":
        ref = net.shared_reference_layer()
        shared = [T.grad(L1, [ref])[0], T.grad(L2, [ref])[0]]
        if weighting.initial_losses is None:
            weighting.initial_losses = np.array([report.L1, report.L2])
    opt.zero_grad()
    T.backward(objective)
    opt.step(lr)
    if shared is not None:
        weighting.omega = gradnorm_update(shared, weighting.initial_losses, [report.L1, report.L2], weighting.omega,
                                          loss_cfg.gradnorm_alpha, loss_cfg.gradnorm_lr)
    return report.to_dict()


# -- evaluation ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    metrics: MetricsReport
    seg_loss: float
    depth_loss: float
    delta_m: float | None = None

    def to_dict(self) -> dict:
        return {"metrics": self.metrics.to_dict(), "seg_loss": self.seg_loss, "depth_loss": self.depth_loss,
                "delta_m": self.delta_m}


def predict(net: XTaskNet, samples: list[SceneSample], norm, batch_size: int = 16):
    """Eval-mode direct predictions: (class ids N x H x W, seg logits, depth N x H x W)."""
    mean, std = norm
    net.eval()
    ids, logits, depth = [], [], []
    dtype = next(iter(net.parameters())).data.dtype
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            x, _, _ = make_batch(samples[i : i + batch_size], mean, std, None, None)
            out = net(Tensor(x, dtype=dtype))
            logits.append(out.direct_seg.data)
            ids.append(out.direct_seg.data.argmax(axis=1))
            depth.append(out.direct_depth.data[:, 0])
    net.train()
    return np.concatenate(ids), np.concatenate(logits), np.concatenate(depth)


def evaluate(net_or_dir, samples: list[SceneSample], norm=None, baseline: MetricsReport | None = None,
             loss_cfg: LossConfig | None = None) -> EvalResult:
    if isinstance(net_or_dir, XTaskNet):
        net = net_or_dir
    else:
        net, manifest = load_checkpoint(net_or_dir)
        if norm is None:
            norm = tuple(manifest.get("extra", {}).get("norm", ([0.0] * 3, [1.0] * 3)))
    if norm is None:
        norm = ([0.0] * 3, [1.0] * 3)
    ignore = (loss_cfg or LossConfig()).seg_ignore_index
    H, W = samples[0].seg.shape
    if net.cfg.num_classes < 2 or H % net.cfg.spatial_multiple() or W % net.cfg.spatial_multiple():
        raise ConfigError("checkpoint does not fit the dataset")
    seg_gt = np.stack([s.seg for s in samples])
    if seg_gt[seg_gt != ignore].max(initial=0) >= net.cfg.num_classes:
        raise ConfigError("dataset has more classes than the checkpoint")
    dep_gt = np.stack([s.depth for s in samples]).astype(np.float64)
    ids, logits, dep = predict(net, samples, norm)
    report = build_report(ids, seg_gt, dep, dep_gt, net.cfg.num_classes, ignore)
    with T.precision("f64"):
        seg_loss = seg_ce(Tensor(logits.astype(np.float64)), seg_gt, ignore).item()
        depth_loss = depth_l1(Tensor(dep.astype(np.float64)), dep_gt).item()
    dm = report_delta_m(report, baseline) if baseline is not None else None
    return EvalResult(report, seg_loss, depth_loss, dm)
