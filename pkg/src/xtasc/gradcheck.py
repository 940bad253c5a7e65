"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import LossConfig, Weighting, compute_losses
from .models import ModelConfig, XTaskNet
from .tensor import Tensor

DENOM_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = DENOM_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], arr: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place) at ``indices``."""
    out = np.empty(len(indices))
    for k, idx in enumerate(indices):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def check_op(fn: Callable[..., Tensor], inputs: list[np.ndarray], seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error of d<r, fn(inputs)>/d(inputs) for a fixed random projection r."""
    with T.precision("f64"):
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
        out = fn(*ts)
        r = np.random.default_rng(seed).standard_normal(out.shape)
        loss = (out * Tensor(r)).sum()
        analytic = T.grad(loss, ts)

        def f():
            return float((fn(*ts).data * r).sum())

        worst = 0.0
        for t, g in zip(ts, analytic):
            idx = list(np.ndindex(t.shape))
            num = numeric_grad(f, t.data, idx, h)
            worst = max(worst, relative_error(g.reshape(-1), num))
    return worst


@dataclass
class GradcheckReport:
    variant: str
    max_rel_error: float
    per_group: dict = field(default_factory=dict)
    zero_groups: list = field(default_factory=list)
    checked: int = 0

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def tiny_model_config(variant: str = "XTC", num_classes: int = 3) -> ModelConfig:
    return ModelConfig(in_channels=3, num_classes=num_classes, encoder_stages=[3, 4], decoder_channels=4,
                       decoder_convs=1, ttnet_channels=[3, 4], variant=variant)


def gradcheck(variant: str = "XTC", size: int = 8, batch: int = 2, seed: int = 0, per_tensor: int = 6,
              weighting: str = "uncertainty", lambdas=(0.3, 0.3), h: float = 1e-5,
              model_cfg: ModelConfig | None = None) -> GradcheckReport:
    """Compare analytic gradients of the total loss with central differences, per parameter group.

    The cross-task targets are the detached direct predictions; they are frozen
    at the unperturbed point so both routes differentiate the same function.
    """
    rng = np.random.default_rng(seed)
    with T.precision("f64"):
        cfg = model_cfg or tiny_model_config(variant)
        net = XTaskNet(cfg, np.random.default_rng(seed + 1))
        C = cfg.num_classes
        x = rng.standard_normal((batch, cfg.in_channels, size, size))
        y_seg = rng.integers(0, C, (batch, size, size))
        y_seg[rng.random(y_seg.shape) < 0.1] = 255
        y_dep = rng.uniform(0.1, 1.0, (batch, 1, size, size))
        y_dep[rng.random(y_dep.shape) < 0.1] = 0.0
        loss_cfg = LossConfig(lambdas[0], lambdas[1], weighting)
        w = Weighting(weighting)
        if weighting == "uncertainty":
            w.s1.data = np.asarray(0.3)
            w.s2.data = np.asarray(-0.2)
        xt = Tensor(x)
        out = net(xt)
        frozen = None
        if out.transferred_seg is not None:
            frozen = {"seg_probs": T.softmax(T.detach(out.direct_seg), axis=1).data.copy(),
                      "depth": out.direct_depth.data.copy()}
        objective, *_ = compute_losses(out, y_seg, y_dep, cfg.variant, loss_cfg, w)
        named = list(net.named_parameters())
        analytic = T.grad(objective, [p for _, p in named])

        def f():
            o = net(xt)
            return compute_losses(o, y_seg, y_dep, cfg.variant, loss_cfg, w, frozen)[0].item()

        report = GradcheckReport(cfg.variant, 0.0)
        for (name, p), g in zip(named, analytic):
            group = name.split(".")[0]
            flat = p.data.reshape(-1)
            k = min(per_tensor, flat.size)
            idx = sorted(rng.choice(flat.size, k, replace=False).tolist())
            num = numeric_grad(f, flat, idx, h)
            err = relative_error(g.reshape(-1)[idx], num)
            report.per_group[group] = max(report.per_group.get(group, 0.0), err)
            report.checked += k
        for group in report.per_group:
            if all(not np.any(g) for (n, _), g in zip(named, analytic) if n.split(".")[0] == group):
                report.zero_groups.append(group)
        report.max_rel_error = max(report.per_group.values())
    return report
