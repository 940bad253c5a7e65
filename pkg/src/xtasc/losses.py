"""Direct, cross-task consistency and alignment losses plus task weighting."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyMaskError, ShapeError, XtascError
from .tensor import Tensor

IGNORE_INDEX = 255
WEIGHTINGS = ("equal", "uncertainty", "gradnorm")


class DegenerateLossError(XtascError, ValueError):
    category = "degenerate-loss"


@dataclass
class LossConfig:
    lambda1: float = 0.01
    lambda2: float = 0.01
    weighting: str = "uncertainty"
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    seg_ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        for lam in (self.lambda1, self.lambda2):
            if not 0.0 <= lam <= 1.0:
                raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.gradnorm_alpha < 0:
            raise ConfigError("gradnorm_alpha must be nonnegative")


@dataclass
class LossReport:
    ell1: float
    ell2: float
    ell_2to1: float
    ell_1to2: float
    L1: float
    L2: float
    omega1: float
    omega2: float
    regularizer: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


# -- per-pixel losses ---------------------------------------------------------------

def _seg_onehot(target: np.ndarray, num_classes: int, ignore_index: int, dtype) -> tuple[np.ndarray, int]:
    target = np.asarray(target)
    valid = target != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise EmptyMaskError("every pixel is ignored")
    ids = target[valid]
    if ids.min() < 0 or ids.max() >= num_classes:
        raise ShapeError(f"target ids must lie in [0, {num_classes}) or equal {ignore_index}")
    n, h, w = target.shape
    onehot = np.zeros((n, num_classes, h, w), dtype=dtype)
    nn, hh, ww = np.nonzero(valid)
    onehot[nn, ids, hh, ww] = 1
    return onehot, count


def seg_ce(logits: Tensor, target: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean cross-entropy over non-ignored pixels of N x C x H x W logits."""
    if logits.ndim != 4 or np.shape(target) != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"seg_ce: logits {logits.shape} do not match target {np.shape(target)}")
    onehot, count = _seg_onehot(target, logits.shape[1], ignore_index, logits.dtype)
    logp = T.log_softmax(logits, axis=1)
    return -(logp * Tensor(onehot, dtype=logits.dtype)).sum() / float(count)


def seg_xtc(transferred_logits: Tensor, direct_logits: Tensor) -> Tensor:
    """Soft-target cross-entropy of the transferred prediction against the
    (detached) softmax of the direct prediction, averaged over all pixels."""
    if transferred_logits.shape != direct_logits.shape:
        raise ShapeError(f"seg_xtc: {transferred_logits.shape} vs {direct_logits.shape}")
    target = T.detach(T.softmax(direct_logits, axis=1))
    return _soft_ce(transferred_logits, target)


def _soft_ce(logits: Tensor, probs: Tensor) -> Tensor:
    n, _, h, w = logits.shape
    return -(T.log_softmax(logits, axis=1) * probs).sum() / float(n * h * w)


def _depth_mask(target_shape: tuple, valid_mask, target: np.ndarray | None, dtype) -> tuple[np.ndarray, int]:
    if valid_mask is None:
        valid_mask = np.asarray(target) > 0
    mask = np.asarray(valid_mask).reshape(target_shape)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError("depth mask selects no pixels")
    return mask.astype(dtype), count


def depth_l1(pred: Tensor, target: np.ndarray, valid_mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over valid pixels (default: target > 0)."""
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    mask, count = _depth_mask(pred.shape, valid_mask, target, pred.dtype)
    return (T.tabs(pred - Tensor(target, dtype=pred.dtype)) * Tensor(mask, dtype=pred.dtype)).sum() / float(count)


def depth_xtc(transferred: Tensor, direct: Tensor, valid_mask: np.ndarray) -> Tensor:
    if transferred.shape != direct.shape:
        raise ShapeError(f"depth_xtc: {transferred.shape} vs {direct.shape}")
    return _masked_l1(transferred, T.detach(direct), valid_mask)


def _masked_l1(pred: Tensor, target: Tensor, valid_mask: np.ndarray) -> Tensor:
    mask, count = _depth_mask(pred.shape, valid_mask, None, pred.dtype)
    return (T.tabs(pred - target) * Tensor(mask, dtype=pred.dtype)).sum() / float(count)


def align_losses(
    transferred_seg: Tensor,
    y_seg: np.ndarray,
    transferred_depth: Tensor,
    y_depth: np.ndarray,
    depth_mask: np.ndarray | None = None,
    ignore_index: int = IGNORE_INDEX,
) -> tuple[Tensor, Tensor]:
    """Transferred predictions scored against ground truth; nothing is detached."""
    return seg_ce(transferred_seg, y_seg, ignore_index), depth_l1(transferred_depth, y_depth, depth_mask)


def task_loss(ell_direct: Tensor, ell_cross: Tensor | None, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if ell_cross is None:
        return ell_direct * 1.0
    return ell_direct * (1.0 - lam) + ell_cross * lam


# -- task weighting ------------------------------------------------------------------

class Weighting:
    """Holds the state of one weighting scheme for two tasks.

    ``uncertainty`` keeps learnable log-variances s1, s2 (optimised with the
    model); ``gradnorm`` keeps positive weights summing to 2 that are moved by
    :func:`gradnorm_update` after each optimisation step.
    """

    def __init__(self, scheme: str = "equal"):
        if scheme not in WEIGHTINGS:
            raise ConfigError(f"unknown weighting {scheme!r}")
        self.scheme = scheme
        self.s1 = Tensor(0.0, requires_grad=True)
        self.s2 = Tensor(0.0, requires_grad=True)
        self.omega = np.ones(2)
        self.initial_losses: np.ndarray | None = None

    def parameters(self) -> list[Tensor]:
        return [self.s1, self.s2] if self.scheme == "uncertainty" else []

    def weights(self) -> tuple[float, float]:
        if self.scheme == "uncertainty":
            return float(np.exp(-self.s1.item())), float(np.exp(-self.s2.item()))
        return float(self.omega[0]), float(self.omega[1])

    def state_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "s": [self.s1.item(), self.s2.item()],
            "omega": self.omega.tolist(),
            "initial_losses": None if self.initial_losses is None else self.initial_losses.tolist(),
        }

    def load_state_dict(self, d: dict) -> None:
        self.scheme = d["scheme"]
        self.s1.data = np.asarray(d["s"][0], dtype=self.s1.dtype)
        self.s2.data = np.asarray(d["s"][1], dtype=self.s2.dtype)
        self.omega = np.asarray(d["omega"], dtype=float)
        il = d.get("initial_losses")
        self.initial_losses = None if il is None else np.asarray(il, dtype=float)


def combine_total(L1: Tensor, L2: Tensor, weighting: Weighting) -> tuple[Tensor, float, float]:
    """Return the training objective and the two task weights."""
    if weighting.scheme == "uncertainty":
        s1, s2 = weighting.s1, weighting.s2
        total = T.exp(-s1) * L1 + s1 + T.exp(-s2) * L2 + s2
        w1, w2 = weighting.weights()
        return total, w1, w2
    w1, w2 = weighting.weights()
    return L1 * w1 + L2 * w2, w1, w2


def gradnorm_update(
    shared_grads: list[np.ndarray],
    initial_losses,
    current_losses,
    omega,
    alpha: float = 1.5,
    lr_w: float = 0.025,
    floor: float = 1e-3,
) -> np.ndarray:
    """One GradNorm step on the task weights.

    ``shared_grads[t]`` is the gradient of the unweighted task loss L_t with
    respect to the reference shared layer.
    """
    L0 = np.asarray(initial_losses, dtype=float)
    Lc = np.asarray(current_losses, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if np.any(L0 == 0):
        raise DegenerateLossError("initial losses must be nonzero")
    norms = np.array([np.linalg.norm(np.asarray(g, dtype=float)) for g in shared_grads])
    G = omega * norms
    ratio = Lc / L0
    r = ratio / ratio.mean()
    target = G.mean() * r ** alpha
    step = np.sign(G - target) * norms
    new = np.maximum(omega - lr_w * step, floor)
    n_tasks = len(new)
    new = new * (n_tasks / new.sum())
    big = int(np.argmax(new))
    new[big] = n_tasks - (new.sum() - new[big])
    return new


# -- composition per model variant ------------------------------------------------------

def compute_losses(out, y_seg: np.ndarray, y_depth: np.ndarray, variant: str, cfg: LossConfig,
                   weighting: Weighting, frozen_targets: dict | None = None):
    """Assemble every loss term for one batch.

    Returns ``(objective, L1, L2, report)``. ``frozen_targets`` (keys
    ``seg_probs`` / ``depth``) replaces the detached direct predictions used as
    cross-task targets; gradient checking uses it to hold the targets fixed.
    """
    mask = np.asarray(y_depth).reshape(out.direct_depth.shape) > 0
    ell1 = seg_ce(out.direct_seg, y_seg, cfg.seg_ignore_index)
    ell2 = depth_l1(out.direct_depth, y_depth, mask)
    c21 = c12 = None
    if variant == "XTC":
        if frozen_targets is None:
            c21 = seg_xtc(out.transferred_seg, out.direct_seg)
            c12 = depth_xtc(out.transferred_depth, out.direct_depth, mask)
        else:
            c21 = _soft_ce(out.transferred_seg, Tensor(frozen_targets["seg_probs"], dtype=out.direct_seg.dtype))
            c12 = _masked_l1(out.transferred_depth, Tensor(frozen_targets["depth"], dtype=out.direct_depth.dtype), mask)
    elif variant == "ALIGN":
        c21, c12 = align_losses(out.transferred_seg, y_seg, out.transferred_depth, y_depth, mask, cfg.seg_ignore_index)
    lam1, lam2 = (cfg.lambda1, cfg.lambda2) if variant in ("XTC", "ALIGN") else (0.0, 0.0)
    L1 = task_loss(ell1, c21, lam1)
    L2 = task_loss(ell2, c12, lam2)
    objective, w1, w2 = combine_total(L1, L2, weighting)
    reg = weighting.s1.item() + weighting.s2.item() if weighting.scheme == "uncertainty" else 0.0
    report = LossReport(
        ell1=ell1.item(),
        ell2=ell2.item(),
        ell_2to1=0.0 if c21 is None else c21.item(),
        ell_1to2=0.0 if c12 is None else c12.item(),
        L1=L1.item(),
        L2=L2.item(),
        omega1=w1,
        omega2=w2,
        regularizer=reg,
        total=objective.item(),
    )
    return objective, L1, L2, report
