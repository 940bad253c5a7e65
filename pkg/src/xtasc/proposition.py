"""Exact enumeration of predictor gaps on finite latent-variable models.

Compares three predictors of Y from X: the direct one E[Y|X], the
cross-task one E[E[Y|X] | E[Z|X]] and the aligned one E[Y | E[Z|X]].
Conditioning on the value of E[Z|X] groups the x's whose conditional
expectations coincide (within a tolerance).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

GROUP_TOL = 1e-9


@dataclass
class DiscreteLVM:
    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray
    joint: np.ndarray  # |X| x |Y| x |Z|

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        self.zs = np.asarray(self.zs, dtype=np.float64)
        p = np.asarray(self.joint, dtype=np.float64)
        if p.shape != (len(self.xs), len(self.ys), len(self.zs)):
            raise ConfigError(f"joint shape {p.shape} does not match supports")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ConfigError("joint probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError(f"joint sums to {p.sum()!r}, not 1")
        keep = p.sum(axis=(1, 2)) > 0
        self.xs = self.xs[keep]
        self.joint = p[keep]

    @property
    def px(self) -> np.ndarray:
        return self.joint.sum(axis=(1, 2))

    def swapped(self) -> "DiscreteLVM":
        return DiscreteLVM(self.xs, self.zs, self.ys, self.joint.transpose(0, 2, 1))

    def scaled_y(self, c: float) -> "DiscreteLVM":
        return DiscreteLVM(self.xs, self.ys * c, self.zs, self.joint)


def random_lvm(rng: np.random.Generator, max_support: int = 5, min_support: int = 2, tie_prone: bool = False) -> DiscreteLVM:
    """Positive probabilities normalised to one, supports drawn from [-1, 1].

    ``tie_prone`` instead reuses a few conditional rows p(z|x) across x, so that
    E[Z|X] takes repeated values and the grouping is nontrivial.
    """
    nx, ny, nz = rng.integers(min_support, max_support + 1, size=3)
    xs = rng.uniform(-1, 1, nx)
    ys = rng.uniform(-1, 1, ny)
    zs = rng.uniform(-1, 1, nz)
    if not tie_prone:
        p = rng.uniform(0.0, 1.0, (nx, ny, nz)) + 1e-3
        return DiscreteLVM(xs, ys, zs, p / p.sum())
    rows = rng.dirichlet(np.ones(nz), size=int(rng.integers(1, nx + 1)))
    pz_x = rows[rng.integers(0, len(rows), nx)]
    py_x = rng.dirichlet(np.ones(ny), size=nx)
    px = rng.dirichlet(np.ones(nx))
    p = px[:, None, None] * py_x[:, :, None] * pz_x[:, None, :]
    return DiscreteLVM(xs, ys, zs, p / p.sum())


def cond_exp(lvm: DiscreteLVM, target: str = "Y") -> np.ndarray:
    """E[target | X = x] for every x in the support."""
    if target == "Y":
        pxv = lvm.joint.sum(axis=2)
        vals = lvm.ys
    elif target == "Z":
        pxv = lvm.joint.sum(axis=1)
        vals = lvm.zs
    else:
        raise ConfigError("target must be 'Y' or 'Z'")
    return (pxv @ vals) / pxv.sum(axis=1)


def sigma_algebra_groups(values, tol: float = GROUP_TOL) -> list[list[int]]:
    """Partition indices so that values within ``tol`` of a neighbour share a group (chained)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return []
    order = np.argsort(v, kind="stable")
    groups = [[int(order[0])]]
    for prev, cur in zip(order[:-1], order[1:]):
        if v[cur] - v[prev] <= tol:
            groups[-1].append(int(cur))
        else:
            groups.append([int(cur)])
    return [sorted(g) for g in groups]


def _group_ids(groups: list[list[int]], n: int) -> np.ndarray:
    ids = np.empty(n, dtype=int)
    for k, g in enumerate(groups):
        ids[g] = k
    return ids


@dataclass
class PredictorReport:
    xi_y: float
    xtc_gap: float
    align_gap: float
    xi_z: float
    xtc_gap_swap: float
    align_gap_swap: float
    n_groups: int
    n_groups_swap: int

    def to_dict(self) -> dict:
        return asdict(self)

    def chain_holds(self, tol: float = 1e-12) -> bool:
        ok = True
        for xtc, align, xi in ((self.xtc_gap, self.align_gap, self.xi_y),
                               (self.xtc_gap_swap, self.align_gap_swap, self.xi_z)):
            ok &= -tol <= xtc <= align + tol and align <= xi + tol and xtc <= tol
        return bool(ok)


def _one_side(lvm: DiscreteLVM, tol: float) -> tuple[float, float, float, int]:
    px = lvm.px
    pxy = lvm.joint.sum(axis=2)
    ey = cond_exp(lvm, "Y")
    groups = sigma_algebra_groups(cond_exp(lvm, "Z"), tol)
    gid = _group_ids(groups, len(px))
    pg = np.bincount(gid, weights=px)
    # cross-task predictor: average the direct predictor inside each group
    xtc_pred = np.bincount(gid, weights=px * ey) / pg
    # aligned predictor: condition Y itself on the group, straight from the joint
    align_pred = np.bincount(gid, weights=pxy @ lvm.ys) / pg
    xtc_gap = float(np.sum(px * (xtc_pred[gid] - ey) ** 2))
    align_gap = float(np.sum(px * (align_pred[gid] - ey) ** 2))
    xi = float(np.sum(pxy * (lvm.ys[None, :] - ey[:, None]) ** 2))
    return xi, xtc_gap, align_gap, len(groups)


def predictor_gaps(lvm: DiscreteLVM, tol: float = GROUP_TOL) -> PredictorReport:
    xi_y, xtc, align, ng = _one_side(lvm, tol)
    xi_z, xtc_s, align_s, ng_s = _one_side(lvm.swapped(), tol)
    return PredictorReport(xi_y, xtc, align, xi_z, xtc_s, align_s, ng, ng_s)


@dataclass
class StepReport:
    tower_error: float
    rewrite_rhs: float
    rewrite_error: float
    jensen_slack: float
    jensen_residual: float
    jensen_identity_error: float
    align_slack: float

    def to_dict(self) -> dict:
        return asdict(self)


def verify_proof_steps(lvm: DiscreteLVM, tol: float = GROUP_TOL) -> StepReport:
    """Intermediate quantities of the bound's derivation, by enumeration.

    rewrite_rhs is E[(E[R | E[Z|X]])^2] for the residual R = Y - E[Y|X];
    jensen_slack = xi_Y - rewrite_rhs, which should equal the within-group
    variance of R (jensen_residual). align_slack = xi_Y - align_gap.
    """
    px = lvm.px
    pxy = lvm.joint.sum(axis=2)
    ey = cond_exp(lvm, "Y")
    mean_y = float(pxy.sum(axis=0) @ lvm.ys)
    tower = abs(float(px @ ey) - mean_y)
    gid = _group_ids(sigma_algebra_groups(cond_exp(lvm, "Z"), tol), len(px))
    pg = np.bincount(gid, weights=px)
    resid = lvm.ys[None, :] - ey[:, None]  # x by y
    r_given_g = np.bincount(gid, weights=(pxy * resid).sum(axis=1)) / pg
    rhs = float(np.sum(pg * r_given_g ** 2))
    report = predictor_gaps(lvm, tol)
    xi = report.xi_y
    residual = float(np.sum(pxy * (resid - r_given_g[gid][:, None]) ** 2))
    slack = xi - rhs
    return StepReport(
        tower_error=tower,
        rewrite_rhs=rhs,
        rewrite_error=abs(report.align_gap - rhs),
        jensen_slack=slack,
        jensen_residual=residual,
        jensen_identity_error=abs(slack - residual),
        align_slack=xi - report.align_gap,
    )


def sweep(trials: int, max_support: int = 5, seed: int = 0, tol: float = GROUP_TOL, tie_prone: bool = False):
    """Yield (lvm, PredictorReport, StepReport) for ``trials`` random models."""
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        lvm = random_lvm(rng, max_support, tie_prone=tie_prone)
        yield lvm, predictor_gaps(lvm, tol), verify_proof_steps(lvm, tol)
