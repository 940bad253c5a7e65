"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``. The desk-scale training
comparison (criterion 8) takes about 25 minutes on one core; set
``XTASC_SKIP_DESK=1`` to leave it out of a quick run.
"""

import math
import os
import time

import numpy as np
import pytest

from oracles import ce_pixelwise, confusion_pixelwise, depth_errors_pixelwise, l1_pixelwise, miou_pixelwise, \
    soft_ce_pixelwise
from xtasc import tensor as T
from xtasc.data import GenConfig, generate_dataset, image_stats, read_dataset, write_dataset
from xtasc.gradcheck import check_op, gradcheck, tiny_model_config
from xtasc.losses import (LossConfig, Weighting, align_losses, combine_total, compute_losses, depth_l1, depth_xtc,
                          gradnorm_update, seg_ce, seg_xtc)
from xtasc.metrics import confusion_matrix, depth_errors, miou_pixacc
from xtasc.models import XTaskNet, load_checkpoint
from xtasc.proposition import sweep
from xtasc.tensor import RunningStats, Tensor
from xtasc.train import TrainConfig, evaluate, lr_schedule, train


@pytest.fixture
def verdict(capsys):
    def say(num, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
        assert ok, detail
    return say


# -- 1, 2: predictor gap chain on discrete models ----------------------------------------

@pytest.fixture(scope="module")
def lvm_trials():
    start = time.perf_counter()
    trials = list(sweep(1000, max_support=5, seed=2024))
    return trials, time.perf_counter() - start


def test_criterion_1_gap_chain(lvm_trials, verdict):
    trials, secs = lvm_trials
    tol = 1e-12
    chain = sum(r.chain_holds(tol) for _, r, _ in trials)
    zero = max(r.xtc_gap for _, r, _ in trials)
    sizes = {lvm.joint.shape for lvm, _, _ in trials}
    supports_ok = all(2 <= d <= 5 for s in sizes for d in s)
    ok = chain == len(trials) == 1000 and zero <= tol and secs < 10 and supports_ok
    verdict(1, ok, f"chain held in {chain}/{len(trials)} trials (with Y/Z swap), max xtc_gap={zero:.2e}, "
                   f"{secs:.2f}s")


def test_criterion_2_step_identities(lvm_trials, verdict):
    trials, _ = lvm_trials
    tower = max(s.tower_error for _, _, s in trials)
    rewrite = max(s.rewrite_error for _, _, s in trials)
    jensen = min(s.jensen_slack for _, _, s in trials)
    ok = tower <= 1e-12 and rewrite <= 1e-12 and jensen >= -1e-12
    verdict(2, ok, f"tower err {tower:.2e}, rewrite err {rewrite:.2e}, min Jensen slack {jensen:.2e}")


# -- 3: gradients --------------------------------------------------------------------------

def _op_checks(rng):
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.3, 2.0, s)

    def bn(x, g, b):
        return T.batchnorm2d(x, g, b, RunningStats(x.shape[1], np.float64), training=True)

    return {
        "add": (T.add, [r(3, 4), r(4)]),
        "sub": (T.sub, [r(3, 4), r(3, 1)]),
        "mul": (T.mul, [r(3, 4), r(3, 4)]),
        "div": (T.div, [r(3, 4), pos(3, 4)]),
        "neg": (T.neg, [r(5)]),
        "power": (lambda a: T.power(a, 3.0), [r(4)]),
        "exp": (T.exp, [r(3, 3)]),
        "log": (T.log, [pos(3, 3)]),
        "abs": (T.tabs, [r(3, 3) + 0.1]),
        "relu": (T.relu, [r(4, 4) + 0.05]),
        "sum": (lambda a: T.tsum(a, axis=1), [r(3, 4)]),
        "mean": (lambda a: T.mean(a, axis=(0, 2)), [r(2, 3, 4)]),
        "reshape": (lambda a: T.reshape(a, (6, 2)), [r(3, 4)]),
        "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [r(2, 3, 2)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [r(2, 2, 3), r(2, 1, 3)]),
        "matmul": (T.matmul, [r(4, 5), r(5, 3)]),
        "softmax": (lambda a: T.softmax(a, axis=1), [r(2, 4, 3)]),
        "log_softmax": (lambda a: T.log_softmax(a, axis=1), [r(2, 4, 3)]),
        "conv2d 3x3": (lambda x, w, b: T.conv2d(x, w, b, padding=1), [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)]),
        "conv2d 1x1": (lambda x, w, b: T.conv2d(x, w, b), [r(2, 3, 4, 4), r(2, 3, 1, 1), r(2)]),
        "conv2d stride 2": (lambda x, w: T.conv2d(x, w, stride=2, padding=1), [r(1, 2, 6, 6), r(3, 2, 3, 3)]),
        "batchnorm2d": (bn, [r(3, 2, 3, 3), pos(2), r(2)]),
        "maxpool2d": (T.maxpool2d, [r(2, 2, 4, 4)]),
        "upsample2x": (T.upsample_nearest2x, [r(2, 2, 3, 3)]),
    }


def test_criterion_3_gradient_integrity(verdict):
    start = time.perf_counter()
    rep = gradcheck("XTC", size=8)
    ops = {name: check_op(fn, args) for name, (fn, args) in _op_checks(np.random.default_rng(3)).items()}
    secs = time.perf_counter() - start
    worst_op = max(ops, key=ops.get)
    ok = rep.max_rel_error < 1e-4 and all(v < 1e-4 for v in ops.values()) and secs < 120
    groups = ", ".join(f"{k}={v:.1e}" for k, v in rep.per_group.items())
    verdict(3, ok, f"model groups [{groups}]; {len(ops)} ops, worst {worst_op}={ops[worst_op]:.1e}; {secs:.1f}s")


# -- 4: stop-gradient -----------------------------------------------------------------------

def test_criterion_4_stop_gradient(verdict):
    start = time.perf_counter()
    problems = []
    with T.precision("f64"):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            net = XTaskNet(tiny_model_config("XTC"), rng)
            out = net(Tensor(rng.standard_normal((2, 3, 8, 8))))
            mask = rng.uniform(size=(2, 1, 8, 8)) > 0.2
            c21 = seg_xtc(out.transferred_seg, out.direct_seg)
            c12 = depth_xtc(out.transferred_depth, out.direct_depth, mask)
            named = list(net.named_parameters())
            params = [p for _, p in named]
            group = lambda grads, g: [v for (n, _), v in zip(named, grads) if n.split(".")[0] == g]
            nz = lambda vs: any(v is not None and np.any(v) for v in vs)
            g21, g12 = T.grad(c21, params), T.grad(c12, params)
            # a direct prediction used only as a target must receive nothing from its own term
            if nz(group(g21, "dec1")) or nz(group(g21, "ttnet_g")):
                problems.append(f"seed {seed}: seg target leaked")
            if nz(group(g12, "dec2")) or nz(group(g12, "ttnet_f")):
                problems.append(f"seed {seed}: depth target leaked")
            both = T.grad(c21 + c12, params)
            for tt in ("ttnet_f", "ttnet_g"):
                if not nz(group(both, tt)):
                    problems.append(f"seed {seed}: {tt} got no gradient")
    secs = time.perf_counter() - start
    ok = not problems and secs < 30
    verdict(4, ok, f"5 seeds, {secs:.1f}s" + (f"; {problems}" if problems else "; targets exactly zero, "
                                                                                  "both transfer nets nonzero"))


# -- 5: oracles ---------------------------------------------------------------------------

def _masked_case(rng):
    n, c, h, w = 2, int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    logits = rng.standard_normal((n, c, h, w)) * 2
    seg = rng.integers(0, c, (n, h, w))
    seg[rng.random(seg.shape) < 0.25] = 255
    seg.flat[0] = 0
    dep = rng.uniform(0.1, 1.0, (n, 1, h, w))
    dep[rng.random(dep.shape) < 0.4] = 0
    dep.flat[0] = 0.5
    return logits, seg, dep


def test_criterion_5_oracles(verdict):
    rng = np.random.default_rng(5)
    worst = {}
    close = lambda k, a, b: worst.__setitem__(k, max(worst.get(k, 0.0), abs(a - b) / max(abs(b), 1e-300)))
    with T.precision("f64"):
        for _ in range(50):
            logits, seg, dep = _masked_case(rng)
            other = rng.standard_normal(logits.shape)
            pd, pt = rng.standard_normal(dep.shape), rng.standard_normal(dep.shape)
            mask = dep > 0
            close("seg_ce", seg_ce(Tensor(logits), seg).item(), ce_pixelwise(logits, seg))
            close("depth_l1", depth_l1(Tensor(pd), dep).item(), l1_pixelwise(pd, dep, mask))
            close("seg_xtc", seg_xtc(Tensor(other), Tensor(logits)).item(), soft_ce_pixelwise(other, logits))
            close("depth_xtc", depth_xtc(Tensor(pt), Tensor(pd), mask).item(), l1_pixelwise(pt, pd, mask))
            a_seg, a_dep = align_losses(Tensor(other), seg, Tensor(pt), dep)
            close("align_seg", a_seg.item(), ce_pixelwise(other, seg))
            close("align_depth", a_dep.item(), l1_pixelwise(pt, dep, mask))
            c = logits.shape[1]
            pred = logits.argmax(1)
            conf = confusion_matrix(pred, seg, c)
            if not np.array_equal(conf, confusion_pixelwise(pred, seg, c)):
                worst["confusion"] = np.inf
            miou, acc, _ = miou_pixacc(conf)
            om, oa = miou_pixelwise(pred, seg, c)
            close("miou", miou, om)
            close("pix_acc", acc, oa)
            pos = np.abs(pd[:, 0]) + 0.05
            ab, rel = depth_errors(pos, dep[:, 0])
            oab, orel = depth_errors_pixelwise(pos, dep[:, 0])
            close("abs_err", ab, oab)
            close("rel_err", rel, orel)
    ok = max(worst.values()) <= 1e-6
    verdict(5, ok, "max rel diff per quantity: " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


# -- 6: masking -----------------------------------------------------------------------------

def test_criterion_6_masking_invariance(verdict):
    rng = np.random.default_rng(6)
    changed = []
    with T.precision("f64"):
        for trial in range(20):
            logits, seg, dep = _masked_case(rng)
            pd, pt, tl = (rng.standard_normal(dep.shape), rng.standard_normal(dep.shape),
                          rng.standard_normal(logits.shape))
            void = np.broadcast_to((seg == 255)[:, None], logits.shape)
            invalid = dep == 0
            junk = lambda a, m: np.where(m, rng.uniform(-1e3, 1e3, a.shape), a)
            logits2, tl2, pd2, pt2 = junk(logits, void), junk(tl, void), junk(pd, invalid), junk(pt, invalid)

            def measures(lg, tlg, d, t):
                pos = np.abs(d[:, 0]) + 0.05
                a, b = align_losses(Tensor(tlg), seg, Tensor(t), dep)
                return (seg_ce(Tensor(lg), seg).item(), depth_l1(Tensor(d), dep).item(),
                        depth_xtc(Tensor(t), Tensor(d), dep > 0).item(), a.item(), b.item(),
                        *miou_pixacc(confusion_matrix(lg.argmax(1), seg, lg.shape[1]))[:2],
                        *depth_errors(pos, dep[:, 0]))

            if measures(logits, tl, pd, pt) != measures(logits2, tl2, pd2, pt2):
                changed.append(trial)
    verdict(6, not changed, f"20 perturbed instances, changed: {changed or 'none'}")


# -- 7: endpoints ---------------------------------------------------------------------------

def test_criterion_7_endpoints(verdict):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8, 8))
    ys, yd = rng.integers(0, 3, (2, 8, 8)), rng.uniform(0.1, 1, (2, 1, 8, 8))
    xtc = XTaskNet(tiny_model_config("XTC"), np.random.default_rng(0))
    mt = XTaskNet(tiny_model_config("MT"), np.random.default_rng(0))
    src = dict(xtc.named_parameters())
    for n, p in mt.named_parameters():
        p.data = src[n].data.copy()
    zero = LossConfig(0.0, 0.0)
    a = compute_losses(xtc(Tensor(x)), ys, yd, "XTC", zero, Weighting("uncertainty"))[3].total
    b = compute_losses(mt(Tensor(x)), ys, yd, "MT", zero, Weighting("uncertainty"))[3].total
    endpoint = a == b

    with T.precision("f64"):
        L1, L2 = Tensor(np.array(0.8123)), Tensor(np.array(1.377))
        u = combine_total(L1, L2, Weighting("uncertainty"))[0].item()
        e = combine_total(L1, L2, Weighting("equal"))[0].item()
    uncertainty_zero = u == e

    omega, worst_sum, min_w = np.ones(2), 0.0, np.inf
    L0 = np.array([1.9, 0.4])
    for _ in range(2000):
        grads = [rng.standard_normal(8) * rng.uniform(0.01, 10) for _ in range(2)]
        omega = gradnorm_update(grads, L0, L0 * rng.uniform(0.1, 1.5, 2), omega, 1.5, rng.uniform(0.001, 0.5))
        worst_sum = max(worst_sum, abs(omega.sum() - 2.0))
        min_w = min(min_w, omega.min())
    # the sum is exact up to floating-point rounding of the final addition
    gradnorm_ok = min_w > 0 and worst_sum <= 2 * np.spacing(2.0)
    ok = endpoint and uncertainty_zero and gradnorm_ok
    verdict(7, ok, f"MT==XTC(lambda=0): {a!r} vs {b!r}; s=0 vs equal: {u!r} vs {e!r}; GradNorm over 2000 "
                   f"updates min weight {min_w:.2e}, max |sum-2| {worst_sum:.1e}")


# -- 8: desk-scale comparison ---------------------------------------------------------------

@pytest.mark.skipif(os.environ.get("XTASC_SKIP_DESK") == "1", reason="XTASC_SKIP_DESK=1")
def test_criterion_8_desk_comparison(verdict, capsys):
    from xtasc.experiment import run_desk_comparison

    res = run_desk_comparison()
    with capsys.disabled():
        print("\n" + res.summary())
    loss_ok = res.median_depth_loss["XTC"] <= res.median_depth_loss["ST"]
    ok = res.median_delta_m >= 0 and loss_ok and res.seconds < 30 * 60
    verdict(8, ok, f"median delta_m {res.median_delta_m:+.3f}% (>= 0 required), median eval depth loss "
                   f"XTC {res.median_depth_loss['XTC']:.5f} vs ST {res.median_depth_loss['ST']:.5f}, "
                   f"{res.seconds / 60:.1f} min")


# -- 9: determinism and persistence ---------------------------------------------------------

def test_criterion_9_determinism_and_persistence(tmp_path, verdict):
    g = GenConfig(height=16, width=32, seed=11)
    tr, ev = generate_dataset(g, 16), generate_dataset(g, 8, "eval")
    norm = image_stats(tr)
    small = {"encoder_stages": [4, 8], "decoder_channels": 4, "ttnet_channels": [3, 4]}
    runs = []
    for tag in ("a", "b"):
        cfg = TrainConfig(variant="XTC", epochs=2, batch_size=4, lr=1e-3, precision="f64", model=small,
                          out_dir=str(tmp_path / tag), eval_every=2)
        runs.append(train(cfg, tr, ev, norm))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()
                   and p.suffix != ".ndjson" and p.name != "run.json")
    same_ckpt = bool(files) and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                                    for f in files)
    before = evaluate(runs[0].net, ev, norm).to_dict()
    net, _ = load_checkpoint(runs[0].final_checkpoint)
    after = evaluate(net, ev, norm).to_dict()
    write_dataset(tmp_path / "data", tr, g)
    back, _ = read_dataset(tmp_path / "data")
    same_data = all(a.image.tobytes() == b.image.tobytes() and a.seg.tobytes() == b.seg.tobytes()
                    and a.depth.tobytes() == b.depth.tobytes() for a, b in zip(tr, back)) and len(back) == len(tr)
    ok = same_ckpt and before == after and same_data
    verdict(9, ok, f"f64 checkpoints identical over {len(files)} files: {same_ckpt}; reload evaluates "
                   f"identically: {before == after}; dataset round-trip bitwise: {same_data}")


# -- 10: analytic sanity --------------------------------------------------------------------

def test_criterion_10_analytic_sanity(verdict):
    with T.precision("f64"):
        ce = seg_ce(Tensor(np.zeros((2, 7, 4, 4))), np.random.default_rng(0).integers(0, 7, (2, 4, 4))).item()
    ce_ok = abs(ce - math.log(7)) <= 1e-6 and abs(ce - 1.945910) <= 1e-6
    bad = [(k, e) for k in (1, 3, 25, 60, 80) for e in range(5 * k + 1)
           if lr_schedule(e, 1e-4, k) != 1e-4 * 0.5 ** (e // k)]
    verdict(10, ce_ok and not bad, f"uniform CE {ce:.7f} vs ln 7 {math.log(7):.7f}; schedule mismatches: "
                                   f"{len(bad)}")
