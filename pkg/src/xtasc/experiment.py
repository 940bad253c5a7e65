"""Desk-scale comparison of the cross-task variant against single-task baselines."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import GenConfig, generate_dataset, image_stats
from .metrics import MetricsReport, report_delta_m
from .train import TrainConfig, evaluate, train

# narrower than the model defaults so six 60-epoch runs fit a single CPU core
DESK_MODEL = {"encoder_stages": [6, 12, 24], "decoder_channels": 12, "ttnet_channels": [4, 8, 16]}


@dataclass
class DeskProtocol:
    n_train: int = 256
    n_eval: int = 64
    height: int = 32
    width: int = 64
    num_classes: int = 7
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    lr_halve_every: int = 25
    data_seed: int = 0
    seeds: tuple = (0, 1, 2)
    variants: tuple = ("XTC", "ST")
    model: dict = field(default_factory=lambda: dict(DESK_MODEL))


def _run_one(args):
    variant, seed, proto, train_set, eval_set, norm = args
    cfg = TrainConfig(variant=variant, epochs=proto.epochs, batch_size=proto.batch_size, lr=proto.lr,
                      lr_halve_every=proto.lr_halve_every, seed=seed, eval_every=proto.epochs, model=proto.model)
    res = train(cfg, train_set, eval_set, norm)
    ev = evaluate(res.net, eval_set, norm, loss_cfg=cfg.loss_config())
    return variant, seed, ev.metrics, ev.depth_loss, ev.seg_loss, res.seconds


@dataclass
class DeskResult:
    runs: list
    delta_m: dict
    median_delta_m: float
    median_depth_loss: dict
    seconds: float

    def summary(self) -> str:
        lines = [f"{v} seed={s} miou={m.miou:.4f} pix_acc={m.pix_acc:.4f} abs={m.abs_err:.4f} rel={m.rel_err:.4f} "
                 f"depth_loss={d:.5f} ({t:.0f}s)" for v, s, m, d, _, t in self.runs]
        lines.append(f"delta_m per seed: {self.delta_m}  median={self.median_delta_m:.3f}")
        lines.append(f"median eval depth loss: {self.median_depth_loss}")
        lines.append(f"wall time {self.seconds:.0f}s")
        return "\n".join(lines)


def run_desk_comparison(proto: DeskProtocol | None = None, workers: int | None = None) -> DeskResult:
    proto = proto or DeskProtocol()
    start = time.perf_counter()
    gen = GenConfig(height=proto.height, width=proto.width, num_classes=proto.num_classes, seed=proto.data_seed)
    train_set = generate_dataset(gen, proto.n_train, "train")
    eval_set = generate_dataset(gen, proto.n_eval, "eval")
    norm = image_stats(train_set)
    jobs = [(v, s, proto, train_set, eval_set, norm) for s in proto.seeds for v in proto.variants]
    workers = workers or min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]
    by = {(v, s): (m, d) for v, s, m, d, _, _ in runs}
    base = proto.variants[-1]
    dm = {}
    for s in proto.seeds:
        report: MetricsReport = by[(proto.variants[0], s)][0]
        dm[s] = report_delta_m(report, by[(base, s)][0])
    med_loss = {v: float(np.median([by[(v, s)][1] for s in proto.seeds])) for v in proto.variants}
    return DeskResult(runs, dm, float(np.median(list(dm.values()))), med_loss, time.perf_counter() - start)
