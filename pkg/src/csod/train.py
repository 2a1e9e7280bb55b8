"""Training and evaluation loops shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .metrics import MetricsReport, SaliencyPair, evaluate
from .net import SODNet, build_network
from .optim import Optimizer, accumulate_and_step, schedule_lr


class NumericError(RuntimeError):
    pass


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    lr: float
    train_loss: float
    wall_seconds: float


LOG_HEADER = ("epoch", "step", "lr", "train_loss")
TIMING_HEADER = ("epoch", "step", "wall_seconds")


def train(cfg: RunConfig, samples, on_row=None):
    """Train a fresh network on ``samples`` (SampleRecords).

    Each optimizer step averages ``cfg.accumulation`` single-image
    micro-batches.  Sample order is reshuffled every epoch from a stream
    seeded independently of the weight initialization.
    """
    if not samples:
        raise ValueError("training set is empty")
    net = build_network(cfg.net, seed=cfg.seed)
    opt = Optimizer(net.parameters(), cfg.optimizer_config())
    order_rng = np.random.default_rng([cfg.seed, 1])
    k = cfg.accumulation
    rows = []
    step = 0
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        opt.alpha = schedule_lr(cfg.base_lr, epoch, cfg.epochs)
        order = order_rng.permutation(len(samples))
        for begin in range(0, len(order), k):
            chunk = [samples[i] for i in order[begin:begin + k]]
            loss = accumulate_and_step(opt, net, [(s.image[None], s.mask[None], s.edge[None]) for s in chunk])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, step {step}")
            row = TrainLogRow(epoch, step, opt.alpha, loss, time.perf_counter() - start)
            rows.append(row)
            if on_row is not None:
                on_row(row)
            step += 1
    return net, rows


def write_train_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.step, repr(r.lr), repr(r.train_loss)])


def write_timing_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.step, f"{r.wall_seconds:.3f}"])


def read_train_log(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [TrainLogRow(int(r["epoch"]), int(r["step"]), float(r["lr"]), float(r["train_loss"]), 0.0)
                for r in reader]


def epoch_mean_losses(rows):
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(r.epoch, []).append(r.train_loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def predict(net: SODNet, samples):
    """Final saliency maps, one (h, w) array per sample."""
    return [net(s.image[None]).final_map[0, 0] for s in samples]


def evaluate_network(net: SODNet, samples) -> tuple[MetricsReport, list]:
    preds = predict(net, samples)
    pairs = [SaliencyPair(p, s.mask[0]) for p, s in zip(preds, samples)]
    return evaluate(pairs), preds
