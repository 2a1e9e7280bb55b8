"""Optimizers (Adam, AdaX and the comparison set), LR schedule, gradient
accumulation and the optimizer benchmark tasks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from .engine import Param

ALGORITHMS = ("sgd_momentum", "adam", "adax", "adagrad", "rmsprop", "adadelta", "adamw")
BENCH_ALGORITHMS = ("adadelta", "adam", "adagrad", "rmsprop", "adamw", "adax")

# Per-algorithm defaults.  beta2 doubles as the decay rate rho for rmsprop/adadelta.
_DEFAULTS = {
    "sgd_momentum": dict(alpha=1e-2, beta1=0.0, beta2=0.0, eps=1e-8, weight_decay=0.0, momentum=0.9),
    "adam": dict(alpha=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=5e-4, eps_in_sqrt=False),
    "adax": dict(alpha=5e-5, beta1=0.9, beta2=1e-4, eps=1e-8, weight_decay=5e-4, eps_in_sqrt=True),
    "adagrad": dict(alpha=1e-2, eps=1e-8, weight_decay=0.0),
    "rmsprop": dict(alpha=1e-2, beta2=0.99, eps=1e-8, weight_decay=0.0),
    "adadelta": dict(alpha=1.0, beta2=0.9, eps=1e-6, weight_decay=0.0),
    "adamw": dict(alpha=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=5e-4, eps_in_sqrt=False),
}


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters; ``None`` fields take the algorithm's default.

    ``eps_in_sqrt`` selects ``sqrt(v_hat + eps)`` over ``sqrt(v_hat) + eps``
    for adam, adamw and adax.
    """

    algorithm: str = "adax"
    alpha: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    eps: float | None = None
    weight_decay: float | None = None
    momentum: float | None = None
    eps_in_sqrt: bool | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown optimizer algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        base = dict(alpha=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, momentum=0.0, eps_in_sqrt=False)
        base.update(_DEFAULTS[self.algorithm])
        for name, value in base.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0 <= self.beta1 < 1:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.algorithm == "adax":
            if not self.beta2 > 0:
                raise ValueError(f"adax beta2 must be > 0 (it normalizes by (1+beta2)^t - 1), got {self.beta2}")
        elif not 0 <= self.beta2 < 1:
            raise ValueError(f"beta2 must be in [0, 1) for {self.algorithm}, got {self.beta2}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return OptimizerConfig(**values)


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    u: np.ndarray | None = None  # adadelta's running mean of squared updates

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0, np.zeros(shape))


def init_states(params):
    return [MomentState.zeros(p.shape) for p in params]


def _check_states(params, states):
    if states is None or len(states) != len(params):
        raise ValueError("optimizer state is uninitialized or does not match the parameter list")
    for p, s in zip(params, states):
        if not isinstance(s, MomentState) or s.m.shape != p.shape or s.v.shape != p.shape:
            raise ValueError(f"optimizer state does not match parameter shape {p.shape}")


def _grad(cfg, p):
    if cfg.weight_decay and cfg.algorithm != "adamw":
        return p.grad + cfg.weight_decay * p.value
    return p.grad


def _denom(cfg, v_hat):
    if cfg.eps_in_sqrt:
        return np.sqrt(v_hat + cfg.eps)
    return np.sqrt(v_hat) + cfg.eps


def adam_step(cfg: OptimizerConfig, params, states, alpha=None):
    _check_states(params, states)
    alpha = cfg.alpha if alpha is None else alpha
    b1, b2 = cfg.beta1, cfg.beta2
    for p, s in zip(params, states):
        g = _grad(cfg, p)
        if cfg.algorithm == "adamw" and cfg.weight_decay:
            p.value *= 1.0 - alpha * cfg.weight_decay
        s.t += 1
        s.m = b1 * s.m + (1.0 - b1) * g
        s.v = b2 * s.v + (1.0 - b2) * (g * g)
        m_hat = s.m / (1.0 - b1 ** s.t)
        v_hat = s.v / (1.0 - b2 ** s.t)
        p.value -= alpha * m_hat / _denom(cfg, v_hat)


def adax_step(cfg: OptimizerConfig, params, states, alpha=None):
    _check_states(params, states)
    alpha = cfg.alpha if alpha is None else alpha
    b1, b2 = cfg.beta1, cfg.beta2
    log_growth = math.log1p(b2)
    for p, s in zip(params, states):
        g = _grad(cfg, p)
        s.t += 1
        s.m = b1 * s.m + (1.0 - b1) * g
        s.v = (1.0 + b2) * s.v + b2 * (g * g)
        # (1 + b2)^t - 1 without cancellation
        v_hat = s.v / math.expm1(s.t * log_growth)
        p.value -= alpha * s.m / _denom(cfg, v_hat)


def sgd_momentum_step(cfg, params, states, alpha=None):
    _check_states(params, states)
    alpha = cfg.alpha if alpha is None else alpha
    for p, s in zip(params, states):
        g = _grad(cfg, p)
        s.t += 1
        if cfg.momentum:
            s.m = cfg.momentum * s.m + g
            g = s.m
        p.value -= alpha * g


def adagrad_step(cfg, params, states, alpha=None):
    _check_states(params, states)
    alpha = cfg.alpha if alpha is None else alpha
    for p, s in zip(params, states):
        g = _grad(cfg, p)
        s.t += 1
        s.v = s.v + g * g
        p.value -= alpha * g / (np.sqrt(s.v) + cfg.eps)


def rmsprop_step(cfg, params, states, alpha=None):
    _check_states(params, states)
    alpha = cfg.alpha if alpha is None else alpha
    rho = cfg.beta2
    for p, s in zip(params, states):
        g = _grad(cfg, p)
        s.t += 1
        s.v = rho * s.v + (1.0 - rho) * (g * g)
        p.value -= alpha * g / (np.sqrt(s.v) + cfg.eps)


def adadelta_step(cfg, params, states, alpha=None):
    _check_states(params, states)
    alpha = cfg.alpha if alpha is None else alpha
    rho, eps = cfg.beta2, cfg.eps
    for p, s in zip(params, states):
        g = _grad(cfg, p)
        s.t += 1
        s.v = rho * s.v + (1.0 - rho) * (g * g)
        delta = np.sqrt(s.u + eps) / np.sqrt(s.v + eps) * g
        s.u = rho * s.u + (1.0 - rho) * (delta * delta)
        p.value -= alpha * delta


_STEPS = {
    "sgd_momentum": sgd_momentum_step,
    "adam": adam_step,
    "adamw": adam_step,
    "adax": adax_step,
    "adagrad": adagrad_step,
    "rmsprop": rmsprop_step,
    "adadelta": adadelta_step,
}


class Optimizer:
    """Stateful wrapper binding a config to a parameter list."""

    def __init__(self, params, cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.states = init_states(self.params)
        self.alpha = cfg.alpha

    @property
    def t(self):
        return self.states[0].t if self.states else 0

    def step(self):
        _STEPS[self.cfg.algorithm](self.cfg, self.params, self.states, alpha=self.alpha)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def schedule_lr(base_alpha, epoch, total_epochs):
    """Step schedule: the base rate for the first half of training, a tenth after."""
    return base_alpha if epoch < total_epochs / 2 else base_alpha / 10.0


def accumulate_and_step(optimizer: Optimizer, network, micro_batches):
    """Average gradients over ``micro_batches`` then take one step.

    Each micro-batch is ``(images, mask, edge)``.  Returns the mean loss.
    """
    from .net import loss_and_grad

    k = len(micro_batches)
    if k < 1:
        raise ValueError("accumulation needs at least one micro-batch")
    network.zero_grad()
    total = 0.0
    for images, mask, edge in micro_batches:
        total += loss_and_grad(network, images, mask, edge)
    for p in optimizer.params:
        p.grad /= k
    optimizer.step()
    network.zero_grad()
    return total / k


# ---------------------------------------------------------------------------
# Benchmark tasks
# ---------------------------------------------------------------------------

ROSENBROCK_START = (-1.2, 1.0)

BENCH_ALPHAS = {
    "quadratic": dict(adadelta=1.0, adam=1e-3, adagrad=1e-2, rmsprop=1e-3, adamw=1e-3, adax=1e-3, sgd_momentum=1e-3),
    "rosenbrock": dict(adadelta=1.0, adam=1e-2, adagrad=1e-1, rmsprop=1e-3, adamw=1e-2, adax=1e-2, sgd_momentum=1e-4),
    "micro_sod": dict(adadelta=1.0, adam=1e-3, adagrad=1e-2, rmsprop=1e-3, adamw=1e-3, adax=1e-3, sgd_momentum=1e-2),
}


def quadratic(theta):
    return 0.5 * float(theta @ theta), theta.copy()


def rosenbrock(theta):
    x, y = theta
    f = (1.0 - x) ** 2 + 100.0 * (y - x * x) ** 2
    g = np.array([-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)])
    return float(f), g


def bench_config(task, algorithm, alpha=None):
    alpha = BENCH_ALPHAS[task][algorithm] if alpha is None else alpha
    return OptimizerConfig(algorithm, alpha=alpha, weight_decay=0.0)


def run_function(fn, theta0, cfg: OptimizerConfig, iterations):
    """Losses ``f(theta_0), ..., f(theta_iterations)`` along the optimizer path."""
    p = Param(np.array(theta0, dtype=float))
    opt = Optimizer([p], cfg)
    trace = np.empty(iterations + 1)
    for i in range(iterations + 1):
        f, g = fn(p.value)
        trace[i] = f
        if i == iterations:
            break
        p.grad[...] = g
        opt.step()
    return trace, opt


MICRO_SOD_SAMPLES = 8
MICRO_SOD_RENDER = 16


def micro_sod_setup(seed=0, samples=MICRO_SOD_SAMPLES):
    """Default-width network on a handful of 32x32 samples.

    Samples are rendered at 16 px and nearest-upsampled 2x (image, mask and
    edge alike).  Every side map is predicted at half resolution, so the
    blocky targets are exactly representable and the loss can approach zero;
    the benchmark then measures the optimizer rather than the resolution floor.
    """
    from .data import SampleRecord, generate_sample, sample_seed
    from .engine import upsample_nearest
    from .net import NetConfig

    cfg = NetConfig(input_size=2 * MICRO_SOD_RENDER)
    data = []
    for i in range(samples):
        s = generate_sample(sample_seed(seed, i), MICRO_SOD_RENDER, i)
        image, mask, edge = (upsample_nearest(a[None], 2)[0] for a in (s.image, s.mask, s.edge))
        data.append(SampleRecord(image, mask, edge, s.id, s.seed))
    return cfg, data


def dataset_loss(net, data):
    from .net import total_loss

    return float(np.mean([total_loss(net(s.image[None]), s.mask[None], s.edge[None]) for s in data]))


def run_micro_sod(cfg_opt: OptimizerConfig, epochs, seed=0, accumulation=2):
    """Train the tiny benchmark net; returns full-set loss before training and after each epoch."""
    from .net import build_network

    net_cfg, data = micro_sod_setup(seed)
    net = build_network(net_cfg, seed=seed)
    opt = Optimizer(net.parameters(), cfg_opt)
    trace = [dataset_loss(net, data)]
    for _ in range(epochs):
        for start in range(0, len(data), accumulation):
            chunk = data[start:start + accumulation]
            accumulate_and_step(opt, net, [(s.image[None], s.mask[None], s.edge[None]) for s in chunk])
        trace.append(dataset_loss(net, data))
    return np.array(trace)


TASKS = ("quadratic", "rosenbrock", "micro_sod")


def optbench(task, algorithms=BENCH_ALGORITHMS, iterations=500, seed=0, alphas=None):
    """Loss traces per algorithm from one shared initialization.

    For ``micro_sod`` ``iterations`` counts epochs; the other tasks count
    optimizer steps.
    """
    if task not in TASKS:
        raise ValueError(f"unknown optbench task {task!r}; choose from {', '.join(TASKS)}")
    alphas = alphas or {}
    traces = {}
    if task == "quadratic":
        theta0 = np.random.default_rng(seed).uniform(1.0, 2.0, size=8) * np.resize([1.0, -1.0], 8)
    elif task == "rosenbrock":
        theta0 = np.array(ROSENBROCK_START)
    for alg in algorithms:
        cfg = bench_config(task, alg, alphas.get(alg))
        if task == "micro_sod":
            traces[alg] = run_micro_sod(cfg, iterations, seed=seed)
        else:
            traces[alg], _ = run_function(quadratic if task == "quadratic" else rosenbrock, theta0, cfg, iterations)
    return traces


def write_trace_csv(path, traces):
    names = list(traces)
    rows = len(next(iter(traces.values()))) if names else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter"] + names)
        for i in range(rows):
            w.writerow([i] + [repr(float(traces[n][i])) for n in names])
