"""Scalar temperature calibration.

The temperature is stored as ``log_t`` so it stays positive without any
projection. Online calibration takes plain gradient steps on ``log_t``;
after training :func:`refine_temperature` runs a fixed number of further
full-batch steps. :func:`fit_temperature` is the exact minimizer (Newton in
the inverse temperature, where the loss is convex), used to check the
converged invariants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass(frozen=True)
class Temperature:
    log_t: float = 0.0
    steps: int = 0

    @property
    def value(self) -> float:
        return math.exp(self.log_t)


@dataclass(frozen=True)
class CalibPolicy:
    """How temperature updates are interleaved with training.

    One temperature step every ``train_steps_per_calib_step`` weight
    updates, on a calibration minibatch of ``batch_size`` examples
    (``None``: the training batch size, capped at the calibration-set size).
    ``refine_steps`` full-batch steps are run once training finishes.
    """

    train_steps_per_calib_step: int = 10
    batch_size: int | None = None
    lr: float = 0.01
    refine_steps: int = 200

    def __post_init__(self):
        if self.train_steps_per_calib_step < 1 or self.lr <= 0 or self.refine_steps < 0:
            raise ValueError(f"invalid calibration policy {self}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("calibration batch size must be positive")


@dataclass(frozen=True)
class CalibratedEval:
    nats_mean: float
    nats: np.ndarray
    error_rate: float


def _as_t(temperature) -> float:
    if isinstance(temperature, Temperature):
        return temperature.value
    return float(temperature)


def calibrated_probs(logits, temperature) -> np.ndarray:
    t = _as_t(temperature)
    if not t > 0:
        raise ValueError("temperature must be positive")
    return np.exp(nn.log_softmax(np.asarray(logits, dtype=np.float64) / t))


def per_example_nats(logits, labels, temperature) -> np.ndarray:
    logp = nn.log_softmax(np.asarray(logits, dtype=np.float64) / _as_t(temperature))
    labels = np.asarray(labels, dtype=np.int64)
    return -logp[np.arange(labels.shape[0]), labels]


def log_t_grad(logits, labels, log_t: float) -> tuple[float, float]:
    """Mean calibrated cross-entropy and its derivative w.r.t. ``log_t``."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    beta = math.exp(-log_t)
    logp = nn.log_softmax(z * beta)
    p = np.exp(logp)
    rows = np.arange(labels.shape[0])
    loss = float(np.mean(-logp[rows, labels]))
    # dCE/dbeta = mean(E_p[z] - z_y); dbeta/dlog_t = -beta
    dbeta = float(np.mean((p * z).sum(axis=1) - z[rows, labels]))
    return loss, -beta * dbeta


def calib_step(temperature: Temperature, logits, labels, lr: float) -> Temperature:
    """One gradient-descent step on ``log_t``; model parameters are not involved."""
    _, g = log_t_grad(logits, labels, temperature.log_t)
    return Temperature(temperature.log_t - lr * g, temperature.steps + 1)


def _beta_terms(z, labels, beta):
    logp = nn.log_softmax(z * beta)
    p = np.exp(logp)
    rows = np.arange(labels.shape[0])
    f = float(np.mean(-logp[rows, labels]))
    mean_z = (p * z).sum(axis=1)
    g = float(np.mean(mean_z - z[rows, labels]))
    h = float(np.mean((p * z * z).sum(axis=1) - mean_z * mean_z))
    return f, g, h


def _ce_at(z, labels, beta):
    logp = nn.log_softmax(z * beta)
    return float(np.mean(-logp[np.arange(labels.shape[0]), labels]))


def refine_temperature(logits, labels, temperature: Temperature, steps: int = 200, lr: float = 0.01) -> Temperature:
    """``steps`` full-batch gradient-descent steps on ``log_t`` after training."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    for _ in range(steps):
        temperature = calib_step(temperature, z, labels, lr)
    return temperature


def fit_temperature(logits, labels, temperature: Temperature = Temperature(), steps: int = 200) -> Temperature:
    """Exact minimizer of full-batch calibrated cross-entropy over the temperature.

    The loss is convex in beta = 1/T. Starts from whichever of the given
    temperature and T=1 scores lower, then runs up to ``steps`` Newton
    iterations on beta with backtracking, so the result never scores worse
    than T=1. On a perfectly separated set the minimizer is T -> 0.
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    beta = math.exp(-temperature.log_t)
    if _ce_at(z, labels, 1.0) < _ce_at(z, labels, beta):
        beta = 1.0
    taken = 0
    for _ in range(steps):
        f, g, h = _beta_terms(z, labels, beta)
        if abs(g) <= 1e-13 * max(1.0, abs(f)):
            break
        direction = -g / h if h > 1e-300 else -g
        t = 1.0
        while beta + t * direction <= 0.0:
            t *= 0.5
        accepted = False
        while t > 1e-12:
            cand = beta + t * direction
            if _ce_at(z, labels, cand) <= f + 1e-4 * t * g * direction:
                beta = cand
                accepted = True
                break
            t *= 0.5
        taken += 1
        if not accepted:
            break
    return Temperature(-math.log(beta), temperature.steps + taken)


def calibrated_xent(spec, params, temperature, dataset, batch_size: int = 4096) -> CalibratedEval:
    """Full-batch eval-mode cross-entropy at ``temperature`` plus error rate."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(spec, params, dataset.x, batch_size)
    nats = per_example_nats(logits, dataset.y, temperature)
    err = float(np.mean(np.argmax(logits, axis=1) != dataset.y))
    return CalibratedEval(float(np.mean(nats)), nats, err)


def predict_logits(spec, params, x, batch_size: int = 4096) -> np.ndarray:
    chunks = [nn.forward(spec, params, x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)
