"""Optimizers, learning-rate sweeps and the deterministic training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .calib import CalibPolicy, Temperature, calib_step, calibrated_xent, per_example_nats, predict_logits, refine_temperature
from .rng import Stream, derive_key

KINDS = ("adam", "momentum_sgd_cosine", "rmsprop_cosine")

_DEFAULT_LRS = {
    "adam": (1e-4, 3e-4, 1e-3),
    "momentum_sgd_cosine": (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1),
    "rmsprop_cosine": (0.03, 0.1, 0.3),
}
_DEFAULT_EPS = {"adam": 1e-8, "momentum_sgd_cosine": 1e-4, "rmsprop_cosine": 1.0}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerSpec:
    """Optimizer kind and its hyperparameters.

    ``epsilon`` defaults per kind: 1e-8 (Adam), 1e-4 (momentum SGD; the
    heavy-ball update has no epsilon term, the value is carried for
    provenance only) and 1.0 (RMSProp).
    """

    kind: str = "adam"
    learning_rates: tuple = ()
    epochs: int = 50
    batch_size: int = 256
    momentum: float = 0.9
    epsilon: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    rms_decay: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        lrs = tuple(float(v) for v in (self.learning_rates or _DEFAULT_LRS[self.kind]))
        if not lrs or any(not v > 0 for v in lrs):
            raise ValueError("learning-rate candidates must be positive")
        object.__setattr__(self, "learning_rates", lrs)
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", _DEFAULT_EPS[self.kind])
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def cosine(self) -> bool:
        return self.kind != "adam"


@dataclass(frozen=True)
class EpochConvention:
    """An epoch is the number of steps needed to see the *full* dataset once."""

    full_dataset_size: int
    batch_size: int = 256

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.full_dataset_size / self.batch_size)


@dataclass
class OptState:
    step: int = 0
    slots: dict = field(default_factory=dict)


def init_state(spec: OptimizerSpec, params) -> OptState:
    zeros = lambda: [np.zeros_like(p) for p in params]  # noqa: E731
    if spec.kind == "adam":
        return OptState(0, {"m": zeros(), "v": zeros()})
    if spec.kind == "momentum_sgd_cosine":
        return OptState(0, {"velocity": zeros()})
    return OptState(0, {"ms": zeros(), "mom": zeros()})


def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return lr0
    step = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def optimizer_step(spec: OptimizerSpec, state: OptState, params, grads, lr: float):
    """Return updated (params, state); inputs are not modified."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    t = state.step + 1
    new_params = []
    if spec.kind == "adam":
        b1, b2 = spec.beta1, spec.beta2
        m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.slots["m"], grads)]
        v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.slots["v"], grads)]
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        for p, mi, vi in zip(params, m, v):
            new_params.append(p - lr * (mi / c1) / (np.sqrt(vi / c2) + spec.epsilon))
        slots = {"m": m, "v": v}
    elif spec.kind == "momentum_sgd_cosine":
        vel = [spec.momentum * vi + g for vi, g in zip(state.slots["velocity"], grads)]
        new_params = [p - lr * vi for p, vi in zip(params, vel)]
        slots = {"velocity": vel}
    else:
        # momentum RMSProp: mom <- mu*mom + lr*g/sqrt(ms+eps)
        rho = spec.rms_decay
        ms = [rho * si + (1 - rho) * g * g for si, g in zip(state.slots["ms"], grads)]
        mom = [spec.momentum * mi + lr * g / np.sqrt(si + spec.epsilon)
               for mi, g, si in zip(state.slots["mom"], grads, ms)]
        new_params = [p - mi for p, mi in zip(params, mom)]
        slots = {"ms": ms, "mom": mom}
    return new_params, OptState(t, slots)


@dataclass(frozen=True)
class HistoryRecord:
    step: int
    train_nats: float
    calib_nats_raw: float
    calib_nats_cal: float
    calib_err: float
    lr: float


@dataclass
class TrainRun:
    params: list
    temperature: Temperature
    lr0: float
    steps: int
    history: list
    calib_nats: float
    calib_nats_raw: float
    calib_err: float
    lr_drops: int = 0

    def digest(self) -> str:
        return nn.params_digest(self.params, self.temperature.log_t)


GradHook = Callable[[int, list], list]
BatchHook = Callable[[int, np.ndarray], None]


class _Loop:
    """Shared minibatch / calibration machinery for fixed and annealed training."""

    def __init__(self, model_spec, opt_spec, train_set, calib_set, convention, seed, policy,
                 grad_hook, batch_hook):
        if len(train_set) == 0 or len(calib_set) == 0:
            raise TrainingError("training and calibration sets must be non-empty")
        self.model_spec = model_spec
        self.opt_spec = opt_spec
        self.train_set = train_set
        self.calib_set = calib_set
        self.convention = convention or EpochConvention(len(train_set) + len(calib_set), opt_spec.batch_size)
        self.seed = seed
        self.policy = policy
        self.grad_hook = grad_hook
        self.batch_hook = batch_hook
        self.params = nn.init_params(model_spec, seed)
        self.state = init_state(opt_spec, self.params)
        self.temperature = Temperature()
        self.dropout_seed = derive_key(seed, "dropout")
        self.batch = min(opt_spec.batch_size, len(train_set))
        self.calib_batch = min(policy.batch_size or opt_spec.batch_size, len(calib_set))
        self._order = np.empty(0, dtype=np.int64)
        self._pass = 0
        self._calib_draws = 0
        self._loss_sum = 0.0
        self._loss_n = 0
        self.history: list[HistoryRecord] = []

    def _next_batch(self) -> np.ndarray:
        while self._order.shape[0] < self.batch:
            perm = Stream(self.seed, "shuffle", self._pass).permutation(len(self.train_set))
            self._order = np.concatenate([self._order, perm])
            self._pass += 1
        idx, self._order = self._order[:self.batch], self._order[self.batch:]
        return idx

    def step(self, t: int, lr: float) -> None:
        idx = self._next_batch()
        if self.batch_hook is not None:
            self.batch_hook(t, self.train_set.ids[idx])
        loss, grads = nn.backward(self.model_spec, self.params, self.train_set.x[idx], self.train_set.y[idx],
                                  1.0, "train", self.dropout_seed, t)
        if self.grad_hook is not None:
            grads = self.grad_hook(t, grads)
        self.params, self.state = optimizer_step(self.opt_spec, self.state, self.params, grads, lr)
        self._loss_sum += loss
        self._loss_n += 1
        if (t + 1) % self.policy.train_steps_per_calib_step == 0:
            perm = Stream(self.seed, "calib_batch", self._calib_draws).permutation(len(self.calib_set))
            self._calib_draws += 1
            cidx = perm[:self.calib_batch]
            logits = nn.forward(self.model_spec, self.params, self.calib_set.x[cidx])
            self.temperature = calib_step(self.temperature, logits, self.calib_set.y[cidx], self.policy.lr)

    def calib_logits(self) -> np.ndarray:
        return predict_logits(self.model_spec, self.params, self.calib_set.x)

    def record(self, t: int, lr: float, calib_nats: float | None = None) -> HistoryRecord:
        logits = self.calib_logits()
        raw = float(np.mean(per_example_nats(logits, self.calib_set.y, 1.0)))
        cal = calib_nats if calib_nats is not None else float(
            np.mean(per_example_nats(logits, self.calib_set.y, self.temperature)))
        err = float(np.mean(np.argmax(logits, axis=1) != self.calib_set.y))
        train_nats = self._loss_sum / self._loss_n if self._loss_n else float("nan")
        self._loss_sum, self._loss_n = 0.0, 0
        rec = HistoryRecord(t, train_nats, raw, cal, err, lr)
        self.history.append(rec)
        return rec

    def finish(self, lr0: float, steps: int, refine: bool, lr_drops: int = 0) -> TrainRun:
        if refine and self.policy.refine_steps > 0:
            self.temperature = refine_temperature(self.calib_logits(), self.calib_set.y, self.temperature,
                                                  self.policy.refine_steps, self.policy.lr)
        cal = calibrated_xent(self.model_spec, self.params, self.temperature, self.calib_set)
        raw = calibrated_xent(self.model_spec, self.params, 1.0, self.calib_set)
        return TrainRun(self.params, self.temperature, lr0, steps, self.history, cal.nats_mean, raw.nats_mean,
                        cal.error_rate, lr_drops)


def train(model_spec, opt_spec: OptimizerSpec, lr0: float, train_set, calib_set,
          convention: EpochConvention | None = None, seed: int = 0, policy: CalibPolicy = CalibPolicy(),
          grad_hook: GradHook | None = None, batch_hook: BatchHook | None = None) -> TrainRun:
    """Train for ``epochs * steps_per_epoch`` steps with interleaved calibration.

    Weight gradients only ever see ``train_set``; ``calib_set`` drives the
    temperature and the per-epoch history records.
    """
    loop = _Loop(model_spec, opt_spec, train_set, calib_set, convention, seed, policy, grad_hook, batch_hook)
    spe = loop.convention.steps_per_epoch
    total = opt_spec.epochs * spe
    for t in range(total):
        lr = cosine_lr(lr0, t, total) if opt_spec.cosine else lr0
        loop.step(t, lr)
        if (t + 1) % spe == 0:
            loop.record(t + 1, lr)
    return loop.finish(lr0, total, refine=total > 0)


def sweep_lr(model_spec, opt_spec: OptimizerSpec, train_set, calib_set, convention=None, seed: int = 0,
             policy: CalibPolicy = CalibPolicy()) -> tuple[float, TrainRun]:
    """Train once per candidate; keep the lowest calibrated calibration loss.

    Ties go to the smaller learning rate (the earlier candidate if equal).
    """
    best_lr, best = None, None
    for lr in opt_spec.learning_rates:
        run = train(model_spec, opt_spec, lr, train_set, calib_set, convention, seed, policy)
        if best is None or run.calib_nats < best.calib_nats or (run.calib_nats == best.calib_nats and lr < best_lr):
            best_lr, best = lr, run
    return best_lr, best


def train_auto_anneal(model_spec, opt_spec: OptimizerSpec, initial_lr: float, train_set, calib_set,
                      convention: EpochConvention | None = None, seed: int = 0,
                      policy: CalibPolicy = CalibPolicy(), patience: int = 3, drop_factor: float = 10.0,
                      floor_ratio: float = 1e-3, max_steps: int | None = None,
                      grad_hook: GradHook | None = None) -> TrainRun:
    """Constant learning rate, divided by ``drop_factor`` on calibration plateaus.

    Once per epoch the temperature is refit on the full calibration set and
    the calibrated loss compared with the best so far. After ``patience``
    evaluations without improvement the rate drops; training ends when it
    reaches ``floor_ratio * initial_lr`` or after ``max_steps`` steps
    (default: ten times the fixed schedule).
    """
    loop = _Loop(model_spec, opt_spec, train_set, calib_set, convention, seed, policy, grad_hook, None)
    spe = loop.convention.steps_per_epoch
    if max_steps is None:
        max_steps = 10 * max(opt_spec.epochs, 1) * spe
    floor = initial_lr * floor_ratio * (1 + 1e-9)
    lr, best, stale, drops, t = initial_lr, math.inf, 0, 0, 0
    while t < max_steps:
        loop.step(t, lr)
        t += 1
        if t % spe:
            continue
        loop.temperature = refine_temperature(loop.calib_logits(), calib_set.y, loop.temperature,
                                              max(policy.refine_steps, 1), policy.lr)
        rec = loop.record(t, lr)
        if rec.calib_nats_cal < best:
            best, stale = rec.calib_nats_cal, 0
        else:
            stale += 1
        if stale >= patience:
            lr /= drop_factor
            drops += 1
            stale = 0
            if lr <= floor:
                break
    return loop.finish(initial_lr, t, refine=t > 0, lr_drops=drops)
