"""Prequential description lengths, trapezoid approximation and evidence tables.

A labels-only message is sent block by block: the first ``n_0`` labels
under the uniform code, then every later block under the calibrated
predictions of a model trained (with the full recipe, learning-rate sweep
included) on everything sent so far. Inputs are common knowledge.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from .calib import CalibPolicy, calibrated_probs, predict_logits
from .data import Dataset, SplitSpec, make_prefix_chain, split_train_calib
from .nn import ModelSpec
from .optim import EpochConvention, OptimizerSpec, TrainRun, sweep_lr

PROB_FLOOR = 2.0 ** -16


@dataclass(frozen=True)
class TrainingRecipe:
    """Everything a receiver needs to rebuild the sender's models."""

    model: ModelSpec
    optimizer: OptimizerSpec = OptimizerSpec()
    policy: CalibPolicy = CalibPolicy()
    calib_fraction: float = 0.10
    full_dataset_size: int | None = None

    def to_dict(self) -> dict:
        opt = self.optimizer
        return {
            "model": self.model.to_dict(),
            "optimizer": {
                "kind": opt.kind, "learning_rates": list(opt.learning_rates), "epochs": opt.epochs,
                "batch_size": opt.batch_size, "momentum": opt.momentum, "epsilon": opt.epsilon,
                "beta1": opt.beta1, "beta2": opt.beta2, "rms_decay": opt.rms_decay,
            },
            "policy": {
                "train_steps_per_calib_step": self.policy.train_steps_per_calib_step,
                "batch_size": self.policy.batch_size, "lr": self.policy.lr,
                "refine_steps": self.policy.refine_steps,
            },
            "calib_fraction": self.calib_fraction,
            "full_dataset_size": self.full_dataset_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingRecipe":
        return cls(
            model=ModelSpec.from_dict(d["model"]),
            optimizer=OptimizerSpec(**{**d.get("optimizer", {}),
                                       "learning_rates": tuple(d.get("optimizer", {}).get("learning_rates", ()))}),
            policy=CalibPolicy(**d.get("policy", {})),
            calib_fraction=d.get("calib_fraction", 0.10),
            full_dataset_size=d.get("full_dataset_size"),
        )


def fit(recipe: TrainingRecipe, available: Dataset, seed: int, full_dataset_size: int | None = None) -> TrainRun:
    """Split, sweep learning rates, train and calibrate on ``available``."""
    train_set, calib_set = split_train_calib(available, SplitSpec(recipe.calib_fraction, seed))
    full = recipe.full_dataset_size or full_dataset_size or len(available)
    convention = EpochConvention(full, recipe.optimizer.batch_size)
    _, run = sweep_lr(recipe.model, recipe.optimizer, train_set, calib_set, convention, seed, recipe.policy)
    return run


@dataclass(frozen=True)
class BlockSchedule:
    boundaries: tuple

    def __post_init__(self):
        b = tuple(int(v) for v in self.boundaries)
        if not b or b[0] < 1 or any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError(f"block boundaries must be strictly increasing and >= 1, got {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def n0(self) -> int:
        return self.boundaries[0]

    @property
    def total(self) -> int:
        return self.boundaries[-1]

    @property
    def num_blocks(self) -> int:
        return len(self.boundaries)

    @classmethod
    def geometric(cls, total: int, n0: int, factor: float = 2.0) -> "BlockSchedule":
        if n0 >= total:
            return cls((total,))
        b = [n0]
        while b[-1] * factor < total:
            nxt = int(math.floor(b[-1] * factor))
            b.append(max(nxt, b[-1] + 1))
        b.append(total)
        return cls(tuple(b))

    def halved(self) -> "BlockSchedule":
        """Every other boundary, always keeping the first and last."""
        b = list(self.boundaries[::2])
        if b[-1] != self.total:
            b.append(self.total)
        return BlockSchedule(tuple(b))


@dataclass(frozen=True, eq=False)
class BlockRecord:
    block: int
    n_train: int
    example_ids: np.ndarray
    nats: np.ndarray
    lr: float | None = None
    params_digest: str = ""

    @property
    def total(self) -> float:
        return math.fsum(self.nats.tolist())


@dataclass(eq=False)
class CodeLedger:
    num_classes: int
    blocks: list = field(default_factory=list)

    def entries(self) -> list[float]:
        return [v for rec in self.blocks for v in rec.nats.tolist()]

    @property
    def total(self) -> float:
        return math.fsum(self.entries())

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "n_train", "example_index", "nats"])
        for rec in self.blocks:
            for i, v in zip(rec.example_ids.tolist(), rec.nats.tolist()):
                w.writerow([rec.block, rec.n_train, i, repr(v)])
        return buf.getvalue()


@dataclass(frozen=True)
class DLEstimate:
    model: str
    boundaries: tuple
    dl: float
    replicates: tuple = ()
    seed_std: float = 0.0
    resolution_std: float = 0.0
    dataset_id: str = ""

    @property
    def uncertainty(self) -> float:
        return math.hypot(self.seed_std, self.resolution_std)

    def to_dict(self) -> dict:
        return {
            "model": self.model, "boundaries": list(self.boundaries), "dl_nats": self.dl,
            "dl_bits": self.dl / math.log(2), "replicates": list(self.replicates), "seed_std": self.seed_std,
            "resolution_std": self.resolution_std, "uncertainty": self.uncertainty, "dataset_id": self.dataset_id,
        }


def floor_probs(probs: np.ndarray, eps: float = PROB_FLOOR) -> np.ndarray:
    k = probs.shape[-1]
    if k * eps >= 1.0:
        raise ValueError("probability floor too large for the number of classes")
    return (1.0 - k * eps) * probs + eps


def prequential_order(dataset: Dataset, schedule: BlockSchedule, seed: int) -> np.ndarray:
    """Transmission order: one seeded permutation, so prefixes are nested."""
    if schedule.total != len(dataset):
        raise ValueError(f"schedule covers {schedule.total} examples, dataset has {len(dataset)}")
    return make_prefix_chain(dataset, schedule.boundaries, seed).permutation


def block_predictions(recipe: TrainingRecipe, x_ordered: np.ndarray, y_known: np.ndarray, num_classes: int,
                      schedule: BlockSchedule, seed: int) -> Iterator[tuple[int, TrainRun, np.ndarray]]:
    """Yield (block, run, floored probs) for blocks 1..B.

    ``y_known`` is read lazily: when block b is requested only its first
    ``boundaries[b-1]`` entries must be filled in, which is what lets the
    decoder share this path with the encoder.
    """
    b = schedule.boundaries
    for i in range(1, len(b)):
        lo, hi = b[i - 1], b[i]
        available = Dataset(x_ordered[:lo], np.asarray(y_known[:lo]).copy(), num_classes)
        run = fit(recipe, available, seed, full_dataset_size=schedule.total)
        logits = predict_logits(recipe.model, run.params, x_ordered[lo:hi])
        probs = floor_probs(calibrated_probs(logits, run.temperature))
        yield i, run, probs


def prequential_dl(recipe: TrainingRecipe, dataset: Dataset, schedule: BlockSchedule, seed: int,
                   name: str = "model") -> tuple[DLEstimate, CodeLedger]:
    order = prequential_order(dataset, schedule, seed)
    ordered = dataset.take(order)
    k = dataset.num_classes
    ledger = CodeLedger(k)
    n0 = schedule.n0
    ledger.blocks.append(BlockRecord(0, 0, ordered.ids[:n0], np.full(n0, math.log(k))))
    for i, run, probs in block_predictions(recipe, ordered.x, ordered.y, k, schedule, seed):
        lo, hi = schedule.boundaries[i - 1], schedule.boundaries[i]
        y = ordered.y[lo:hi]
        nats = -np.log(probs[np.arange(hi - lo), y])
        ledger.blocks.append(BlockRecord(i, lo, ordered.ids[lo:hi], nats, run.lr0, run.digest()))
    est = DLEstimate(name, schedule.boundaries, ledger.total, (ledger.total,), dataset_id=dataset.input_digest())
    return est, ledger


def prequential_curve(ledger: CodeLedger) -> list[tuple[int, float]]:
    """(training-set size, mean generalization nats) points of a ledger.

    Each model is placed at the prefix size it was trained on; the last one
    is extended flat to the full dataset size.
    """
    pts = []
    for rec in ledger.blocks[1:]:
        pts.append((rec.n_train, float(np.mean(rec.nats))))
    if not pts:
        n = len(ledger.blocks[0].nats)
        return [(n, math.log(ledger.num_classes))]
    last = ledger.blocks[-1]
    pts.append((last.n_train + len(last.nats), pts[-1][1]))
    return pts


def step_curve(ledger: CodeLedger) -> list[tuple[int, float]]:
    """Piecewise-constant curve: each block's mean nats held across the block."""
    pts = []
    for rec in ledger.blocks[1:]:
        mean = float(np.mean(rec.nats))
        pts += [(rec.n_train, mean), (rec.n_train + len(rec.nats), mean)]
    if not pts:
        n = len(ledger.blocks[0].nats)
        return [(n, math.log(ledger.num_classes))]
    return pts


def halve_curve(curve):
    out = list(curve[::2])
    if out[-1] != curve[-1]:
        out.append(curve[-1])
    return out


def auc_dl(curve, num_classes: int) -> float:
    """Uniform code for the first ``n_0`` labels plus the trapezoid area of the curve.

    Repeated sizes are allowed (zero-width segments); decreasing sizes are not.
    """
    if not curve:
        raise ValueError("empty curve")
    ns = [int(n) for n, _ in curve]
    if any(b < a for a, b in zip(ns, ns[1:])):
        raise ValueError("curve sizes must be sorted")
    terms = [ns[0] * math.log(num_classes)]
    for (n_a, l_a), (n_b, l_b) in zip(curve, curve[1:]):
        terms.append(0.5 * (l_a + l_b) * (n_b - n_a))
    return math.fsum(terms)


def _dl_task(task):
    return prequential_dl(*task)


def estimate_dl(recipe: TrainingRecipe, dataset: Dataset, schedule: BlockSchedule, seeds, name: str = "model",
                map_fn=map):
    """Mean DL over seeds; uncertainty combines seed spread and curve resolution.

    ``map_fn`` must preserve order (builtin ``map`` or ``Executor.map``).
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    ledgers, dls, res = [], [], []
    results = map_fn(_dl_task, [(recipe, dataset, schedule, s, name) for s in seeds])
    for est, ledger in results:
        ledgers.append(ledger)
        dls.append(est.dl)
        curve = prequential_curve(ledger)
        pair = [auc_dl(curve, dataset.num_classes), auc_dl(halve_curve(curve), dataset.num_classes)]
        res.append(float(np.std(pair, ddof=1)))
    seed_std = float(np.std(dls, ddof=1)) if len(dls) > 1 else 0.0
    est = DLEstimate(name, schedule.boundaries, float(np.mean(dls)), tuple(dls), seed_std, float(np.mean(res)),
                     dataset.input_digest())
    return est, ledgers


def log10_bayes_factor(delta_nats: float) -> float:
    """Decimal orders of magnitude of exp(delta_nats), without exponentiating."""
    if not math.isfinite(delta_nats):
        raise ValueError("delta must be finite")
    return delta_nats / math.log(10.0)


@dataclass(frozen=True)
class EvidenceTable:
    names: tuple
    dls: tuple
    uncertainties: tuple

    def _idx(self, name):
        return self.names.index(name)

    def cell(self, a: str, b: str) -> tuple[float, float]:
        """DL(a) - DL(b) in nats (positive: evidence favours b) and its uncertainty."""
        i, j = self._idx(a), self._idx(b)
        return self.dls[i] - self.dls[j], math.hypot(self.uncertainties[i], self.uncertainties[j])

    def cell_exact(self, a: str, b: str) -> Fraction:
        return Fraction(self.dls[self._idx(a)]) - Fraction(self.dls[self._idx(b)])

    def ranking(self) -> list[str]:
        """Model names from shortest to longest description length."""
        return [n for _, n in sorted(zip(self.dls, self.names))]

    def to_csv(self, comment: str | None = None) -> str:
        """Lower-triangular layout: row minus column, ``delta ± uncertainty``."""
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["DL(row)-DL(col)"] + list(self.names[:-1]))
        for i, a in enumerate(self.names):
            row = [a]
            for j, b in enumerate(self.names[:-1]):
                if j < i:
                    d, u = self.cell(a, b)
                    row.append(f"{d:.2f} ± {u:.2f}")
                else:
                    row.append("")
            w.writerow(row)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"names": list(self.names), "dl_nats": list(self.dls),
                           "uncertainty": list(self.uncertainties)}, sort_keys=True, indent=2)


def evidence_table(estimates) -> EvidenceTable:
    estimates = list(estimates)
    if len(estimates) < 2:
        raise ValueError("need at least two estimates")
    ref = estimates[0]
    for e in estimates[1:]:
        if e.dataset_id != ref.dataset_id or tuple(e.boundaries) != tuple(ref.boundaries):
            raise ValueError(f"estimate {e.model!r} was computed on a different dataset or schedule")
    names = tuple(e.model for e in estimates)
    if len(set(names)) != len(names):
        raise ValueError("model names must be unique")
    return EvidenceTable(names, tuple(e.dl for e in estimates), tuple(e.uncertainty for e in estimates))
