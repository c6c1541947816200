"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite.

Each function runs one self-contained study on synthetic data and returns
plain dataclasses; callers decide what to assert or write to disk.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import codec, data, nn, stats
from .calib import CalibPolicy, calibrated_xent, fit_temperature, per_example_nats, predict_logits
from .optim import EpochConvention, OptimizerSpec, sweep_lr, train, train_auto_anneal
from .prequential import (BlockSchedule, TrainingRecipe, auc_dl, estimate_dl, evidence_table, halve_curve,
                          prequential_curve, prequential_dl)


@dataclass(frozen=True)
class MixtureConfig:
    num_classes: int = 10
    dim: int = 8
    examples_per_class: int = 610
    separation: float = 1.5
    clusters_per_class: int = 2
    seed: int = 0

    def make(self) -> data.Dataset:
        return data.synth_mixture(self.num_classes, self.dim, self.examples_per_class, self.separation,
                                  self.seed, self.clusters_per_class)


def mlp(depth: int, width: int, dropout: float = 0.0) -> tuple:
    layers = []
    for _ in range(depth):
        layers.append(nn.Dense(width))
        if dropout:
            layers.append(nn.Dropout(dropout))
    return tuple(layers)


# overfitting and calibration

@dataclass
class OverfitResult:
    heldout_raw: float
    heldout_cal: float
    calib_ce_fit: float
    calib_ce_one: float
    error_raw: float
    error_cal: float
    temperature: float


def overfit_calibration(mix: MixtureConfig, n_train: int = 100, epochs: int = 200, width: int = 256,
                        n_heldout: int = 1000, n_calib: int | None = None, seed: int = 0) -> OverfitResult:
    """Train an MLP far past the point of overfitting; compare raw and calibrated held-out CE.

    The calibration set defaults to as many examples as the training set (a 50/50 split), so
    the fitted temperature is not at the mercy of a dozen draws.
    """
    ds = mix.make()
    pool, heldout = data.holdout(ds, n_heldout, seed)
    n_calib = n_train if n_calib is None else n_calib
    avail = pool.take(np.arange(n_train + n_calib))
    tr, ca = data.split_train_calib(avail, data.SplitSpec(n_calib / (n_train + n_calib), seed))
    spec = nn.ModelSpec((ds.dim,), ds.num_classes, mlp(2, width))
    opt = OptimizerSpec("adam", (1e-3,), epochs=epochs, batch_size=32)
    run = train(spec, opt, 1e-3, tr, ca, EpochConvention(len(avail), 32), seed)
    raw = calibrated_xent(spec, run.params, 1.0, heldout)
    cal = calibrated_xent(spec, run.params, run.temperature, heldout)
    z = predict_logits(spec, run.params, ca.x)
    t_star = fit_temperature(z, ca.y, run.temperature)
    return OverfitResult(raw.nats_mean, cal.nats_mean, float(np.mean(per_example_nats(z, ca.y, t_star))),
                         float(np.mean(per_example_nats(z, ca.y, 1.0))), raw.error_rate, cal.error_rate,
                         run.temperature.value)


# prequential code vs. actual bitstream

@dataclass
class CodecResult:
    n: int
    num_blocks: int
    bit_length: int
    shannon_bits: float
    dl_nats: float
    decoded_ok: bool
    message: bytes = field(repr=False, default=b"")

    @property
    def dl_bits(self) -> float:
        return self.dl_nats / math.log(2)


def codec_agreement(mix: MixtureConfig, recipe: TrainingRecipe, seed: int = 0, n0: int | None = None) -> CodecResult:
    ds = mix.make()
    schedule = BlockSchedule.geometric(len(ds), n0 or 2 * ds.num_classes)
    msg = codec.encode_dataset(ds, recipe, schedule, seed)
    blob = msg.to_bytes()
    decoded = codec.decode_dataset(codec.EncodedMessage.from_bytes(blob), ds.x)
    return CodecResult(len(ds), schedule.num_blocks, msg.bit_length, msg.header["shannon_bits"],
                       msg.header["dl_nats"], bool(np.array_equal(decoded, ds.y)), blob)


@dataclass
class HalvingResult:
    auc_full: tuple  # per seed
    auc_halved: tuple

    @property
    def sensitivity(self) -> float:
        """Relative change of the seed-averaged AUC (the trapezoid is linear in the curve)."""
        full, halved = float(np.mean(self.auc_full)), float(np.mean(self.auc_halved))
        return abs(halved - full) / full

    @property
    def per_seed(self) -> list:
        return [abs(h - f) / f for f, h in zip(self.auc_full, self.auc_halved)]


def halving_probe(mix: MixtureConfig, recipe: TrainingRecipe, seeds=range(3), n0: int | None = None) -> HalvingResult:
    """AUC of each seed's prequential curve at full and at halved schedule resolution."""
    ds = mix.make()
    schedule = BlockSchedule.geometric(len(ds), n0 or 2 * ds.num_classes)
    full, halved = [], []
    for s in seeds:
        _, ledger = prequential_dl(recipe, ds, schedule, s)
        curve = prequential_curve(ledger)
        full.append(auc_dl(curve, ds.num_classes))
        halved.append(auc_dl(halve_curve(curve), ds.num_classes))
    return HalvingResult(tuple(full), tuple(halved))


# ranking preservation across training-set sizes

@dataclass
class RankingResult:
    sizes: tuple
    means: dict  # model -> tuple of mean nats per size
    snr: dict  # (size, a, b) -> SnrEstimate
    dl: dict  # model -> DLEstimate
    full_ranking: list
    mdl_ranking: list
    violations: list

    @property
    def consistent(self) -> bool:
        return not self.violations


def consistent_order(means: dict, snr: dict, sizes, threshold: float = 2.0) -> list:
    """Pairs whose resolved (SNR >= threshold) ordering flips between prefix sizes."""
    names = list(means)
    violations = []
    for a, b in itertools.combinations(names, 2):
        signs = {}
        for i, n in enumerate(sizes):
            if snr[(n, a, b)].snr >= threshold:
                signs[n] = np.sign(means[a][i] - means[b][i])
        if len(set(signs.values())) > 1:
            violations.append((a, b, signs))
    return violations


def ranking_preservation(mix: MixtureConfig, models: dict, opt: OptimizerSpec, sizes=(64, 256, 1024, 4096),
                         seeds=range(5), n_eval: int = 2004, mdl_seeds=range(2), n_boot: int = 1000,
                         map_fn=map) -> RankingResult:
    ds = mix.make()
    pool, ev = data.holdout(ds, n_eval, 0)
    sizes = tuple(sizes)
    recipes = {m: TrainingRecipe(nn.ModelSpec((ds.dim,), ds.num_classes, layers), opt, CalibPolicy())
               for m, layers in models.items()}
    profiles = {m: stats.profile(r, pool, sizes, ev, list(seeds), map_fn=map_fn) for m, r in recipes.items()}
    means = {m: tuple(p.mean for p in prof.points) for m, prof in profiles.items()}
    snr = {}
    for n in sizes:
        for a, b in itertools.combinations(models, 2):
            snr[(n, a, b)] = stats.bootstrap_snr(profiles[a].eval_matrices[n], profiles[b].eval_matrices[n],
                                                 n_boot=n_boot, seed=0)
    full_ranking = sorted(models, key=lambda m: means[m][-1])
    schedule = BlockSchedule.geometric(len(pool), 2 * ds.num_classes)
    dl = {m: estimate_dl(r, pool, schedule, list(mdl_seeds), m, map_fn=map_fn)[0] for m, r in recipes.items()}
    mdl_ranking = evidence_table(dl.values()).ranking()
    return RankingResult(sizes, means, snr, dl, full_ranking, mdl_ranking, consistent_order(means, snr, sizes))


# width sweep

@dataclass
class WidthResult:
    widths: tuple
    sizes: tuple
    means: dict  # width -> tuple of mean nats per size

    def best(self, i: int) -> float:
        return min(self.means[w][i] for w in self.widths)

    def widest_gap(self) -> list:
        return [self.means[self.widths[-1]][i] - self.best(i) for i in range(len(self.sizes))]

    def smallest_adequate(self, tol: float = 0.02) -> list:
        """Index of the narrowest width within ``tol`` of the best, per size."""
        return [next(j for j, w in enumerate(self.widths) if self.means[w][i] <= self.best(i) + tol)
                for i in range(len(self.sizes))]


def width_sweep(mix: MixtureConfig, widths, opt: OptimizerSpec, sizes, seeds=range(3), depth: int = 1,
                n_eval: int = 2000, map_fn=map) -> WidthResult:
    ds = mix.make()
    pool, ev = data.holdout(ds, n_eval, 0)
    means = {}
    for w in widths:
        recipe = TrainingRecipe(nn.ModelSpec((ds.dim,), ds.num_classes, mlp(depth, w)), opt, CalibPolicy())
        prof = stats.profile(recipe, pool, sizes, ev, list(seeds), map_fn=map_fn)
        means[w] = tuple(p.mean for p in prof.points)
    return WidthResult(tuple(widths), tuple(sizes), means)


# automatic annealing

@dataclass
class AnnealResult:
    fixed_steps: int
    fixed_nats: float
    anneal_steps: int
    anneal_nats: float
    lr_drops: int
    lr: float

    @property
    def relative_gap(self) -> float:
        return abs(self.anneal_nats - self.fixed_nats) / self.fixed_nats


def anneal_vs_fixed(mix: MixtureConfig, n: int = 1024, layers=None, opt: OptimizerSpec | None = None,
                    seed: int = 0) -> AnnealResult:
    """Fixed-length training at the swept learning rate vs. plateau-driven annealing from that rate."""
    ds = mix.make()
    avail = ds.take(data.make_prefix_chain(ds, (n,), seed).subset_indices(n))
    tr, ca = data.split_train_calib(avail, data.SplitSpec(0.1, seed))
    spec = nn.ModelSpec((ds.dim,), ds.num_classes, mlp(3, 256) if layers is None else layers)
    opt = opt or OptimizerSpec("adam", epochs=50)
    conv = EpochConvention(n, opt.batch_size)
    lr, fixed = sweep_lr(spec, opt, tr, ca, conv, seed)
    ann = train_auto_anneal(spec, opt, lr, tr, ca, conv, seed)
    return AnnealResult(fixed.steps, fixed.calib_nats, ann.steps, ann.calib_nats, ann.lr_drops, lr)

