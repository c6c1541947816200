"""Bootstrap signal-to-noise ratios and performance profiles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calib import calibrated_xent
from .data import Dataset, make_prefix_chain
from .rng import Stream


@dataclass(frozen=True)
class SnrEstimate:
    delta: float
    variance: float
    snr: float
    n_boot: int


def _as_eval_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError("an eval matrix is (seeds, examples) with at least one of each")
    if not np.isfinite(m).all():
        raise ValueError("eval matrix entries must be finite")
    return m


def bootstrap_snr(eval_a, eval_b, n_boot: int = 1000, seed: int = 0, resample: str = "joint") -> SnrEstimate:
    """SNR = sqrt(delta^2 / Var[delta]) for delta = mean(L_A - L_B).

    Each replicate resamples evaluation examples (columns) with replacement
    and, for ``resample="joint"``, seed rows as well. Rows of the two
    matrices are paired by index. 0/0 is reported as 0.
    """
    a, b = _as_eval_matrix(eval_a), _as_eval_matrix(eval_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("models were evaluated on different example sets")
    if a.shape[0] != b.shape[0]:
        raise ValueError("models need the same number of seed rows")
    if resample not in ("joint", "examples"):
        raise ValueError(f"unknown resampling mode {resample!r}")
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    d = a - b
    s, n = d.shape
    delta = float(d.mean())
    stream = Stream(seed, "bootstrap")
    reps = np.empty(n_boot)
    for r in range(n_boot):
        cols = stream.integers(n, n)
        if resample == "joint":
            rows = stream.integers(s, s)
            reps[r] = d[np.ix_(rows, cols)].mean()
        else:
            reps[r] = d[:, cols].mean()
    var = float(reps.var())
    if delta == 0.0:
        snr = 0.0
    elif var == 0.0:
        snr = math.inf
    else:
        snr = math.sqrt(delta * delta / var)
    return SnrEstimate(delta, var, snr, n_boot)


@dataclass(frozen=True)
class ProfilePoint:
    prefix_size: int
    nats: tuple
    error_rates: tuple

    @property
    def mean(self) -> float:
        return float(np.mean(self.nats))

    @property
    def std(self) -> float:
        return float(np.std(self.nats))

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.error_rates))


@dataclass
class Profile:
    points: list
    eval_matrices: dict  # prefix size -> (seeds, examples) per-example nats


def _profile_task(task):
    fit_fn, recipe, available, eval_set, seed, full = task
    overlap = np.intersect1d(available.ids, eval_set.ids)
    if overlap.size and available.provenance == eval_set.provenance:
        raise AssertionError(f"{overlap.size} evaluation examples leaked into training")
    run = fit_fn(recipe, available, seed, full)
    ev = calibrated_xent(recipe.model, run.params, run.temperature, eval_set)
    return ev.nats, ev.error_rate


def profile(recipe, dataset: Dataset, sizes, eval_set: Dataset, seeds, full_dataset_size: int | None = None,
            fit_fn=None, map_fn=map) -> Profile:
    """Calibrated held-out nats as a function of training-set size.

    Each seed draws its own i.i.d. prefix chain, so example selection,
    initialization and minibatching all vary across seeds. ``map_fn`` must
    preserve order; with a process pool ``fit_fn`` must be picklable.
    """
    from .prequential import fit

    fit_fn = fit_fn or fit
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    if eval_set.num_classes != dataset.num_classes:
        raise ValueError("evaluation set has a different label space")
    full = full_dataset_size or len(dataset)
    chains = {s: make_prefix_chain(dataset, sizes, s) for s in seeds}
    sizes = chains[seeds[0]].sizes
    tasks = [(fit_fn, recipe, dataset.take(chains[s].subset_indices(n)), eval_set, s, full)
             for n in sizes for s in seeds]
    results = iter(map_fn(_profile_task, tasks))
    points, mats = [], {}
    for n in sizes:
        rows, nats, errs = [], [], []
        for _ in seeds:
            per_example, err = next(results)
            rows.append(per_example)
            nats.append(float(np.mean(per_example)))
            errs.append(err)
        points.append(ProfilePoint(n, tuple(nats), tuple(errs)))
        mats[n] = np.stack(rows)
    return Profile(points, mats)


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)
