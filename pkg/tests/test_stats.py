import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from preqsel import data, nn, prequential as pq, stats
from preqsel.calib import CalibPolicy
from preqsel.optim import OptimizerSpec
from preqsel.rng import Stream


def test_identical_models_have_zero_snr():
    m = Stream(0).uniform(3 * 50).reshape(3, 50)
    est = stats.bootstrap_snr(m, m.copy(), n_boot=100)
    assert est.snr == 0.0 and est.delta == 0.0 and est.variance == 0.0


def test_constant_shift_is_infinite_snr():
    m = Stream(1).uniform(2 * 30).reshape(2, 30)
    assert stats.bootstrap_snr(m + 0.5, m, n_boot=50).snr == math.inf


def test_default_replicate_count():
    m = Stream(2).uniform(20)
    assert stats.bootstrap_snr(m, m * 0.9).n_boot == 1000


def test_snr_grows_with_evaluation_set_size():
    s = Stream(3)
    snrs = []
    for n in (100, 400, 1600):
        noise = s.normal(4 * n).reshape(4, n)
        a = 1.0 + noise
        b = 1.0 + noise + 0.2 + s.normal(4 * n).reshape(4, n)
        snrs.append(stats.bootstrap_snr(a, b, n_boot=300, seed=0, resample="examples").snr)
    assert snrs[0] < snrs[1] < snrs[2]
    # sqrt(N) scaling, loosely
    assert snrs[2] / snrs[0] == pytest.approx(4.0, rel=0.35)


def test_snr_is_deterministic_and_seeded():
    s = Stream(4)
    a, b = s.uniform(300).reshape(3, 100), s.uniform(300).reshape(3, 100)
    x = stats.bootstrap_snr(a, b, n_boot=200, seed=9)
    assert x == stats.bootstrap_snr(a, b, n_boot=200, seed=9)
    assert x.variance != stats.bootstrap_snr(a, b, n_boot=200, seed=10).variance


dyadic = st.integers(-2**20, 2**20).map(lambda v: v / 1024)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(dyadic, dyadic), min_size=2, max_size=30), st.integers(-64, 64))
def test_snr_symmetric_and_offset_invariant(pairs, offset):
    a = np.array([[p for p, _ in pairs]])
    b = np.array([[q for _, q in pairs]])
    base = stats.bootstrap_snr(a, b, n_boot=64, seed=1)
    assert stats.bootstrap_snr(b, a, n_boot=64, seed=1).snr == base.snr
    shifted = stats.bootstrap_snr(a + offset, b + offset, n_boot=64, seed=1)
    assert shifted.snr == base.snr


def test_snr_rejects_mismatched_inputs():
    with pytest.raises(ValueError):
        stats.bootstrap_snr(np.zeros((2, 5)), np.zeros((2, 6)))
    with pytest.raises(ValueError):
        stats.bootstrap_snr(np.zeros(5), np.full(5, np.nan))
    with pytest.raises(ValueError):
        stats.bootstrap_snr(np.zeros(5), np.zeros(5), resample="rows")


def test_joint_resampling_sees_seed_variance():
    # identical per-example values but one bad seed: only joint resampling notices
    a = np.zeros((4, 50))
    a[0] += 1.0
    b = np.zeros((4, 50))
    ex = stats.bootstrap_snr(a, b, n_boot=200, resample="examples")
    joint = stats.bootstrap_snr(a, b, n_boot=200, resample="joint")
    assert ex.variance == 0.0 and joint.variance > 0.0


@pytest.fixture(scope="module")
def tiny_profile():
    ds = data.synth_mixture(3, 4, 120, 3.0, seed=5)
    train, ev = data.holdout(ds, 90, seed=0)
    recipe = pq.TrainingRecipe(nn.ModelSpec((4,), 3), OptimizerSpec("adam", (1e-2,), epochs=20, batch_size=32),
                               CalibPolicy())
    return stats.profile(recipe, train, (16, 64, 256), ev, seeds=(0, 1)), ev


def test_profile_shapes_and_trend(tiny_profile):
    prof, ev = tiny_profile
    assert [p.prefix_size for p in prof.points] == [16, 64, 256]
    for p in prof.points:
        assert len(p.nats) == 2 and prof.eval_matrices[p.prefix_size].shape == (2, len(ev))
        np.testing.assert_allclose(prof.eval_matrices[p.prefix_size].mean(axis=1), p.nats)
    assert prof.points[-1].mean < prof.points[0].mean
    assert prof.points[-1].mean < math.log(3)


def test_spearman():
    assert stats.spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert stats.spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
