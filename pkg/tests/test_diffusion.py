import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrmia import datagen, diffusion, ndcore
from qrmia.diffusion import DiffusionModel, make_schedule

from oracles import alphabar_by_product

# alphabar_T for T=1000, beta 1e-4..0.02, from an exact rational product.
ALPHABAR_1000 = 4.0358297653756835e-05


def constant_model(sched, data_dim=3, value=0.3, emb_width=4, residual_width=5):
    """Noise predictor that returns ``value`` everywhere, whatever z and t."""
    widths = [data_dim + emb_width, residual_width, data_dim]
    rng = np.random.default_rng(0)
    params = [rng.normal(size=(widths[0], widths[1])), rng.normal(size=widths[1]),
              np.zeros((widths[1], widths[2])), np.full(widths[2], value)]
    return DiffusionModel(sched, ndcore.Mlp(widths, params=params), data_dim, emb_width)


def test_two_step_schedule():
    s = make_schedule(2, 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha, [0.5, 0.5])
    np.testing.assert_array_equal(s.alphabar, [0.5, 0.25])
    assert s.alphabar_at(0) == 1.0


def test_schedule_invariants_exact():
    s = make_schedule(50, 1e-4, 0.05)
    assert np.array_equal(s.alpha, 1.0 - s.beta)
    assert all(s.alphabar[i] == s.alphabar[i - 1] * s.alpha[i] for i in range(1, s.T))
    assert np.all(np.diff(s.alphabar) < 0) and np.all((s.alphabar > 0) & (s.alphabar < 1))


def test_long_schedule_alphabar():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.alphabar[-1] < 0.01
    assert s.alphabar[-1] == pytest.approx(ALPHABAR_1000, rel=1e-9)
    assert s.alphabar[499] == pytest.approx(alphabar_by_product(list(s.beta), 500), rel=1e-10)


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_schedule_validation(args):
    with pytest.raises(diffusion.ScheduleError):
        make_schedule(*args)


def test_time_embedding_injective():
    emb = diffusion.time_embedding(np.arange(51), 16)
    assert len({tuple(r) for r in emb}) == 51


def test_q_sample_examples():
    s = make_schedule(2, 0.5, 0.5)  # alphabar_2 = 0.25
    z0 = np.array([[2.0]])
    out = diffusion.q_sample(z0, 2, np.array([[1.0]]), s)
    assert out[0, 0] == pytest.approx(1.0 + math.sqrt(0.75), abs=1e-15)
    np.testing.assert_array_equal(diffusion.q_sample(z0, 2, np.zeros((1, 1)), s), 0.5 * z0)


def test_q_sample_step_range():
    s = make_schedule(5, 0.1, 0.2)
    with pytest.raises(diffusion.StepRangeError):
        diffusion.q_sample(np.zeros((1, 1)), 0, np.zeros((1, 1)), s)
    with pytest.raises(diffusion.StepRangeError):
        diffusion.q_sample(np.zeros((1, 1)), 6, np.zeros((1, 1)), s)


def test_iterated_forward_matches_marginal():
    s = make_schedule(50, 1e-4, 0.05)
    t, n, z0 = 20, 10_000, 0.7
    rng = np.random.default_rng(0)
    z = np.full((n, 1), z0)
    for step in range(1, t + 1):
        z = diffusion.forward_step(z, step, rng.standard_normal((n, 1)), s)
    direct = diffusion.q_sample(np.full((n, 1), z0), t, rng.standard_normal((n, 1)), s)
    for a, b in ((z, direct),):
        se_mean = math.sqrt(a.var() / n + b.var() / n)
        assert abs(a.mean() - b.mean()) < 3 * se_mean
        # variance of a sample variance of Gaussians: 2 sigma^4 / (n - 1)
        se_var = math.sqrt(2 * a.var() ** 2 / (n - 1) + 2 * b.var() ** 2 / (n - 1))
        assert abs(a.var() - b.var()) < 3 * se_var
    assert direct.mean() == pytest.approx(math.sqrt(s.alphabar_at(t)) * z0, abs=0.05)


def test_f_est_zero_predictor():
    s = make_schedule(2, 0.5, 0.5)
    m = constant_model(s, data_dim=1, value=0.0)
    assert diffusion.f_est(m, np.array([1.0]), 2)[0] == pytest.approx(2.0, abs=1e-15)


def test_f_est_inverts_q_sample_with_exact_noise():
    s = make_schedule(10, 0.01, 0.2)
    m = constant_model(s, data_dim=3, value=0.4)
    z0 = np.array([0.2, -0.5, 0.9])
    zt = diffusion.q_sample(z0[None], 6, np.full((1, 3), 0.4), s)[0]
    np.testing.assert_allclose(diffusion.f_est(m, zt, 6), z0, atol=1e-12)


def test_phi_zero_predictor():
    s = make_schedule(10, 0.01, 0.2)
    m = constant_model(s, value=0.0)
    z = np.array([0.3, -1.0, 2.0])
    ratio = math.sqrt(s.alphabar_at(5) / s.alphabar_at(4))
    np.testing.assert_allclose(diffusion.phi(m, z, 4), ratio * z, rtol=1e-14)


@pytest.mark.parametrize("t", [0, 1, 5, 8])
def test_constant_predictor_round_trip(t):
    s = make_schedule(10, 0.01, 0.2)
    m = constant_model(s, value=-0.7)
    z = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(diffusion.psi(m, diffusion.phi(m, z, t), t + 1), z, atol=1e-12)


def test_step_ranges():
    s = make_schedule(10, 0.01, 0.2)
    m = constant_model(s)
    z = np.zeros(3)
    for fn, bad in ((diffusion.phi, 10), (diffusion.psi, 0), (diffusion.big_phi, 0), (diffusion.t_error, 10)):
        with pytest.raises(diffusion.StepRangeError):
            fn(m, z, bad)


def test_big_phi_single_step_and_telescoping():
    s = make_schedule(10, 0.01, 0.2)
    z0 = np.array([0.5, -0.25, 1.0])
    m = DiffusionModel.create(s, 3, width=8, depth=1, emb_width=4, seed=1)
    np.testing.assert_array_equal(diffusion.big_phi(m, z0, 1), diffusion.phi(m, z0, 0))
    zero = constant_model(s, value=0.0)
    np.testing.assert_allclose(diffusion.big_phi(zero, z0, 7), math.sqrt(s.alphabar_at(7)) * z0, rtol=1e-13)


@settings(max_examples=25, deadline=None)
@given(t=st.integers(1, 8), seed=st.integers(0, 1000))
def test_big_phi_recursion(t, seed):
    s = make_schedule(10, 0.01, 0.2)
    m = DiffusionModel.create(s, 3, width=8, depth=1, emb_width=4, seed=seed)
    z0 = np.random.default_rng(seed).normal(size=3)
    np.testing.assert_allclose(diffusion.big_phi(m, z0, t + 1),
                               diffusion.phi(m, diffusion.big_phi(m, z0, t), t), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("t", [1, 4, 9])
def test_constant_predictor_t_error_is_zero(t):
    s = make_schedule(10, 0.01, 0.2)
    m = constant_model(s, value=1.3)
    z0 = np.random.default_rng(0).normal(size=(5, 3))
    assert np.all(diffusion.t_error(m, z0, t) < 1e-10)


def test_literal_convention_does_not_round_trip():
    s = make_schedule(10, 0.01, 0.2)
    m = constant_model(s, value=1.3)
    z0 = np.ones(3)
    assert diffusion.t_error(m, z0, 4, convention="literal") > 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(1, 9))
def test_t_error_nonnegative_and_finite(seed, t):
    s = make_schedule(10, 0.01, 0.2)
    m = DiffusionModel.create(s, 4, width=8, depth=2, emb_width=4, seed=seed)
    err = diffusion.t_error(m, np.random.default_rng(seed).normal(size=(3, 4)), t)
    assert np.all(np.isfinite(err)) and np.all(err >= 0)


def _scoring_setup(n=70):
    s = make_schedule(20, 1e-4, 0.05)
    m = DiffusionModel.create(s, 16, width=16, depth=2, emb_width=4, seed=2)
    return m, datagen.generate("mix", n, (1, 4, 4), seed=3)


def test_score_dataset_empty():
    m, _ = _scoring_setup()
    assert len(diffusion.score_dataset(m, [], 5)) == 0


def test_score_dataset_order_insensitive():
    m, data = _scoring_setup()
    a = diffusion.score_dataset(m, data, 5, labels=1)
    perm = [data[i] for i in np.random.default_rng(0).permutation(len(data))]
    assert diffusion.score_dataset(m, perm, 5, labels=1).records == a.records


def test_scores_independent_of_batching():
    m, data = _scoring_setup()
    whole = diffusion.score_dataset(m, data, 5).records
    single = [diffusion.score_dataset(m, [e], 5).records[0] for e in data]
    assert single == whole


def test_zero_steps_leave_parameters_unchanged():
    s = make_schedule(10, 0.01, 0.2)
    m = DiffusionModel.create(s, 16, width=8, depth=1, emb_width=4, seed=0)
    trained, curve = diffusion.train(m, datagen.generate("blobs", 8, (1, 4, 4), 0),
                                     ndcore.SgdConfig(steps=0, batch_size=4))
    assert np.array_equal(trained.eps_net.flat_params(), m.eps_net.flat_params()) and curve == []


def test_training_is_deterministic():
    s = make_schedule(10, 0.01, 0.2)
    m = DiffusionModel.create(s, 16, width=8, depth=1, emb_width=4, seed=0)
    data = datagen.generate("blobs", 16, (1, 4, 4), 0)
    cfg = ndcore.SgdConfig(lr=0.05, momentum=0.9, batch_size=8, steps=30, seed=1)
    a = diffusion.train(m, data, cfg, log_every=5)
    b = diffusion.train(m, data, cfg, log_every=5)
    assert a[1] == b[1] and np.array_equal(a[0].eps_net.flat_params(), b[0].eps_net.flat_params())


def test_divergence_reports_step():
    s = make_schedule(10, 0.01, 0.2)
    m = DiffusionModel.create(s, 16, width=8, depth=1, emb_width=4, seed=0)
    data = datagen.generate("blobs", 16, (1, 4, 4), 0)
    with pytest.raises(diffusion.TrainingError) as info:
        with np.errstate(over="ignore", invalid="ignore"):
            diffusion.train(m, data, ndcore.SgdConfig(lr=1e6, momentum=0.9, batch_size=8, steps=200))
    assert 1 <= info.value.step <= 200


def test_model_round_trip(tmp_path):
    s = make_schedule(10, 0.01, 0.2)
    m = DiffusionModel.create(s, 16, width=8, depth=1, emb_width=4, seed=0)
    m.save(tmp_path / "dm.json", seed=0, steps=0)
    loaded = DiffusionModel.load(tmp_path / "dm.json")
    z = np.random.default_rng(0).normal(size=(3, 16))
    assert np.array_equal(loaded.eps(z, 4), m.eps(z, 4))
    assert np.array_equal(loaded.schedule.alphabar, s.alphabar)


@pytest.mark.slow
def test_training_reduces_loss_fivefold():
    s = make_schedule(50, 1e-4, 0.1)
    m = DiffusionModel.create(s, 64, width=64, depth=3, emb_width=16, seed=0)
    data = datagen.generate("blobs", 256, (1, 8, 8), 0)
    before = diffusion.denoising_loss(m, data, seed=5)
    cfg = ndcore.SgdConfig(lr=0.1, momentum=0.9, batch_size=64, steps=10_000, seed=1, clip_norm=5.0,
                            schedule="linear")
    trained, _ = diffusion.train(m, data, cfg)
    after = diffusion.denoising_loss(trained, data, seed=5)
    assert before / after >= 5.0
