import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kan_ets.datasets import Dataset, DatasetRecipe, Split, fit_scaler, generate_dataset
from kan_ets.spin_dynamics import DEFAULT_CHAIN, DriveSignal, TrajectorySample
from kan_ets.training import (
    AdamState,
    ConfigError,
    LossBreakdown,
    ModelSpec,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    ehrenfest_penalty,
    finite_difference,
    finite_difference_adjoint,
    loss_and_gradient,
    total_loss,
    train,
)

FREE = dict(allow_out_of_range=True)


def tiny_dataset(n_steps=10, n_freq=4, n_sites=3):
    recipe = DatasetRecipe((1.0,), n_freq, n_steps=n_steps, chain=DEFAULT_CHAIN.with_sites(n_sites))
    ds = generate_dataset(recipe)
    ds = ds.with_split(Split(tuple(range(n_freq - 1)), (n_freq - 1,), 0))
    return ds.with_scaler(fit_scaler(ds, ds.split.train))


# --- finite differences -----------------------------------------------------


def test_fd_linear_and_constant():
    dt, c = 0.1, 2.5
    y = c * dt * np.arange(20)
    assert np.allclose(finite_difference(y, dt), c, atol=1e-12)
    assert np.all(finite_difference(np.full(7, 3.0), dt) == 0)


def test_fd_sine_truncation_bound():
    w, dt = 1.7, 0.0314159
    t = dt * np.arange(1, 501)
    err = np.abs(finite_difference(np.sin(w * t), dt) - w * np.cos(w * t))[1:-1]
    assert err.max() <= w**3 * dt**2 / 6 * 1.01


def test_fd_too_short():
    with pytest.raises(ValueError):
        finite_difference([1.0, 2.0], 0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 30), st.integers(0, 2**31 - 1), st.floats(1e-3, 10))
def test_fd_adjoint_identity(n, seed, dt):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, n)), rng.normal(size=(2, n))
    assert np.sum(finite_difference(x, dt) * y) == pytest.approx(np.sum(x * finite_difference_adjoint(y, dt)), rel=1e-10, abs=1e-10)


# --- loss -------------------------------------------------------------------


def test_hand_computed_batch():
    p = np.array([[0.0, 1, 2, 3], [1, 1, 1, 1]])
    y = np.array([[0.0, 0, 0, 0], [1, 2, 3, 4]])
    cfg = TrainConfig(lam=0.5, **FREE)
    b = total_loss(p, y, None, None, cfg, dt=1.0)
    # mse = (0+1+4+9+0+1+4+9)/8; every D-residual is +-1, so penalty = lam * 1
    assert b.mse == 3.5 and b.penalty == 0.5 and b.total == 4.0
    cfg4 = TrainConfig(lam=1.0, alpha=4, **FREE)
    assert total_loss(p, y, None, None, cfg4, dt=0.5).penalty == pytest.approx(16.0)


def test_perfect_predictions_and_lambda_zero():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(3, 8))
    assert total_loss(y, y, None, None, TrainConfig(**FREE), 0.1).total == 0
    p = rng.normal(size=(3, 8))
    b = total_loss(p, y, None, None, TrainConfig(lam=0.0, **FREE), 0.1)
    assert b.penalty == 0 and b.total == np.mean((p - y) ** 2)


def test_total_is_exact_sum():
    rng = np.random.default_rng(1)
    p, y = rng.normal(size=(4, 9)), rng.normal(size=(4, 9))
    b = total_loss(p, y, None, None, TrainConfig(**FREE), 0.03)
    assert b.total == b.mse + b.penalty


def test_penalty_function():
    y = np.sin(np.linspace(0, 3, 20))
    assert ehrenfest_penalty(y, y, None, None, 0.1, 1.0, 2) == 0
    assert ehrenfest_penalty(y + np.linspace(0, 1, 20), y, None, None, 0.1, 0.0, 2) == 0
    with pytest.raises(ValueError):
        ehrenfest_penalty(y, y, None, None, 0.1, 1.0, 2, mode="measured_rhs")


def test_measured_rhs_target_agrees_with_finite_difference():
    # O(dt^2) agreement in the interior on simulator data.
    recipe = DatasetRecipe((2.6,), 3, n_steps=500, chain=DEFAULT_CHAIN.with_sites(4))
    ds = generate_dataset(recipe).prepared(0.67, 0)
    _, y, rhs = ds.scaled()
    gap = np.abs(finite_difference(y, ds.dt) - rhs)[:, 1:-1].max()
    assert gap <= 0.01 * np.abs(rhs).max()
    # halving dt shrinks the gap ~4x
    fine = generate_dataset(DatasetRecipe((2.6,), 3, n_steps=1000, chain=DEFAULT_CHAIN.with_sites(4)))
    fine = fine.with_scaler(ds.scaler)
    _, yf, rf = fine.scaled()
    gap_f = np.abs(finite_difference(yf, fine.dt) - rf)[:, 1:-1].max()
    assert 3.5 <= gap / gap_f <= 4.5


def test_shape_mismatch():
    with pytest.raises(ValueError):
        total_loss(np.zeros((2, 5)), np.zeros((2, 6)), None, None, TrainConfig(**FREE), 0.1)


@pytest.mark.parametrize("alpha", [2, 4])
@pytest.mark.parametrize("mode", ["finite_difference", "measured_rhs"])
def test_loss_gradient_wrt_predictions(alpha, mode):
    rng = np.random.default_rng(alpha)
    p, y, rhs = rng.normal(size=(2, 6)), rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    ds = tiny_dataset()
    cfg = TrainConfig(lam=1.0, alpha=alpha, penalty_target=mode, **FREE)
    _, g = loss_and_gradient(p, y, rhs, ds.scaler, cfg, 0.2)
    eps = 1e-6
    for idx in np.ndindex(p.shape):
        pp, pm = p.copy(), p.copy()
        pp[idx] += eps
        pm[idx] -= eps
        fd = (loss_and_gradient(pp, y, rhs, ds.scaler, cfg, 0.2)[0].total
              - loss_and_gradient(pm, y, rhs, ds.scaler, cfg, 0.2)[0].total) / (2 * eps)
        assert g[idx] == pytest.approx(fd, rel=1e-6, abs=1e-8)


# --- config -----------------------------------------------------------------


def test_config_ranges():
    TrainConfig()
    for bad in (dict(learning_rate=1e-2), dict(epochs=100), dict(alpha=3), dict(lam=-1.0),
                dict(penalty_target="x"), dict(lambda_decay=1.5), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    TrainConfig(learning_rate=1e-2, epochs=100, **FREE)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 5})
    assert TrainConfig.from_dict(TrainConfig(lam=0.3).to_dict()) == TrainConfig(lam=0.3)


def test_lambda_schedule_monotone():
    cfg = TrainConfig(lam=2.0, lambda_decay=0.99)
    vals = [cfg.lambda_at(e) for e in range(1, 200)]
    assert vals[0] == 2.0 and all(b <= a for a, b in zip(vals, vals[1:]))
    assert all(TrainConfig(lam=2.0).lambda_at(e) == 2.0 for e in (1, 50, 3000))


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    state = AdamState.for_params(p)
    adam_step(p, [np.zeros(2)], state, 1e-3)
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = [np.zeros(4)]
    g = np.array([3.0, -0.01, 1e3, -7.0])
    adam_step(p, [g], AdamState.for_params(p), 1e-3)
    assert np.allclose(p[0], -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_matches_torch_reference_trace():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(2)]
    ours = [p0.copy()]
    state = AdamState.for_params(ours)
    tp = torch.tensor(p0.copy(), requires_grad=True)
    opt = torch.optim.Adam([tp], lr=5e-4, betas=(0.9, 0.999), eps=1e-8)
    for g in grads:
        adam_step(ours, [g], state, 5e-4)
        tp.grad = torch.tensor(g)
        opt.step()
        assert np.allclose(ours[0], tp.detach().numpy(), rtol=0, atol=1e-15)
    assert state.step == 2


def test_adam_rejects_non_finite():
    p = [np.zeros(2)]
    with pytest.raises(FloatingPointError, match="step 1"):
        adam_step(p, [np.array([1.0, np.nan])], AdamState.for_params(p), 1e-3)


# --- training loop ----------------------------------------------------------


def test_tiny_training_loss_strictly_decreases():
    ds = tiny_dataset()
    model = ModelSpec((10, 5, 10)).build(10)
    res = train(model, ds, TrainConfig(learning_rate=1e-3, epochs=50, lam=0.0, **FREE))
    totals = [h.total for h in res.history]
    assert len(totals) == 50 and all(b < a for a, b in zip(totals, totals[1:]))
    assert all(isinstance(h, LossBreakdown) and h.epoch == i + 1 for i, h in enumerate(res.history))


def test_constant_schedule_equals_no_decay():
    ds = tiny_dataset()
    # decay 1 must take the same code path as a plain constant lambda
    scheduled = TrainConfig(epochs=20, lambda_decay=1.0, **FREE)
    assert all(scheduled.lambda_at(e) == scheduled.lam for e in range(1, 21))
    runs = [[h.total for h in train(ModelSpec((10, 5, 10)).build(10), ds, cfg).history]
            for cfg in (scheduled, TrainConfig(epochs=20, **FREE))]
    assert runs[0] == runs[1]


@pytest.mark.parametrize("spec", [ModelSpec((10, 5, 10)), ModelSpec((10, 4, 10), kind="wavelet"),
                                  ModelSpec((10, 2, 1), family="chain")])
def test_full_batch_determinism(spec):
    ds = tiny_dataset()
    cfg = TrainConfig(epochs=15, **FREE)
    a = train(spec.build(10), ds, cfg)
    b = train(spec.build(10), ds, cfg)
    assert [h.total for h in a.history] == [h.total for h in b.history]
    assert all(np.array_equal(p, q) for p, q in zip(a.model.parameters(), b.model.parameters()))


def test_minibatch_mode_runs_and_is_seeded():
    ds = tiny_dataset(n_freq=9)
    cfg = TrainConfig(epochs=10, batch_size=3, **FREE)
    a = train(ModelSpec((10, 5, 10)).build(10), ds, cfg).history
    b = train(ModelSpec((10, 5, 10)).build(10), ds, cfg).history
    assert a == b and all(math.isfinite(h.total) for h in a)


def test_divergence_aborts_with_last_good_parameters():
    ds = tiny_dataset()
    samples = list(ds.samples)
    s = samples[0]
    bad_out = s.output.copy()
    bad_out[3] = np.nan
    samples[0] = TrajectorySample(s.drive, bad_out, s.ehrenfest_rhs)
    bad = Dataset(ds.recipe, samples, ds.scaler, ds.split)
    model = ModelSpec((10, 5, 10)).build(10)
    before = [p.copy() for p in model.parameters()]
    with pytest.raises(TrainingDiverged) as info:
        train(model, bad, TrainConfig(epochs=5, **FREE))
    assert info.value.epoch == 1
    assert all(np.array_equal(p, q) for p, q in zip(before, info.value.model.parameters()))


def test_train_requires_prepared_dataset():
    ds = tiny_dataset()
    raw = Dataset(ds.recipe, ds.samples)
    with pytest.raises(ValueError):
        train(ModelSpec((10, 5, 10)).build(10), raw, TrainConfig(epochs=1, **FREE))


def test_callback_can_stop_early():
    ds = tiny_dataset()
    res = train(ModelSpec((10, 5, 10)).build(10), ds, TrainConfig(epochs=50, **FREE),
                callbacks=[lambda epoch, rec, model: epoch == 7])
    assert len(res.history) == 7


def test_manifest_contents():
    ds = tiny_dataset()
    spec = ModelSpec((10, 5, 10))
    cfg = TrainConfig(epochs=3, **FREE)
    res = train(spec.build(10), ds, cfg)
    m = res.manifest(cfg, spec, "ckpt.json")
    assert m["config"] == cfg.to_dict() and m["checkpoint"] == "ckpt.json"
    assert len(m["history"]) == 3 and m["wall_clock_seconds"] >= 0


def test_model_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec((10, 5, 10), family="rnn")
    with pytest.raises(ConfigError):
        ModelSpec((10, 5, 10)).build(12)
    with pytest.raises(ConfigError):
        ModelSpec((10, 5, 2), family="chain").build(10)
    chain = ModelSpec((4, 3, 1), family="chain", window=4).build(10)
    assert chain.window == 4 and chain.n_steps == 10
