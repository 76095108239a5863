import numpy as np
import pytest

from kandy.errors import DivergenceError
from kandy.models.series import Dataset, DatasetKind, Trajectory
from kandy.services.kandy_model import model_vector_field, new_model
from kandy.services.lifting import build_lift, identity_lift
from kandy.services.training import (
    TrainConfig, build_dataset, derivative_loss, estimate_derivatives, grid_update_epochs, rollout_loss,
    rollout_windows, total_loss, total_loss_and_grad, train,
)

DT = 0.05


def _oscillator(n=120, tendency=True):
    t = DT * np.arange(n)
    traj = Trajectory(t, np.column_stack([np.cos(t), -np.sin(t)]), DT, ["x", "y"], "ode")
    if tendency:
        return build_dataset(traj, DatasetKind.ODE, "provided", lambda s: np.column_stack([s[:, 1], -s[:, 0]]))
    return build_dataset(traj, DatasetKind.ODE, "central_diff")


def _small_model(D, seed=0):
    lift = build_lift(["x", "y", "x*y"], ["x", "y"])
    rng = np.random.default_rng(seed)
    m = new_model(lift, 2, lift.lift_batch(D.states), 3, 2, "small_random", rng)
    m.slope[:] = 0.3 * rng.standard_normal(m.slope.shape)
    return m


def test_estimate_derivatives():
    print("[TEST] Finite-difference targets...")
    t = 0.1 * np.arange(10)
    np.testing.assert_allclose(estimate_derivatives(3.0 * t + 1.0, 0.1, "forward_diff"), 3.0, rtol=1e-12)
    np.testing.assert_allclose(estimate_derivatives(t ** 2, 0.1, "central_diff"), 2.0 * t, atol=1e-12)
    with pytest.raises(ValueError):
        estimate_derivatives(t, 0.0)
    with pytest.raises(ValueError):
        estimate_derivatives(t, 0.1, "spline")
    print("[PASS] Exact on polynomials of matching order")


def test_build_dataset_kinds():
    D = _oscillator(tendency=False)
    assert D.kind == DatasetKind.ODE and len(D) == 120
    traj = Trajectory(np.arange(5.0), np.arange(10.0).reshape(5, 2), 1.0, ["x", "y"], "map")
    M = build_dataset(traj, DatasetKind.MAP)
    assert len(M) == 4
    np.testing.assert_array_equal(M.targets, traj.states[1:])
    with pytest.raises(ValueError):
        build_dataset(_trajectory_only(), DatasetKind.ODE, "provided")


def _trajectory_only():
    return Trajectory(np.arange(4.0), np.zeros((4, 2)), 1.0, ["x", "y"], "ode")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lstsq", lambda_roll=0.5)
    with pytest.raises(ValueError):
        TrainConfig(lambda_roll=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    assert grid_update_epochs(TrainConfig(epochs=300, grid_update_every=50, grid_update_until=300)) == \
        [50, 100, 150, 200, 250]


GRADIENT_CASES = [(integrator, horizon) for integrator in ("euler", "rk4") for horizon in (1, 3, 10)]


@pytest.mark.parametrize("integrator,horizon", GRADIENT_CASES)
def test_gradient_matches_finite_difference(integrator, horizon):
    print(f"[TEST] Loss gradient ({integrator}, horizon {horizon})...")
    D = _oscillator(40)
    # fresh random 3-input, 2-output model per case
    m = _small_model(D, seed=GRADIENT_CASES.index((integrator, horizon)) + 11)
    assert (m.n_in, m.n_out) == (3, 2)
    cfg = TrainConfig(lambda_roll=0.5, rollout_horizon=horizon, rollout_integrator=integrator, dt=DT)
    _, grad = total_loss_and_grad(m, D, cfg)
    vec = m.get_params()
    h = 1e-6
    fd = np.empty_like(vec)
    for k in range(len(vec)):
        step = np.zeros_like(vec)
        step[k] = h
        m.set_params(vec + step)
        up = total_loss(m, D, cfg)
        m.set_params(vec - step)
        down = total_loss(m, D, cfg)
        fd[k] = (up - down) / (2.0 * h)
    m.set_params(vec)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)
    print("[PASS] Analytic gradient agrees with finite differences")


def test_euler_single_step_rollout_is_scaled_derivative_loss():
    print("[TEST] One-step Euler rollout...")
    D = _oscillator(60)
    m = _small_model(D, seed=2)
    cfg = TrainConfig(lambda_roll=1.0, rollout_horizon=1, rollout_integrator="euler", dt=DT)
    seq = D.sequence
    shifted = (seq[1:] - seq[:-1]) / DT
    resid = model_vector_field(m, seq[:-1]) - shifted
    expected = DT ** 2 * np.mean(np.sum(resid ** 2, axis=1))
    assert rollout_loss(m, D, cfg) == pytest.approx(expected, rel=1e-10)
    x0, truth = rollout_windows(D, 1)
    assert len(x0) == len(seq) - 1 and truth.shape == (1, len(seq) - 1, 2)
    print("[PASS] Equals dt^2 times the derivative loss on shifted targets")


def test_degenerate_grid_reduces_to_linear_regression():
    print("[TEST] Degenerate grid oracle...")
    rng = np.random.default_rng(5)
    X = rng.standard_normal((200, 3))
    W = np.array([[1.0, -2.0], [0.5, 0.0], [3.0, 1.5]])
    Y = X @ W + np.array([0.7, -0.3])
    D = Dataset(X, Y, DatasetKind.STATIC)
    m = new_model(identity_lift(["a", "b", "c"]), 2, X, 1, 1, init="zero")
    m, history = train(m, D, TrainConfig(optimizer="lstsq", freeze_coeffs=True, ridge=0.0, epochs=1))
    np.testing.assert_allclose(m.slope, W, atol=1e-8)
    np.testing.assert_allclose(m.bias.sum(axis=0), [0.7, -0.3], atol=1e-8)
    design = np.column_stack([X, np.ones(len(X))])
    ref, *_ = np.linalg.lstsq(design, Y, rcond=None)
    np.testing.assert_allclose(model_vector_field(m, X), design @ ref, atol=1e-8)
    assert history.last("total") < 1e-16
    print("[PASS] Matches ordinary least squares")


def test_degenerate_grid_matches_ols_on_random_systems():
    print("[TEST] Degenerate grid on 20 random linear systems...")
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        n_in, n_out = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        X = rng.uniform(-3.0, 3.0, size=(150, n_in))
        Y = X @ rng.standard_normal((n_in, n_out)) + rng.standard_normal(n_out) \
            + 0.1 * rng.standard_normal((150, n_out))
        names = [f"v{i}" for i in range(n_in)]
        m = new_model(identity_lift(names), n_out, X, 1, 1, init="zero")
        m, _ = train(m, Dataset(X, Y, DatasetKind.STATIC),
                     TrainConfig(optimizer="lstsq", freeze_coeffs=True, ridge=0.0, epochs=1))
        design = np.column_stack([X, np.ones(len(X))])
        ref, *_ = np.linalg.lstsq(design, Y, rcond=None)
        np.testing.assert_allclose(model_vector_field(m, X), design @ ref, atol=1e-8)
        np.testing.assert_allclose(m.slope, ref[:n_in], atol=1e-8)
    print("[PASS] Every fit equals np.linalg.lstsq")


def test_least_squares_respects_existing_offset():
    print("[TEST] Refit with a per-output constant...")
    rng = np.random.default_rng(9)
    X = rng.standard_normal((120, 2))
    Y = X @ np.array([[2.0, 0.0], [-1.0, 0.5]]) + np.array([1.0, -1.0])
    m = new_model(identity_lift(["a", "b"]), 2, X, 1, 1, init="zero")
    m.offset[:] = [5.0, -2.0]
    m, history = train(m, Dataset(X, Y, DatasetKind.STATIC),
                       TrainConfig(optimizer="lstsq", freeze_coeffs=True, ridge=0.0, epochs=1))
    np.testing.assert_array_equal(m.offset, [5.0, -2.0])
    np.testing.assert_allclose(model_vector_field(m, X), Y, atol=1e-8)
    assert history.last("total") < 1e-16
    print("[PASS] Offset is left in place and the fit is exact")


def test_gradient_descent_is_monotone_on_frozen_grid():
    print("[TEST] Gradient descent...")
    rng = np.random.default_rng(6)
    X = rng.standard_normal((200, 3))
    D = Dataset(X, X @ rng.standard_normal((3, 2)) + 0.2, DatasetKind.STATIC)
    m = new_model(identity_lift(["a", "b", "c"]), 2, X, 1, 1, init="zero")
    _, history = train(m, D, TrainConfig(optimizer="gd", learning_rate=0.01, epochs=50, freeze_coeffs=True))
    totals = history.to_frame()["total"].to_numpy()
    assert len(totals) == 51
    assert np.all(np.diff(totals) <= 1e-12)
    print("[PASS] Loss never increases")


def test_adam_fits_oscillator():
    print("[TEST] Adam on a linear oscillator...")
    D = _oscillator()
    m = new_model(identity_lift(["x", "y"]), 2, D.states, 5, 3, "small_random", np.random.default_rng(0))
    m, history = train(m, D, TrainConfig(optimizer="adam", learning_rate=0.01, epochs=300))
    assert history.last("total") < 0.2 * history.first("total")
    frame = history.to_frame()
    assert list(frame.columns) == ["epoch", "train_deriv", "test_deriv", "rollout", "total"]
    print(f"[PASS] Loss {history.first('total'):.4g} -> {history.last('total'):.4g}")


def test_lbfgs_with_rollout_and_grid_updates():
    print("[TEST] L-BFGS with rollout loss...")
    D = _oscillator(80)
    head = D.subset(np.arange(60))
    test = D.subset(np.arange(60, 80))
    m = new_model(identity_lift(["x", "y"]), 2, D.states, 5, 3, "small_random", np.random.default_rng(1))
    cfg = TrainConfig(optimizer="lbfgs", lambda_roll=0.5, rollout_horizon=3, dt=DT, epochs=30,
                      grid_update_every=10, grid_update_until=20)
    before = total_loss(m, D, cfg)
    m, history = train(m, D, cfg, test=test)
    assert history.last("total") < before
    assert np.isfinite(history.last("test_deriv"))
    assert derivative_loss(m, head) < derivative_loss(new_model(identity_lift(["x", "y"]), 2, D.states, 5, 3,
                                                                 "small_random", np.random.default_rng(1)), head)
    print("[PASS] Total loss decreased")


def test_divergence_is_reported():
    print("[TEST] Divergence...")
    rng = np.random.default_rng(7)
    X = rng.standard_normal((50, 2))
    D = Dataset(X, X @ np.ones((2, 2)), DatasetKind.STATIC)
    m = new_model(identity_lift(["a", "b"]), 2, X, 3, 2, "small_random", rng)
    with np.errstate(all="ignore"):
        with pytest.raises(DivergenceError) as info:
            train(m, D, TrainConfig(optimizer="gd", learning_rate=1e10, epochs=200))
    assert info.value.epoch > 0
    assert np.isfinite(info.value.last_finite_loss)
    print("[PASS] DivergenceError carries the epoch and last finite loss")


if __name__ == "__main__":
    test_estimate_derivatives()
    test_build_dataset_kinds()
    test_train_config_validation()
    for integrator, horizon in GRADIENT_CASES:
        test_gradient_matches_finite_difference(integrator, horizon)
    test_euler_single_step_rollout_is_scaled_derivative_loss()
    test_degenerate_grid_reduces_to_linear_regression()
    test_degenerate_grid_matches_ols_on_random_systems()
    test_least_squares_respects_existing_offset()
    test_gradient_descent_is_monotone_on_frozen_grid()
    test_adam_fits_oscillator()
    test_lbfgs_with_rollout_and_grid_updates()
    test_divergence_is_reported()
