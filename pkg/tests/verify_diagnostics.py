import numpy as np
import pytest

from kandy.models.series import Dataset, DatasetKind, FieldTrajectory, Trajectory
from kandy.services.diagnostics import (
    coherence, correlation_dimension, crossing_time, error_field, fiber_metrics, largest_lyapunov,
    lyapunov_time, nrmse_curve, rollout, rollout_vector_field,
)
from kandy.services.integrators import StepScheme, integrate
from kandy.services.kandy_model import new_model, set_edge_symbolic
from kandy.services.lifting import build_lift, identity_lift
from kandy.services.symbolic import SymbolicTerm
from kandy.services.systems import gen_hopf_dataset, henon_step, hopf_map, lorenz_rhs


def test_lyapunov_of_contraction():
    print("[TEST] Lyapunov exponent of a contraction...")
    lam = largest_lyapunov(lambda s: 0.5 * s, np.array([1.0, 1.0]), 50, kind="map", transient=0)
    assert lam == pytest.approx(np.log(0.5), abs=1e-9)
    assert lyapunov_time(lam) == float("inf")
    assert lyapunov_time(0.5) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        largest_lyapunov(lambda s: 0.5 * s, np.array([1.0, 1.0]), 10, kind="map", expect_chaos=True)
    print("[PASS] lambda = ln 0.5")


def test_lyapunov_of_henon():
    print("[TEST] Henon Lyapunov exponent...")
    lam = largest_lyapunov(henon_step, np.array([0.1, 0.1]), 20000, kind="map", transient=100)
    assert lam == pytest.approx(0.419, abs=0.02)
    print(f"[PASS] lambda = {lam:.4f}")


def test_nrmse_curve():
    print("[TEST] NRMSE...")
    rng = np.random.default_rng(0)
    truth = Trajectory(0.1 * np.arange(50), rng.standard_normal((50, 3)), 0.1, ["x", "y", "z"])
    exact = nrmse_curve(truth.states, truth)
    assert list(exact.columns) == ["t", "nrmse"]
    np.testing.assert_array_equal(exact["nrmse"].to_numpy(), 0.0)
    assert exact["t"].iloc[-1] == pytest.approx(4.9)
    blank = nrmse_curve(np.zeros_like(truth.states), truth)
    assert blank["nrmse"].iloc[-1] == pytest.approx(1.0, abs=1e-12)

    pred = truth.states + 0.1 * rng.standard_normal((50, 3))
    base = nrmse_curve(pred, truth)["nrmse"].to_numpy()
    scaled = nrmse_curve(7.0 * pred, Trajectory(truth.times, 7.0 * truth.states, 0.1, truth.variables))
    np.testing.assert_allclose(scaled["nrmse"].to_numpy(), base, rtol=1e-12)
    short = nrmse_curve(pred[:20], truth)
    assert len(short) == 20
    with pytest.raises(ValueError):
        nrmse_curve(pred, np.zeros((50, 3)))
    print("[PASS] Zero for exact, one for a blank forecast, scale invariant")


def test_crossing_time():
    import pandas as pd
    curve = pd.DataFrame({"t": [0.0, 1.0, 2.0, 3.0], "nrmse": [0.0, 0.05, 0.2, 0.5]})
    assert crossing_time(curve, 0.1) == 2.0
    assert crossing_time(curve, 0.4) == 3.0
    assert crossing_time(curve, 0.9) == float("inf")


def test_error_field():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((10, 16)), rng.standard_normal((10, 16))
    diff_ab, rms_ab = error_field(a, b)
    diff_ba, rms_ba = error_field(b, a)
    np.testing.assert_array_equal(diff_ab, -diff_ba)
    np.testing.assert_array_equal(rms_ab, rms_ba)
    _, rms = error_field(a + 0.5, a)
    np.testing.assert_allclose(rms, 0.5)
    with pytest.raises(ValueError):
        error_field(a, b[:, :8])


def test_rollout_of_zero_model_is_constant():
    lift = identity_lift(["x", "y", "z"])
    m = new_model(lift, 3, np.random.default_rng(0).standard_normal((30, 3)), 5, 3, init="zero")
    traj = rollout(m, np.array([1.0, 2.0, 3.0]), 20, StepScheme("rk4", 0.01))
    assert len(traj) == 21 and not traj.diverged
    np.testing.assert_array_equal(traj.states, np.tile([1.0, 2.0, 3.0], (21, 1)))
    with pytest.raises(ValueError):
        rollout(m, np.zeros(3), 5, StepScheme("etd_pseudospectral", 0.01))


def _lorenz_equation_model():
    lift = build_lift(["x", "y", "z", "x*y", "x*z"], ["x", "y", "z"])
    samples = lift.lift_batch(np.random.default_rng(0).uniform(-20.0, 20.0, (100, 3)))
    m = new_model(lift, 3, samples, 5, 3, init="zero")
    terms = {(0, 0): -10.0, (1, 0): 10.0, (0, 1): 28.0, (1, 1): -1.0, (4, 1): -1.0,
             (3, 2): 1.0, (2, 2): -8.0 / 3.0}
    for (i, j), alpha in terms.items():
        m = set_edge_symbolic(m, i, j, SymbolicTerm("x", alpha=alpha))
    return m


def test_equation_rollout_reproduces_generator():
    print("[TEST] Closed-form rollout...")
    m = _lorenz_equation_model()
    ic = np.array([25.0, 5.0, 4.0])
    truth = integrate(lorenz_rhs, ic, 0.005, 100)
    pred = rollout(m, ic, 100, StepScheme("rk4", 0.005), envelope=50.0)
    np.testing.assert_allclose(pred.states, truth, atol=1e-8)
    assert nrmse_curve(pred, truth)["nrmse"].iloc[-1] < 1e-9
    print("[PASS] Symbolic Lorenz model follows the generator")


def test_rollout_divergence_is_flagged():
    states, diverged = rollout_vector_field(lambda x: 3.0 * x, np.array([1.0]), 50, None, envelope=1.0)
    assert diverged
    assert len(states) < 51
    assert np.all(np.abs(states) <= 10.0)
    field = rollout_vector_field(lambda u: -u, np.ones(8), 5, StepScheme("euler", 0.1), substeps=2)[0]
    np.testing.assert_allclose(field[-1], 0.9 ** 10 * np.ones(8))


def test_field_rollout_type():
    lift = build_lift(["u", "u_xx"], ["u"], is_field=True, dx=2.0 * np.pi / 32)
    x = lift.dx * np.arange(32)
    m = new_model(lift, 1, lift.lift_batch(np.sin(x)[None, :]), 4, 2, init="zero")
    m.slope[1, 0] = 0.1
    traj = rollout(m, np.sin(x), 10, StepScheme("rk4", 0.01), substeps=2)
    assert isinstance(traj, FieldTrajectory)
    assert traj.dt == pytest.approx(0.02)
    np.testing.assert_allclose(traj.fields[-1], np.exp(-0.1 * 0.2) * np.sin(x), atol=1e-8)


def test_fiber_metrics():
    print("[TEST] Fiber metrics...")
    D = gen_hopf_dataset(300, 8, seed=2)
    exact = fiber_metrics(hopf_map, D)
    assert exact.mean_angular_error == pytest.approx(0.0, abs=1e-7)
    assert exact.p95_radial_error == pytest.approx(0.0, abs=1e-12)
    assert exact.mean_fiber_rms == pytest.approx(0.0, abs=1e-12)
    assert exact.max_fiber_error == pytest.approx(0.0, abs=1e-12)

    north = fiber_metrics(lambda s: np.tile([0.0, 0.0, 1.0], (len(s), 1)), D)
    expected = np.mean(np.arccos(np.clip(D.targets[:, 2], -1.0, 1.0)))
    assert north.mean_angular_error == pytest.approx(expected, rel=1e-6)
    assert north.mean_fiber_rms == 0.0
    print("[PASS] Exact map scores zero, constant map scores its polar angle")


def test_correlation_dimension():
    print("[TEST] Correlation dimension...")
    rng = np.random.default_rng(3)
    radii = [0.01, 0.02, 0.04, 0.08]
    t = rng.uniform(0.0, 1.0, 5000)
    line = np.column_stack([t, 2.0 * t])
    square = rng.uniform(0.0, 1.0, (5000, 2))
    assert correlation_dimension(line, radii) == pytest.approx(1.0, abs=0.1)
    assert correlation_dimension(square, radii) == pytest.approx(2.0, abs=0.1)
    with pytest.raises(ValueError):
        correlation_dimension(square[:100], radii)
    with pytest.raises(ValueError):
        correlation_dimension(square, [0.01, 0.02])
    print("[PASS] Line ~ 1, square ~ 2")


def test_coherence():
    rng = np.random.default_rng(4)
    states = rng.standard_normal((200, 2))
    truth = Trajectory(0.01 * np.arange(200), states, 0.01, ["x", "y"])
    same = coherence(truth, truth, 1.0, states.min(axis=0), states.max(axis=0))
    assert same.coherent and same.inside_envelope
    assert same.ks_statistics == {"x": 0.0, "y": 0.0}
    far = Trajectory(truth.times, states + 100.0, 0.01, ["x", "y"])
    report = coherence(far, truth, 1.0, states.min(axis=0), states.max(axis=0))
    assert not report.coherent and not report.inside_envelope


def test_static_dataset_passthrough():
    D = Dataset(np.zeros((3, 4)), np.tile([0.0, 0.0, 1.0], (3, 1)), DatasetKind.STATIC)
    metrics = fiber_metrics(lambda s: np.tile([0.0, 0.0, 2.0], (len(s), 1)), D)
    assert metrics.mean_angular_error == 0.0
    assert metrics.p95_radial_error == pytest.approx(1.0)


if __name__ == "__main__":
    test_lyapunov_of_contraction()
    test_lyapunov_of_henon()
    test_nrmse_curve()
    test_crossing_time()
    test_error_field()
    test_rollout_of_zero_model_is_constant()
    test_equation_rollout_reproduces_generator()
    test_rollout_divergence_is_flagged()
    test_field_rollout_type()
    test_fiber_metrics()
    test_correlation_dimension()
    test_coherence()
    test_static_dataset_passthrough()
