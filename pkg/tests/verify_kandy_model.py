import numpy as np
import pytest

from kandy.services.kandy_model import (
    forward, forward_field, input_jacobian, model_vector_field, new_model, param_gradient, prune_edge,
    set_edge_symbolic,
)
from kandy.services.lifting import build_lift, identity_lift
from kandy.services.symbolic import SymbolicTerm


def _model(init="small_random", normalize=False, seed=0):
    lift = build_lift(["x", "y", "x*y"], ["x", "y"])
    rng = np.random.default_rng(seed)
    samples = lift.lift_batch(rng.uniform(-1.0, 1.0, (200, 2)))
    m = new_model(lift, 2, samples, 5, 3, init, np.random.default_rng(seed), normalize)
    m.slope[:] = rng.standard_normal(m.slope.shape)
    m.bias[:] = 0.1 * rng.standard_normal(m.bias.shape)
    return m


def test_zero_model_outputs_zero():
    print("[TEST] Zero model...")
    lift = identity_lift(["x", "y", "z"])
    m = new_model(lift, 3, np.random.default_rng(0).standard_normal((50, 3)), 5, 3, init="zero")
    np.testing.assert_array_equal(forward(m, np.array([1.0, -2.0, 0.5])), 0.0)
    with pytest.raises(ValueError):
        forward(m, np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        forward(m, np.array([1.0, np.nan, 0.0]))
    print("[PASS] Zero outputs, malformed inputs rejected")


def test_forward_is_sum_of_edges():
    print("[TEST] Additive structure...")
    m = _model()
    theta = np.array([0.3, -0.4, -0.12])
    total = sum(m.edge_output(i, 0, theta[i]) for i in range(3))
    assert forward(m, theta)[0] == pytest.approx(float(total), rel=1e-12)
    print("[PASS] Output equals the sum of its edge activations")


def test_degenerate_grid_is_affine():
    lift = identity_lift(["a", "b"])
    samples = np.random.default_rng(2).standard_normal((40, 2))
    m = new_model(lift, 1, samples, 1, 1, init="zero")
    m.slope[:, 0] = [2.0, -3.0]
    m.bias[:, 0] = [0.5, 0.25]
    assert forward(m, np.array([1.0, 1.0]))[0] == pytest.approx(2.0 - 3.0 + 0.75)


def test_param_gradient_matches_finite_difference():
    print("[TEST] Parameter gradient...")
    m = _model(normalize=True)
    theta = np.array([0.2, 0.7, 0.14])
    upstream = np.array([0.6, -1.3])
    grad = m.flatten_grad(param_gradient(m, theta, upstream))
    vec = m.get_params()
    h = 1e-6
    fd = np.empty_like(vec)
    for k in range(len(vec)):
        step = np.zeros_like(vec)
        step[k] = h
        m.set_params(vec + step)
        up = forward(m, theta) @ upstream
        m.set_params(vec - step)
        down = forward(m, theta) @ upstream
        fd[k] = (up - down) / (2.0 * h)
    m.set_params(vec)
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-8)
    print("[PASS] Analytic gradient agrees with finite differences")


def test_input_jacobian_matches_finite_difference():
    print("[TEST] Input Jacobian...")
    m = _model(normalize=True, seed=5)
    m = set_edge_symbolic(m, 2, 1, SymbolicTerm("sin", alpha=0.5, beta=2.0, gamma=0.1))
    theta = np.array([-0.3, 0.5, -0.15])
    jac = input_jacobian(m, theta)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (forward(m, theta + e) - forward(m, theta - e)) / (2.0 * h)
        np.testing.assert_allclose(jac[:, i], fd, rtol=1e-5, atol=1e-8)
    print("[PASS] d output / d Theta agrees with finite differences")


def test_prune_and_symbolic_edges():
    print("[TEST] Structural edits...")
    m = _model()
    theta = np.array([0.4, -0.2, -0.08])
    before = forward(m, theta)
    pruned = prune_edge(m, 0, 1)
    assert not pruned.mask[0, 1] and m.mask[0, 1]
    assert forward(pruned, theta)[1] == pytest.approx(before[1] - m.edge_output(0, 1, theta[0]), rel=1e-12)
    np.testing.assert_allclose(forward(m, theta), before)

    sym = set_edge_symbolic(pruned, 0, 1, SymbolicTerm("x^2", alpha=-1.4))
    assert sym.edge_output(0, 1, 0.5) == pytest.approx(-0.35)
    assert set_edge_symbolic(sym, 0, 1, None).mask[0, 1] == False  # noqa: E712
    with pytest.raises(IndexError):
        prune_edge(m, 5, 0)
    print("[PASS] Pruning and symbolic substitution leave the source model untouched")


def test_field_evaluation():
    lift = build_lift(["u", "u_x"], ["u"], is_field=True, dx=0.2)
    fields = np.sin(0.2 * np.arange(32))[None, :]
    m = new_model(lift, 1, lift.lift_batch(fields), 4, 2, init="zero")
    m.slope[:, 0] = [1.0, 2.0]
    rows = lift.lift_field(fields[0])
    np.testing.assert_allclose(forward_field(m, rows)[:, 0], rows[:, 0] + 2.0 * rows[:, 1], atol=1e-12)
    np.testing.assert_allclose(model_vector_field(m, fields)[0], rows[:, 0] + 2.0 * rows[:, 1], atol=1e-12)
    with pytest.raises(ValueError):
        forward_field(m, rows[:, :1])


if __name__ == "__main__":
    test_zero_model_outputs_zero()
    test_forward_is_sum_of_edges()
    test_degenerate_grid_is_affine()
    test_param_gradient_matches_finite_difference()
    test_input_jacobian_matches_finite_difference()
    test_prune_and_symbolic_edges()
    test_field_evaluation()
