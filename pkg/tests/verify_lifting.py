import numpy as np
import pytest

from kandy.services.lifting import (
    TermKind, build_lift, derivative_adjoint, identity_lift, lift_field, lift_state, spatial_derivatives,
)
from kandy.utils.term_grammar import canonical_label, parse_term

HOPF_TERMS = ["x1*x3", "x2*x4", "x2*x3", "x1*x4", "x1^2+x2^2-x3^2-x4^2"]
IKEDA_TERMS = ["1", "x*cos(theta)", "y*sin(theta)", "x*sin(theta)", "y*cos(theta)"]


def test_polynomial_lift_values():
    print("[TEST] Polynomial lift...")
    L = build_lift(["x", "y", "z", "x*y", "x*z", "y*z"], ["x", "y", "z"])
    np.testing.assert_allclose(lift_state(L, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0, 2.0, 3.0, 6.0])
    assert L.labels == ["x", "y", "z", "x*y", "x*z", "y*z"]
    print("[PASS] Lorenz library evaluated at (1, 2, 3)")


def test_hopf_lift_values():
    print("[TEST] Hopf lift...")
    L = build_lift(HOPF_TERMS, ["x1", "x2", "x3", "x4"])
    np.testing.assert_allclose(lift_state(L, [1.0, 0.0, 0.0, 0.0]), [0.0, 0.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(lift_state(L, [0.5, 0.5, 0.5, 0.5]), [0.25, 0.25, 0.25, 0.25, 0.0])
    assert L.terms[4].kind == TermKind.POLYNOMIAL
    print("[PASS] Bilinear and quadratic Hopf features")


def test_identity_lift():
    L = identity_lift(["x", "y"])
    np.testing.assert_array_equal(lift_state(L, [0.3, -0.7]), [0.3, -0.7])
    with pytest.raises(ValueError):
        lift_state(L, [1.0, 2.0, 3.0])


def test_term_grammar():
    print("[TEST] Term grammar...")
    assert canonical_label("x ** 2") == "x^2"
    assert canonical_label(" u * u_x ") == "u*u_x"
    with pytest.raises(ValueError):
        parse_term("w*x", ["x", "y"])
    with pytest.raises(ValueError):
        parse_term("x*", ["x"])
    with pytest.raises(ValueError):
        parse_term("", ["x"])
    with pytest.raises(ValueError):
        parse_term("u*cos(theta)", ["u"], is_field=True)
    with pytest.raises(ValueError):
        parse_term("u_xxx", ["u"], is_field=True)
    assert [m.factors[0].symbol.order for m in parse_term("u_xxxx", ["u"], is_field=True)] == [4]
    with pytest.raises(ValueError):
        build_lift(["x", "x"], ["x"])
    print("[PASS] Malformed, unknown and duplicate terms rejected")


def test_trig_lift_and_jacobian():
    print("[TEST] Trigonometric lift...")
    L = build_lift(IKEDA_TERMS, ["x", "y"], theta={"a": 0.4, "b": 6.0})
    x = np.array([0.3, -0.8])
    theta = 0.4 - 6.0 / (1.0 + x @ x)
    expected = [1.0, x[0] * np.cos(theta), x[1] * np.sin(theta), x[0] * np.sin(theta), x[1] * np.cos(theta)]
    np.testing.assert_allclose(lift_state(L, x), expected, rtol=1e-12)

    rng = np.random.default_rng(1)
    states = rng.uniform(-1.0, 1.0, (6, 2))
    jac = L.state_jacobian(states)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (L.lift_batch(states + e)[:, 0, :] - L.lift_batch(states - e)[:, 0, :]) / (2.0 * h)
        np.testing.assert_allclose(jac[:, :, k], fd, rtol=1e-5, atol=1e-7)
    print("[PASS] Values and state Jacobian agree with finite differences")


def test_spectral_derivatives_of_sine():
    print("[TEST] Spectral derivatives...")
    n = 32
    dx = 2.0 * np.pi / n
    x = dx * np.arange(n)
    u = np.sin(x)
    np.testing.assert_allclose(spatial_derivatives(u, dx, 1), np.cos(x), atol=1e-10)
    np.testing.assert_allclose(spatial_derivatives(u, dx, 2), -np.sin(x), atol=1e-10)
    np.testing.assert_allclose(spatial_derivatives(u, dx, 4), np.sin(x), atol=1e-10)
    with pytest.raises(ValueError):
        spatial_derivatives(u, dx, 3)
    with pytest.raises(ValueError):
        spatial_derivatives(u, 0.0, 1)
    print("[PASS] Exact on a resolved mode")


def test_central_differences_second_order():
    print("[TEST] Central differences...")
    errors = []
    for n in (64, 128):
        dx = 2.0 * np.pi / n
        x = dx * np.arange(n)
        d1 = spatial_derivatives(np.sin(x), dx, 1, "central_fd")
        errors.append(np.max(np.abs(d1 - np.cos(x))))
    order = np.log2(errors[0] / errors[1])
    assert 1.9 < order < 2.1
    print(f"[PASS] Observed order {order:.3f}")


def test_constant_field_has_zero_derivatives():
    print("[TEST] Constant field...")
    for scheme in ("spectral", "central_fd"):
        L = build_lift(["u", "u_x", "u_xx", "u*u_x"], ["u"], is_field=True, dx=0.1, scheme=scheme)
        rows = lift_field(L, np.full(16, 2.5))
        np.testing.assert_allclose(rows[:, 0], 2.5)
        np.testing.assert_allclose(rows[:, 1:], 0.0, atol=1e-12)
    print("[PASS] u_x = u_xx = 0 for both schemes")


def test_field_lift_vjp_matches_directional_derivative():
    print("[TEST] Field lift adjoint...")
    rng = np.random.default_rng(4)
    L = build_lift(["u", "u*u_x", "u_xx", "u_x^2"], ["u"], is_field=True, dx=0.5)
    u = rng.standard_normal((1, 16))
    v = rng.standard_normal((1, 16))
    g = rng.standard_normal((1, 16, L.n_terms))
    eps = 1e-6
    fd = (np.sum(g * L.lift_batch(u + eps * v)) - np.sum(g * L.lift_batch(u - eps * v))) / (2.0 * eps)
    analytic = float(np.sum(L.lift_vjp(u, g) * v))
    assert analytic == pytest.approx(fd, rel=1e-6, abs=1e-8)
    print("[PASS] <vjp, v> equals the directional derivative")


def test_derivative_adjoint_is_transpose():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    for scheme in ("spectral", "central_fd"):
        for order in (1, 2, 4):
            lhs = np.dot(spatial_derivatives(a, 0.3, order, scheme), b)
            rhs = np.dot(a, derivative_adjoint(b, 0.3, order, scheme))
            assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


if __name__ == "__main__":
    test_polynomial_lift_values()
    test_hopf_lift_values()
    test_identity_lift()
    test_term_grammar()
    test_trig_lift_and_jacobian()
    test_spectral_derivatives_of_sine()
    test_central_differences_second_order()
    test_constant_field_has_zero_derivatives()
    test_field_lift_vjp_matches_directional_derivative()
    test_derivative_adjoint_is_transpose()
