import numpy as np
import pytest

from kandy.errors import DivergenceError
from kandy.services.integrators import (
    KSETDRK4, StepScheme, cfl_dt, etd_ks_step, euler_step, integrate, rk4_step, rusanov_step,
)
from kandy.services.systems import ks_initial, lorenz_rhs


def test_rk4_is_fourth_order():
    print("[TEST] RK4 convergence order...")
    x0 = np.array([1.0, 1.0, 1.0])
    T = 0.5
    ref = integrate(lorenz_rhs, x0, 0.0005, 1000)[-1]
    errors = [np.linalg.norm(integrate(lorenz_rhs, x0, dt, int(round(T / dt)))[-1] - ref) for dt in (0.01, 0.005)]
    order = np.log2(errors[0] / errors[1])
    assert 3.8 < order < 4.2
    print(f"[PASS] Observed order {order:.3f}")


def test_euler_step_and_divergence():
    print("[TEST] Euler step...")
    np.testing.assert_allclose(euler_step(lambda x: -x, np.array([2.0]), 0.1), [1.8])
    with np.errstate(over="ignore"):
        with pytest.raises(DivergenceError):
            euler_step(lambda x: x * 1e308, np.array([10.0]), 1e10)
    print("[PASS] Non-finite states raise DivergenceError")


def test_integrate_shape():
    out = integrate(lambda x: -x, np.array([1.0, 2.0]), 0.1, 7, kind="euler")
    assert out.shape == (8, 2)
    np.testing.assert_allclose(out[-1], np.array([1.0, 2.0]) * 0.9 ** 7)


def test_step_scheme_validation():
    assert StepScheme("rk4", 0.01).field_only is False
    assert StepScheme("etd_pseudospectral", 0.01).field_only is True
    with pytest.raises(ValueError):
        StepScheme("leapfrog", 0.01)
    with pytest.raises(ValueError):
        StepScheme("rk4", 0.0)
    with pytest.raises(ValueError):
        StepScheme("rk4", float("nan"))


def test_ks_etdrk4_self_convergence():
    print("[TEST] ETDRK4 convergence order...")
    u0 = ks_initial(22.0, 64, seed=0)
    finals = []
    for dt in (0.04, 0.02, 0.01):
        stepper = KSETDRK4(64, 22.0, 1.0, dt)
        u_hat = np.fft.rfft(u0)
        for _ in range(int(round(0.8 / dt))):
            u_hat = stepper.step(u_hat)
        finals.append(np.fft.irfft(u_hat, n=64))
    order = np.log2(np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2]))
    assert order >= 3.5
    print(f"[PASS] Observed order {order:.3f}")


def test_ks_step_preconditions():
    with pytest.raises(ValueError):
        KSETDRK4(63, 22.0, 1.0, 0.05)
    with pytest.raises(DivergenceError):
        etd_ks_step(np.array([np.nan, 0.0, 0.0], dtype=complex), 0.05, 22.0, 1.0)


def test_rusanov_conserves_mass():
    print("[TEST] Rusanov conservation...")
    n = 128
    dx = 2.0 * np.pi / n
    u = np.sin(dx * np.arange(n))
    mass0 = u.sum()
    for _ in range(1000):
        u = rusanov_step(u, 0.4 * dx, dx)
    assert abs(u.sum() - mass0) < 1e-10
    assert np.all(np.isfinite(u))
    print("[PASS] Discrete mass conserved through shock formation")


def test_cfl_dt():
    dx = 0.1
    assert cfl_dt(np.array([2.0, -4.0]), dx) == pytest.approx(0.4 * dx / 4.0)
    assert cfl_dt(np.array([1.0]), dx, nu=1.0) <= 0.4 * dx


if __name__ == "__main__":
    test_rk4_is_fourth_order()
    test_euler_step_and_divergence()
    test_integrate_shape()
    test_step_scheme_validation()
    test_ks_etdrk4_self_convergence()
    test_ks_step_preconditions()
    test_rusanov_conserves_mass()
    test_cfl_dt()
