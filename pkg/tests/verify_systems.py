import numpy as np
import pytest

from kandy.models.series import DatasetKind, FieldTrajectory, Trajectory
from kandy.services.systems import (
    SystemSpec, gen_burgers, gen_hopf_dataset, gen_ks, generate, henon_step, hopf_map, ikeda_step, lorenz_rhs,
    rotate_fiber, sample_sphere3, true_tendency,
)


def test_closed_form_examples():
    print("[TEST] Reference systems at known points...")
    np.testing.assert_allclose(lorenz_rhs(np.array([1.0, 1.0, 1.0])), [0.0, 26.0, 1.0 - 8.0 / 3.0])
    np.testing.assert_allclose(lorenz_rhs(np.zeros(3)), 0.0)
    np.testing.assert_allclose(henon_step(np.array([1.0, 0.0])), [-0.4, 0.3])
    np.testing.assert_allclose(henon_step(np.array([0.0, 0.0])), [1.0, 0.0])
    np.testing.assert_allclose(ikeda_step(np.array([0.0, 0.0])), [1.0, 0.0])
    np.testing.assert_allclose(hopf_map(np.array([1.0, 0.0, 0.0, 0.0])), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(hopf_map(np.array([0.0, 0.0, 1.0, 0.0])), [0.0, 0.0, -1.0])
    print("[PASS] Lorenz, Henon, Ikeda and Hopf values")


def test_hopf_map_geometry():
    print("[TEST] Hopf geometry...")
    pts = sample_sphere3(np.random.default_rng(3), 500)
    images = hopf_map(pts)
    np.testing.assert_allclose(np.linalg.norm(images, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(hopf_map(rotate_fiber(pts, 1.234)), images, atol=1e-12)
    print("[PASS] Images lie on S^2 and are constant along fibers")


def test_hopf_dataset_layout():
    D = gen_hopf_dataset(100, 8, seed=1, points_per_fiber=16)
    assert len(D) == 100 + 8 * 16
    assert D.kind == DatasetKind.STATIC
    assert np.sum(D.groups == -1) == 100
    for g in range(8):
        block = D.targets[D.groups == g]
        np.testing.assert_allclose(block, block[0][None, :].repeat(len(block), axis=0), atol=1e-12)


def test_spec_validation():
    with pytest.raises(ValueError):
        SystemSpec("pendulum")
    with pytest.raises(ValueError):
        SystemSpec("henon", params={"c": 1.0})
    with pytest.raises(ValueError):
        SystemSpec("lorenz", n_steps=100, burn_in=100)
    spec = SystemSpec("lorenz", params={"rho": 20.0})
    assert spec.params["sigma"] == 10.0 and spec.params["rho"] == 20.0
    with pytest.raises(ValueError):
        true_tendency(SystemSpec("henon"))


def test_lorenz_generation_is_reproducible():
    print("[TEST] Lorenz generation...")
    spec = SystemSpec("lorenz", ic=[0.0, 0.0, 0.0], ic_perturbation=1e-3, dt=0.01, n_steps=300, burn_in=50, seed=9)
    a, b = generate(spec), generate(spec)
    assert isinstance(a, Trajectory) and len(a) == 300
    assert a.times[0] == 0.0 and a.dt == 0.01
    np.testing.assert_array_equal(a.states, b.states)
    assert np.max(np.abs(a.states)) > 1e-3
    print("[PASS] Same seed, same trajectory")


def test_map_generation():
    spec = SystemSpec("henon", ic=[0.1, 0.1], n_steps=200, burn_in=20)
    traj = generate(spec)
    assert len(traj) == 200 and traj.dt == 1.0 and traj.kind == "map"
    np.testing.assert_allclose(traj.states[1:], henon_step(traj.states[:-1]), atol=1e-15)


def test_ks_invariants():
    print("[TEST] KS generation...")
    zero = gen_ks(22.0, 32, 1.0, 0.05, 20, seed=0, burn_in=5, u0=np.zeros(32))
    assert isinstance(zero, FieldTrajectory) and len(zero) == 15
    assert np.all(zero.fields == 0.0)
    traj = gen_ks(22.0, 64, 1.0, 0.05, 200, seed=2, burn_in=0)
    np.testing.assert_allclose(traj.fields.mean(axis=1), traj.fields[0].mean(), atol=1e-12)
    assert traj.dx == pytest.approx(22.0 / 64)
    print("[PASS] Zero state is fixed, mean is conserved")


def test_burgers_inviscid_conserves_mass():
    print("[TEST] Burgers generation...")
    n = 64
    dx = 2.0 * np.pi / n
    traj = gen_burgers("sine", 0.0, n, dx, total_time=0.5, sample_dt=0.1)
    assert len(traj) == 6
    np.testing.assert_allclose(traj.fields.sum(axis=1), traj.fields[0].sum(), atol=1e-10)
    a = gen_burgers("random_fourier", 0.01, n, dx, 0.05, 0.05, seed=42)
    b = gen_burgers("random_fourier", 0.01, n, dx, 0.05, 0.05, seed=42)
    np.testing.assert_array_equal(a.fields, b.fields)
    with pytest.raises(ValueError):
        gen_burgers("square", 0.0, n, dx, 0.1, 0.1)
    print("[PASS] Mass conserved, random IC reproducible")


if __name__ == "__main__":
    test_closed_form_examples()
    test_hopf_map_geometry()
    test_hopf_dataset_layout()
    test_spec_validation()
    test_lorenz_generation_is_reproducible()
    test_map_generation()
    test_ks_invariants()
    test_burgers_inviscid_conserves_mass()
