"""
Ground-truth generators for the benchmark systems.
All randomness comes from numpy Generators seeded by the caller.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from kandy.errors import DivergenceError
from kandy.models.series import Dataset, DatasetKind, FieldTrajectory, Trajectory
from kandy.services.integrators import cfl_dt, integrate, ks_stepper, rk4_step, rusanov_rhs
from kandy.services.lifting import spatial_derivatives

SYSTEMS = ("lorenz", "henon", "ikeda", "ks", "burgers", "hopf")

DEFAULT_PARAMS: Dict[str, Dict[str, float]] = {
    "lorenz": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
    "henon": {"a": 1.4, "b": 0.3},
    "ikeda": {"u": 0.9, "k": 0.4, "p": 6.0},
    "ks": {"L": 22.0, "N": 64, "nu": 1.0},
    "burgers": {"L": 2.0 * np.pi, "N": 256, "nu": 0.0},
    "hopf": {},
}

VARIABLES: Dict[str, List[str]] = {
    "lorenz": ["x", "y", "z"],
    "henon": ["x", "y"],
    "ikeda": ["x", "y"],
    "ks": ["u"],
    "burgers": ["u"],
    "hopf": ["x1", "x2", "x3", "x4"],
}

OUTPUTS: Dict[str, List[str]] = {
    "lorenz": ["x'", "y'", "z'"],
    "henon": ["x'", "y'"],
    "ikeda": ["x'", "y'"],
    "ks": ["u_t"],
    "burgers": ["u_t"],
    "hopf": ["h1", "h2", "h3"],
}

KINDS = {
    "lorenz": DatasetKind.ODE,
    "henon": DatasetKind.MAP,
    "ikeda": DatasetKind.MAP,
    "ks": DatasetKind.PDE_FIELD,
    "burgers": DatasetKind.PDE_FIELD,
    "hopf": DatasetKind.STATIC,
}

LORENZ_ENVELOPE = 1e3


@dataclass
class SystemSpec:
    """
    n_steps counts retained samples; burn_in samples are generated first and
    discarded. For maps dt is 1; for fields dt is the sampling interval.
    """
    name: str
    params: Dict[str, float] = field(default_factory=dict)
    ic: Optional[Sequence[float]] = None
    ic_perturbation: float = 0.0
    dt: float = 0.005
    n_steps: int = 10000
    burn_in: int = 0
    seed: int = 0
    sample_every: int = 1
    ic_kind: str = "sine"
    fourier_modes: int = 20
    fourier_decay: float = 1.0
    ic_seed: int = 42
    n_points: int = 2000
    n_fibers: int = 64
    points_per_fiber: int = 16

    def __post_init__(self):
        if self.name not in SYSTEMS:
            raise ValueError(f"Unknown system '{self.name}'")
        merged = dict(DEFAULT_PARAMS[self.name])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"Unknown parameters for {self.name}: {sorted(unknown)}")
        merged.update(self.params)
        self.params = merged
        if self.name != "hopf":
            if self.dt <= 0:
                raise ValueError("dt must be positive")
            if not 0 <= self.burn_in < self.n_steps:
                raise ValueError(f"burn_in ({self.burn_in}) must be below n_steps ({self.n_steps})")


# --- Lorenz -------------------------------------------------------------------

def lorenz_rhs(state: np.ndarray, sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> np.ndarray:
    """Vectorized over leading axes of (..., 3)."""
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


def lorenz_field(params: Dict[str, float]) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: lorenz_rhs(s, params["sigma"], params["rho"], params["beta"])


def gen_lorenz(spec: SystemSpec) -> Trajectory:
    rng = np.random.default_rng(spec.seed)
    x0 = np.asarray(spec.ic if spec.ic is not None else [0.0, 0.0, 0.0], dtype=float)
    if spec.ic_perturbation:
        x0 = x0 + spec.ic_perturbation * rng.standard_normal(3)
    states = integrate(lorenz_field(spec.params), x0, spec.dt, spec.burn_in + spec.n_steps - 1)
    if np.max(np.abs(states)) > LORENZ_ENVELOPE:
        raise DivergenceError("Lorenz trajectory left its attractor envelope")
    kept = states[spec.burn_in:]
    return Trajectory(spec.dt * np.arange(len(kept)), kept, spec.dt, VARIABLES["lorenz"], "ode")


# --- maps ---------------------------------------------------------------------

def henon_step(state: np.ndarray, a: float = 1.4, b: float = 0.3) -> np.ndarray:
    x, y = state[..., 0], state[..., 1]
    return np.stack([1.0 + y - a * x * x, b * x], axis=-1)


def ikeda_step(state: np.ndarray, u: float = 0.9, k: float = 0.4, p: float = 6.0) -> np.ndarray:
    x, y = state[..., 0], state[..., 1]
    theta = k - p / (1.0 + x * x + y * y)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([1.0 + u * (x * c - y * s), u * (x * s + y * c)], axis=-1)


def map_function(spec: SystemSpec) -> Callable[[np.ndarray], np.ndarray]:
    if spec.name == "henon":
        return lambda s: henon_step(s, spec.params["a"], spec.params["b"])
    if spec.name == "ikeda":
        return lambda s: ikeda_step(s, spec.params["u"], spec.params["k"], spec.params["p"])
    raise ValueError(f"{spec.name} is not a map")


def iterate_map(fn: Callable, x0: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n + 1, len(x0)))
    out[0] = x0
    for i in range(n):
        out[i + 1] = fn(out[i])
        if not np.all(np.isfinite(out[i + 1])):
            raise DivergenceError(f"Map orbit diverged at iteration {i + 1}")
    return out


def gen_map(spec: SystemSpec) -> Trajectory:
    rng = np.random.default_rng(spec.seed)
    x0 = np.asarray(spec.ic if spec.ic is not None else [0.0, 0.0], dtype=float)
    if spec.ic_perturbation:
        x0 = x0 + spec.ic_perturbation * rng.standard_normal(2)
    orbit = iterate_map(map_function(spec), x0, spec.burn_in + spec.n_steps - 1)[spec.burn_in:]
    return Trajectory(np.arange(len(orbit), dtype=float), orbit, 1.0, VARIABLES[spec.name], "map")


# --- Kuramoto-Sivashinsky -----------------------------------------------------

def ks_grid(length: float, n_points: int) -> np.ndarray:
    return length * np.arange(n_points) / n_points


def ks_initial(length: float, n_points: int, seed: int, modes: int = 4) -> np.ndarray:
    """Smooth zero-mean field from a few random low Fourier modes."""
    rng = np.random.default_rng(seed)
    x = ks_grid(length, n_points)
    amp = rng.standard_normal((modes, 2))
    u = np.zeros(n_points)
    for m in range(1, modes + 1):
        arg = 2.0 * np.pi * m * x / length
        u += amp[m - 1, 0] * np.cos(arg) + amp[m - 1, 1] * np.sin(arg)
    return u - u.mean()


def ks_rhs(u: np.ndarray, length: float, nu: float = 1.0) -> np.ndarray:
    """Pointwise tendency -u*u_x - nu*u_xx - u_xxxx from spectral derivatives."""
    dx = length / u.shape[-1]
    return (-u * spatial_derivatives(u, dx, 1) - nu * spatial_derivatives(u, dx, 2)
            - spatial_derivatives(u, dx, 4))


def gen_ks(length: float, n_points: int, nu: float, dt: float, total: int, seed: int,
           burn_in: int = 200, sample_every: int = 1, u0: Optional[np.ndarray] = None) -> FieldTrajectory:
    """
    `total` samples (spaced sample_every ETDRK4 steps) of which the first
    `burn_in` are discarded.
    """
    if total <= burn_in:
        raise ValueError("KS sample count must exceed the burn-in")
    stepper = ks_stepper(n_points, float(dt), float(length), float(nu))
    u = ks_initial(length, n_points, seed) if u0 is None else np.asarray(u0, dtype=float)
    u_hat = np.fft.rfft(u)
    fields = np.empty((total, n_points))
    fields[0] = u
    for n in range(1, total):
        for _ in range(sample_every):
            u_hat = stepper.step(u_hat)
        fields[n] = np.fft.irfft(u_hat, n=n_points)
    sample_dt = dt * sample_every
    kept = fields[burn_in:]
    return FieldTrajectory(sample_dt * np.arange(len(kept)), kept, length / n_points, sample_dt)


# --- Burgers ------------------------------------------------------------------

def burgers_initial(kind: str, x: np.ndarray, length: float, modes: int = 20, decay: float = 1.0,
                    seed: int = 42) -> np.ndarray:
    k0 = 2.0 * np.pi / length
    if kind == "sine":
        return np.sin(k0 * x)
    if kind == "random_fourier":
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal(modes)
        phi = rng.uniform(0.0, 2.0 * np.pi, modes)
        k = np.arange(1, modes + 1)
        return np.sum(xi[:, None] * k[:, None] ** (-decay) * np.sin(k[:, None] * k0 * x[None, :] + phi[:, None]), axis=0)
    raise ValueError(f"Unknown Burgers initial condition '{kind}'")


def gen_burgers(ic: str, nu: float, n_points: int, dx: float, total_time: float, sample_dt: float,
                modes: int = 20, decay: float = 1.0, seed: int = 42, cfl: float = 0.4) -> FieldTrajectory:
    """
    Rusanov method of lines with RK4 substeps of dt = cfl*dx/max|u|,
    recomputed every substep and clipped to land on the sampling times.
    """
    if dx <= 0 or n_points < 4 or sample_dt <= 0:
        raise ValueError("Burgers grid needs dx > 0, N >= 4 and a positive sampling interval")
    length = n_points * dx
    x = dx * np.arange(n_points)
    u = burgers_initial(ic, x, length, modes, decay, seed)
    n_samples = int(round(total_time / sample_dt)) + 1
    fields = np.empty((n_samples, n_points))
    fields[0] = u
    t = 0.0
    for n in range(1, n_samples):
        target = n * sample_dt
        while target - t > 1e-12 * max(1.0, target):
            h = min(cfl_dt(u, dx, cfl, nu), target - t)
            u = rk4_step(lambda v: rusanov_rhs(v, dx, nu), u, h)
            t += h
        t = target
        fields[n] = u
    return FieldTrajectory(sample_dt * np.arange(n_samples), fields, dx, sample_dt)


# --- Hopf fibration -----------------------------------------------------------

def hopf_map(states: np.ndarray) -> np.ndarray:
    """(x1, x2, x3, x4) -> (2 Re z1 conj(z2), 2 Im z1 conj(z2), |z1|^2 - |z2|^2)."""
    x1, x2, x3, x4 = (states[..., i] for i in range(4))
    return np.stack([
        2.0 * (x1 * x3 + x2 * x4),
        2.0 * (x2 * x3 - x1 * x4),
        x1 * x1 + x2 * x2 - x3 * x3 - x4 * x4,
    ], axis=-1)


def rotate_fiber(states: np.ndarray, angle) -> np.ndarray:
    """Free S^1 action (z1, z2) -> (e^{i angle} z1, e^{i angle} z2)."""
    c, s = np.cos(angle), np.sin(angle)
    x1, x2, x3, x4 = (states[..., i] for i in range(4))
    return np.stack([c * x1 - s * x2, s * x1 + c * x2, c * x3 - s * x4, s * x3 + c * x4], axis=-1)


def sample_sphere3(rng: np.random.Generator, n: int) -> np.ndarray:
    g = rng.standard_normal((n, 4))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def gen_hopf_dataset(n_points: int, n_fibers: int, seed: int, points_per_fiber: int = 16) -> Dataset:
    """
    Uniform S^3 samples (group -1) followed by n_fibers orbits of
    points_per_fiber equally spaced points each (group = fiber index).
    """
    if n_points < 1 or n_fibers < 0 or points_per_fiber < 1:
        raise ValueError("Hopf dataset needs n_points >= 1")
    rng = np.random.default_rng(seed)
    uniform = sample_sphere3(rng, n_points)
    bases = sample_sphere3(rng, n_fibers)
    angles = 2.0 * np.pi * np.arange(points_per_fiber) / points_per_fiber
    fibers = rotate_fiber(bases[:, None, :], angles[None, :]).reshape(-1, 4)
    states = np.vstack([uniform, fibers])
    groups = np.concatenate([-np.ones(n_points, dtype=int), np.repeat(np.arange(n_fibers), points_per_fiber)])
    return Dataset(states, hopf_map(states), DatasetKind.STATIC, groups=groups)


# --- dispatch -----------------------------------------------------------------

def generate(spec: SystemSpec):
    """Trajectory, FieldTrajectory or Dataset for the named system."""
    if spec.name == "lorenz":
        return gen_lorenz(spec)
    if spec.name in ("henon", "ikeda"):
        return gen_map(spec)
    if spec.name == "ks":
        p = spec.params
        return gen_ks(p["L"], int(p["N"]), p["nu"], spec.dt, spec.burn_in + spec.n_steps, spec.seed,
                      burn_in=spec.burn_in, sample_every=spec.sample_every)
    if spec.name == "burgers":
        p = spec.params
        n = int(p["N"])
        return gen_burgers(spec.ic_kind, p["nu"], n, p["L"] / n, spec.dt * (spec.n_steps - 1), spec.dt,
                           spec.fourier_modes, spec.fourier_decay, spec.ic_seed)
    return gen_hopf_dataset(spec.n_points, spec.n_fibers, spec.seed, spec.points_per_fiber)


def true_tendency(spec: SystemSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Analytic right-hand side used for "provided" derivative targets."""
    p = spec.params
    if spec.name == "lorenz":
        return lorenz_field(p)
    if spec.name == "ks":
        return lambda u: ks_rhs(u, p["L"], p["nu"])
    if spec.name == "burgers":
        dx = p["L"] / int(p["N"])
        return lambda u: rusanov_rhs(u, dx, p["nu"])
    raise ValueError(f"{spec.name} has no continuous-time tendency")
