"""
Fixed-step integrators shared by data generation and model rollouts.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from kandy.errors import DivergenceError

STEP_KINDS = ("euler", "rk4", "rusanov_mol", "etd_pseudospectral")
FIELD_ONLY = ("rusanov_mol", "etd_pseudospectral")
CONTOUR_POINTS = 32

VectorField = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class StepScheme:
    kind: str
    dt: float

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"Unknown step scheme '{self.kind}'")
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise ValueError(f"Step size must be finite and positive, got {self.dt}")

    @property
    def field_only(self) -> bool:
        return self.kind in FIELD_ONLY


def _checked(x: np.ndarray, scheme: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"{scheme} step produced non-finite state")
    return x


def euler_step(f: VectorField, x: np.ndarray, dt: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return _checked(x + dt * f(x), "euler")


def rk4_step(f: VectorField, x: np.ndarray, dt: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return _checked(x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), "rk4")


STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def integrate(f: VectorField, x0: np.ndarray, dt: float, n_steps: int, kind: str = "rk4") -> np.ndarray:
    """States x_0..x_n as an (n_steps + 1, ...) array."""
    step = STEPPERS[kind]
    out = np.empty((n_steps + 1,) + np.shape(x0))
    out[0] = x0
    for n in range(n_steps):
        out[n + 1] = step(f, out[n], dt)
    return out


# --- finite volume (Burgers) --------------------------------------------------

def burgers_flux(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * u


def rusanov_rhs(u: np.ndarray, dx: float, nu: float = 0.0, flux: Callable = burgers_flux) -> np.ndarray:
    """
    Semi-discrete tendency of u_t + f(u)_x = nu*u_xx on a periodic grid with
    the local Lax-Friedrichs interface flux
        F_{i+1/2} = (f(u_i) + f(u_{i+1}))/2 - max(|u_i|, |u_{i+1}|)*(u_{i+1} - u_i)/2
    """
    if dx <= 0:
        raise ValueError("dx must be positive")
    u = np.asarray(u, dtype=float)
    u_right = np.roll(u, -1, axis=-1)
    speed = np.maximum(np.abs(u), np.abs(u_right))
    f_face = 0.5 * (flux(u) + flux(u_right)) - 0.5 * speed * (u_right - u)
    tendency = -(f_face - np.roll(f_face, 1, axis=-1)) / dx
    if nu:
        tendency = tendency + nu * (u_right - 2.0 * u + np.roll(u, 1, axis=-1)) / dx ** 2
    return tendency


def rusanov_step(u: np.ndarray, dt: float, dx: float, nu: float = 0.0) -> np.ndarray:
    """Method-of-lines RK4 step of the Rusanov tendency."""
    return rk4_step(lambda v: rusanov_rhs(v, dx, nu), u, dt)


def cfl_dt(u: np.ndarray, dx: float, cfl: float = 0.4, nu: float = 0.0) -> float:
    """cfl*dx/max|u|, tightened by the explicit diffusion limit when nu > 0."""
    umax = float(np.max(np.abs(u)))
    dt = cfl * dx / umax if umax > 0 else np.inf
    if nu > 0:
        dt = min(dt, cfl * dx * dx / (2.0 * nu))
    return dt


# --- exponential time differencing (Kuramoto-Sivashinsky) ---------------------

class KSETDRK4:
    """
    ETDRK4 for u_t = -u*u_x - nu*u_xx - u_xxxx on [0, L) with N points,
    acting on rfft coefficients. Linear symbol nu*k^2 - k^4 is integrated
    exactly; phi-function coefficients come from a contour mean over
    CONTOUR_POINTS points; the quadratic term is dealiased by the 2/3 rule.
    """

    def __init__(self, n_points: int, length: float, nu: float, dt: float, contour_points: int = CONTOUR_POINTS):
        if n_points % 2:
            raise ValueError("KS grid size must be even")
        if dt <= 0 or length <= 0:
            raise ValueError("KS step needs positive dt and domain length")
        self.n_points = n_points
        self.dt = dt
        kappa = 2.0 * np.pi * np.arange(n_points // 2 + 1) / length
        self.ik = 1j * kappa
        self.ik[-1] = 0.0
        self.dealias = np.arange(n_points // 2 + 1) < n_points / 3.0
        lin = nu * kappa ** 2 - kappa ** 4
        self.exp_full = np.exp(dt * lin)
        self.exp_half = np.exp(0.5 * dt * lin)
        roots = np.exp(1j * np.pi * (np.arange(contour_points) + 0.5) / contour_points)
        lr = dt * lin[:, None] + roots[None, :]
        exp_lr = np.exp(lr)
        self.q = dt * ((np.exp(lr / 2.0) - 1.0) / lr).mean(axis=1).real
        self.f1 = dt * ((-4.0 - lr + exp_lr * (4.0 - 3.0 * lr + lr ** 2)) / lr ** 3).mean(axis=1).real
        self.f2 = dt * ((2.0 + lr + exp_lr * (lr - 2.0)) / lr ** 3).mean(axis=1).real
        self.f3 = dt * ((-4.0 - 3.0 * lr - lr ** 2 + exp_lr * (4.0 - lr)) / lr ** 3).mean(axis=1).real

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        u = np.fft.irfft(u_hat * self.dealias, n=self.n_points, axis=-1)
        return -0.5 * self.ik * np.fft.rfft(u * u, axis=-1) * self.dealias

    def step(self, u_hat: np.ndarray) -> np.ndarray:
        n0 = self.nonlinear(u_hat)
        a = self.exp_half * u_hat + self.q * n0
        na = self.nonlinear(a)
        b = self.exp_half * u_hat + self.q * na
        nb = self.nonlinear(b)
        c = self.exp_half * a + self.q * (2.0 * nb - n0)
        nc = self.nonlinear(c)
        out = self.exp_full * u_hat + self.f1 * n0 + 2.0 * self.f2 * (na + nb) + self.f3 * nc
        if not np.all(np.isfinite(out)):
            raise DivergenceError("ETDRK4 step produced non-finite modes")
        return out


@lru_cache(maxsize=8)
def ks_stepper(n_points: int, dt: float, length: float, nu: float) -> KSETDRK4:
    return KSETDRK4(n_points, length, nu, dt)


def etd_ks_step(u_hat: np.ndarray, dt: float, length: float, nu: float, n_points: int = None) -> np.ndarray:
    """One ETDRK4 step on rfft coefficients; n_points defaults to the even grid the modes imply."""
    u_hat = np.asarray(u_hat, dtype=complex)
    if not np.all(np.isfinite(u_hat)):
        raise DivergenceError("KS state contains non-finite modes")
    n = n_points or 2 * (u_hat.shape[-1] - 1)
    return ks_stepper(n, float(dt), float(length), float(nu)).step(u_hat)
