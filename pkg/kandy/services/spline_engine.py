"""
Learnable univariate edge functions.

Each spline is a sum of Gaussian radial basis functions exp(-s*u^2) on a
uniform grid of G centers, u = (x - center)/h with bandwidth h = k * grid
spacing, plus an affine term slope*x + bias. The output is linear in
(coeffs, slope, bias); basis_row exposes that linear map.
"""
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

BASIS_KIND = "gaussian_rbf"
DEFAULT_EXPONENT_SCALE = 3.0
INIT_RANGE = 0.1
RIDGE_FLOOR = 1e-8
GRID_MARGIN = 0.05

ArrayLike = Union[float, np.ndarray]


def grid_centers(lo: float, hi: float, grid_size: int) -> np.ndarray:
    if grid_size == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, grid_size)


def grid_bandwidth(lo: float, hi: float, grid_size: int, knots: int) -> float:
    # A single center has no spacing; the whole range is used instead.
    spacing = (hi - lo) / (grid_size - 1) if grid_size > 1 else (hi - lo)
    return knots * spacing


def gaussian_basis(x: np.ndarray, centers: np.ndarray, h, scale: float = DEFAULT_EXPONENT_SCALE) -> np.ndarray:
    """Basis values with a trailing G axis; centers/h broadcast against x[..., None]."""
    u = (np.asarray(x, dtype=float)[..., None] - centers) / h
    return np.exp(-scale * u * u)


def gaussian_basis_slope(x: np.ndarray, centers: np.ndarray, h, scale: float = DEFAULT_EXPONENT_SCALE) -> np.ndarray:
    """d/dx of gaussian_basis."""
    diff = np.asarray(x, dtype=float)[..., None] - centers
    u = diff / h
    return -2.0 * scale * diff / (h * h) * np.exp(-scale * u * u)


@dataclass(frozen=True)
class Spline1D:
    domain_lo: float
    domain_hi: float
    grid_size: int
    knots: int
    coeffs: np.ndarray
    affine_slope: float = 0.0
    affine_bias: float = 0.0
    basis_kind: str = BASIS_KIND
    exponent_scale: float = DEFAULT_EXPONENT_SCALE

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1)
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        if not (np.isfinite(self.domain_lo) and np.isfinite(self.domain_hi)) or self.domain_lo >= self.domain_hi:
            raise ValueError(f"Invalid spline domain [{self.domain_lo}, {self.domain_hi}]")
        if self.grid_size < 1 or self.knots < 1:
            raise ValueError("grid_size and knots must be positive")
        if coeffs.size != self.grid_size:
            raise ValueError(f"Expected {self.grid_size} coefficients, got {coeffs.size}")
        if not (np.all(np.isfinite(coeffs)) and np.isfinite(self.affine_slope) and np.isfinite(self.affine_bias)):
            raise ValueError("Spline parameters must be finite")
        if self.basis_kind != BASIS_KIND:
            raise ValueError(f"Unsupported basis kind {self.basis_kind}")

    @property
    def centers(self) -> np.ndarray:
        return grid_centers(self.domain_lo, self.domain_hi, self.grid_size)

    @property
    def bandwidth(self) -> float:
        return grid_bandwidth(self.domain_lo, self.domain_hi, self.grid_size, self.knots)

    @property
    def params(self) -> np.ndarray:
        """[coeffs; slope; bias], the vector basis_row is dotted with."""
        return np.concatenate([self.coeffs, [self.affine_slope, self.affine_bias]])

    def evaluate(self, x: ArrayLike) -> ArrayLike:
        x = np.asarray(x, dtype=float)
        phi = gaussian_basis(x, self.centers, self.bandwidth, self.exponent_scale)
        out = phi @ self.coeffs + self.affine_slope * x + self.affine_bias
        return float(out) if out.ndim == 0 else out

    def basis_row(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        phi = gaussian_basis(x, self.centers, self.bandwidth, self.exponent_scale)
        return np.concatenate([phi, x[..., None], np.ones_like(x)[..., None]], axis=-1)

    def input_derivative(self, x: ArrayLike) -> ArrayLike:
        x = np.asarray(x, dtype=float)
        dphi = gaussian_basis_slope(x, self.centers, self.bandwidth, self.exponent_scale)
        out = dphi @ self.coeffs + self.affine_slope
        return float(out) if out.ndim == 0 else out

    def with_params(self, params: np.ndarray) -> "Spline1D":
        params = np.asarray(params, dtype=float)
        return replace(self, coeffs=params[:-2], affine_slope=float(params[-2]), affine_bias=float(params[-1]))

    def to_record(self) -> dict:
        return {
            "lo": float(self.domain_lo),
            "hi": float(self.domain_hi),
            "G": int(self.grid_size),
            "k": int(self.knots),
            "coeffs": [float(c) for c in self.coeffs],
            "slope": float(self.affine_slope),
            "bias": float(self.affine_bias),
            "basis": self.basis_kind,
        }

    @classmethod
    def from_record(cls, rec: dict, exponent_scale: float = DEFAULT_EXPONENT_SCALE) -> "Spline1D":
        return cls(
            domain_lo=rec["lo"], domain_hi=rec["hi"], grid_size=rec["G"], knots=rec["k"],
            coeffs=np.asarray(rec["coeffs"], dtype=float), affine_slope=rec["slope"],
            affine_bias=rec["bias"], basis_kind=rec.get("basis", BASIS_KIND),
            exponent_scale=exponent_scale,
        )


def initial_coeffs(grid_size: int, init: str = "small_random", seed: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    init: "zero" or "small_random" (Uniform(-0.1, 0.1) from a seeded generator).
    """
    if init == "zero":
        return np.zeros(grid_size)
    if init == "small_random":
        rng = rng if rng is not None else np.random.default_rng(seed)
        return rng.uniform(-INIT_RANGE, INIT_RANGE, grid_size)
    raise ValueError(f"Unknown spline init '{init}'")


def new_spline(lo: float, hi: float, grid_size: int, knots: int, init: str = "small_random",
               seed: Optional[int] = None, exponent_scale: float = DEFAULT_EXPONENT_SCALE) -> Spline1D:
    if not lo < hi:
        raise ValueError(f"Invalid spline range: lo={lo} must be below hi={hi}")
    if grid_size < 2:
        raise ValueError(f"grid_size must be >= 2, got {grid_size}")
    return Spline1D(lo, hi, grid_size, knots, initial_coeffs(grid_size, init, seed),
                    exponent_scale=exponent_scale)


def evaluate(s: Spline1D, x: ArrayLike) -> ArrayLike:
    return s.evaluate(x)


def basis_row(s: Spline1D, x: ArrayLike) -> np.ndarray:
    return s.basis_row(x)


def input_derivative(s: Spline1D, x: ArrayLike) -> ArrayLike:
    return s.input_derivative(x)


def padded_range(samples: np.ndarray, margin: float = GRID_MARGIN):
    """[min - m*range, max + m*range]; raises on degenerate samples."""
    samples = np.asarray(samples, dtype=float).reshape(-1)
    if samples.size == 0 or not np.all(np.isfinite(samples)):
        raise ValueError("Grid update needs a nonempty, finite sample vector")
    lo, hi = float(samples.min()), float(samples.max())
    span = hi - lo
    if span <= 1e-12 * max(1.0, abs(hi)):
        raise ValueError("Degenerate samples: all values equal")
    return lo - margin * span, hi + margin * span


def ridge_lstsq(design: np.ndarray, target: np.ndarray, ridge: float = RIDGE_FLOOR) -> np.ndarray:
    """min |A p - y|^2 + lam |p|^2, lam = ridge * mean column energy (augmented-row solve)."""
    n_params = design.shape[1]
    energy = float(np.mean(np.sum(design * design, axis=0))) if design.size else 1.0
    lam = ridge * max(energy, 1.0)
    aug_a = np.vstack([design, np.sqrt(lam) * np.eye(n_params)])
    aug_y = np.concatenate([target, np.zeros(n_params)])
    sol, *_ = np.linalg.lstsq(aug_a, aug_y, rcond=None)
    return sol


def update_grid(s: Spline1D, samples: np.ndarray) -> Spline1D:
    """
    Move the grid onto the sample range (5% margin) and refit the parameters
    so the new spline reproduces the old values at the samples in the
    least-squares sense.
    """
    samples = np.asarray(samples, dtype=float).reshape(-1)
    lo, hi = padded_range(samples)
    fresh = replace(s, domain_lo=lo, domain_hi=hi)
    old_values = np.asarray(s.evaluate(samples), dtype=float)
    if not np.any(old_values):
        return replace(fresh, coeffs=np.zeros(s.grid_size), affine_slope=0.0, affine_bias=0.0)
    params = ridge_lstsq(fresh.basis_row(samples), old_values)
    return fresh.with_params(params)
