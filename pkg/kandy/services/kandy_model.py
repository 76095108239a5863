"""
Zero-depth KAN: output_j = sum_i phi_ij(Theta_i).

Spline edges act on standardized features z = (Theta - mean) / scale and are
stored column-wise (every edge fed by input i shares that input's grid).
Edges replaced by symbolic terms act on raw Theta.
"""
import copy
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Tuple

import numpy as np

from kandy.services.lifting import LiftMap
from kandy.services.spline_engine import (
    DEFAULT_EXPONENT_SCALE, Spline1D, gaussian_basis, gaussian_basis_slope,
    grid_bandwidth, grid_centers, initial_coeffs, padded_range, ridge_lstsq,
)


class EdgeTerm(Protocol):
    """Closed-form edge function of one raw input."""
    def evaluate(self, x: np.ndarray) -> np.ndarray: ...
    def derivative(self, x: np.ndarray) -> np.ndarray: ...


@dataclass
class ParamGrad:
    coeffs: np.ndarray   # (n_in, n_out, G)
    slope: np.ndarray    # (n_in, n_out)
    bias: np.ndarray     # (n_in, n_out)


class KandyModel:
    def __init__(self, lift: LiftMap, n_out: int, grid_size: int, knots: int,
                 domain_lo: np.ndarray, domain_hi: np.ndarray,
                 coeffs: Optional[np.ndarray] = None,
                 slope: Optional[np.ndarray] = None,
                 bias: Optional[np.ndarray] = None,
                 mask: Optional[np.ndarray] = None,
                 feature_mean: Optional[np.ndarray] = None,
                 feature_scale: Optional[np.ndarray] = None,
                 exponent_scale: float = DEFAULT_EXPONENT_SCALE,
                 output_names=None):
        n_in = lift.n_terms
        if n_out < 1:
            raise ValueError("Model needs at least one output")
        self.lift = lift
        self.n_in = n_in
        self.n_out = n_out
        self.grid_size = int(grid_size)
        self.knots = int(knots)
        self.exponent_scale = float(exponent_scale)
        self.domain_lo = np.asarray(domain_lo, dtype=float).reshape(n_in).copy()
        self.domain_hi = np.asarray(domain_hi, dtype=float).reshape(n_in).copy()
        if np.any(self.domain_lo >= self.domain_hi):
            raise ValueError("Every input domain needs lo < hi")
        self.coeffs = np.zeros((n_in, n_out, self.grid_size)) if coeffs is None else np.array(coeffs, dtype=float)
        self.slope = np.zeros((n_in, n_out)) if slope is None else np.array(slope, dtype=float)
        self.bias = np.zeros((n_in, n_out)) if bias is None else np.array(bias, dtype=float)
        self.mask = np.ones((n_in, n_out), dtype=bool) if mask is None else np.array(mask, dtype=bool)
        self.feature_mean = np.zeros(n_in) if feature_mean is None else np.array(feature_mean, dtype=float)
        self.feature_scale = np.ones(n_in) if feature_scale is None else np.array(feature_scale, dtype=float)
        if self.coeffs.shape != (n_in, n_out, self.grid_size):
            raise ValueError(f"coeffs shape {self.coeffs.shape} != {(n_in, n_out, self.grid_size)}")
        if self.slope.shape != (n_in, n_out) or self.bias.shape != (n_in, n_out) or self.mask.shape != (n_in, n_out):
            raise ValueError("slope/bias/mask must be (n_in, n_out)")
        if np.any(self.feature_scale <= 0):
            raise ValueError("Feature scales must be positive")
        self.symbolic: Dict[Tuple[int, int], EdgeTerm] = {}
        # per-output constant left by symbolic extraction
        self.offset = np.zeros(n_out)
        self.output_names = list(output_names) if output_names else [f"y{j}" for j in range(n_out)]

    # --- geometry -------------------------------------------------------------

    @property
    def centers(self) -> np.ndarray:
        return np.stack([grid_centers(lo, hi, self.grid_size) for lo, hi in zip(self.domain_lo, self.domain_hi)])

    @property
    def bandwidths(self) -> np.ndarray:
        return np.array([grid_bandwidth(lo, hi, self.grid_size, self.knots)
                         for lo, hi in zip(self.domain_lo, self.domain_hi)])

    @property
    def spline_mask(self) -> np.ndarray:
        """Active edges still carried by splines."""
        sm = self.mask.copy()
        for (i, j) in self.symbolic:
            sm[i, j] = False
        return sm

    def edge(self, i: int, j: int) -> Spline1D:
        self._check_index(i, j)
        return Spline1D(self.domain_lo[i], self.domain_hi[i], self.grid_size, self.knots,
                        self.coeffs[i, j], self.slope[i, j], self.bias[i, j],
                        exponent_scale=self.exponent_scale)

    def set_edge(self, i: int, j: int, s: Spline1D):
        self._check_index(i, j)
        self.coeffs[i, j] = s.coeffs
        self.slope[i, j] = s.affine_slope
        self.bias[i, j] = s.affine_bias

    @property
    def edges(self):
        return [[self.edge(i, j) for j in range(self.n_out)] for i in range(self.n_in)]

    def _check_index(self, i: int, j: int):
        if not (0 <= i < self.n_in and 0 <= j < self.n_out):
            raise IndexError(f"Edge ({i}, {j}) out of range for {self.n_in}x{self.n_out} model")

    def normalize(self, theta: np.ndarray) -> np.ndarray:
        return (theta - self.feature_mean) / self.feature_scale

    # --- evaluation -----------------------------------------------------------

    def _basis(self, z: np.ndarray) -> np.ndarray:
        h = self.bandwidths[:, None]
        return gaussian_basis(z, self.centers, h, self.exponent_scale)

    def forward_batch(self, theta: np.ndarray) -> np.ndarray:
        """(..., n_in) raw lifted features -> (..., n_out)."""
        theta = np.asarray(theta, dtype=float)
        sm = self.spline_mask
        z = self.normalize(theta)
        basis = self._basis(z)
        out = np.einsum("...ig,ijg->...j", basis, self.coeffs * sm[..., None])
        out = out + z @ (self.slope * sm) + np.sum(self.bias * sm, axis=0) + self.offset
        for (i, j), term in sorted(self.symbolic.items()):
            if self.mask[i, j]:
                out[..., j] += term.evaluate(theta[..., i])
        return out

    def edge_output(self, i: int, j: int, theta_i: np.ndarray) -> np.ndarray:
        """Value of edge (i, j) on raw input samples; 0 when pruned."""
        self._check_index(i, j)
        theta_i = np.asarray(theta_i, dtype=float)
        if not self.mask[i, j]:
            return np.zeros_like(theta_i)
        if (i, j) in self.symbolic:
            return self.symbolic[(i, j)].evaluate(theta_i)
        z = (theta_i - self.feature_mean[i]) / self.feature_scale[i]
        return np.asarray(self.edge(i, j).evaluate(z), dtype=float)

    def forward(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_in,):
            raise ValueError(f"Lifted vector has shape {theta.shape}, expected ({self.n_in},)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("Lifted vector contains non-finite entries")
        return self.forward_batch(theta)

    def forward_field(self, lifted_rows) -> np.ndarray:
        rows = np.asarray(lifted_rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != self.n_in:
            raise ValueError(f"Lifted rows must be (N, {self.n_in}), got {rows.shape}")
        return self.forward_batch(rows)

    def param_gradient_batch(self, theta: np.ndarray, upstream: np.ndarray) -> ParamGrad:
        """Sum over leading axes of upstream . d forward / d params."""
        theta = np.asarray(theta, dtype=float).reshape(-1, self.n_in)
        upstream = np.asarray(upstream, dtype=float).reshape(-1, self.n_out)
        sm = self.spline_mask
        z = self.normalize(theta)
        basis = self._basis(z)
        g_coeffs = np.einsum("sig,sj->ijg", basis, upstream) * sm[..., None]
        g_slope = np.einsum("si,sj->ij", z, upstream) * sm
        g_bias = np.broadcast_to(upstream.sum(axis=0), (self.n_in, self.n_out)) * sm
        return ParamGrad(g_coeffs, g_slope, np.array(g_bias))

    def param_gradient(self, theta, upstream) -> ParamGrad:
        self.forward(theta)
        return self.param_gradient_batch(np.asarray(theta)[None, :], np.asarray(upstream)[None, :])

    def input_jacobian_batch(self, theta: np.ndarray) -> np.ndarray:
        """(..., n_in) -> (..., n_out, n_in) with respect to raw Theta."""
        theta = np.asarray(theta, dtype=float)
        sm = self.spline_mask
        z = self.normalize(theta)
        dbasis = gaussian_basis_slope(z, self.centers, self.bandwidths[:, None], self.exponent_scale)
        jac_z = np.einsum("...ig,ijg->...ji", dbasis, self.coeffs * sm[..., None]) + (self.slope * sm).T
        jac = jac_z / self.feature_scale
        for (i, j), term in sorted(self.symbolic.items()):
            if self.mask[i, j]:
                jac[..., j, i] += term.derivative(theta[..., i])
        return jac

    def input_jacobian(self, theta) -> np.ndarray:
        self.forward(theta)
        return self.input_jacobian_batch(theta)

    # --- parameter vector -----------------------------------------------------

    def param_layout(self, freeze_coeffs: bool = False):
        sm = self.spline_mask
        parts = []
        if not freeze_coeffs:
            parts.append(("coeffs", np.repeat(sm[..., None], self.grid_size, axis=2)))
        parts.append(("slope", sm))
        parts.append(("bias", sm))
        return parts

    def get_params(self, freeze_coeffs: bool = False) -> np.ndarray:
        return np.concatenate([getattr(self, name)[sel] for name, sel in self.param_layout(freeze_coeffs)])

    def set_params(self, vec: np.ndarray, freeze_coeffs: bool = False):
        pos = 0
        for name, sel in self.param_layout(freeze_coeffs):
            n = int(sel.sum())
            getattr(self, name)[sel] = vec[pos:pos + n]
            pos += n

    def flatten_grad(self, grad: ParamGrad, freeze_coeffs: bool = False) -> np.ndarray:
        return np.concatenate([getattr(grad, name)[sel] for name, sel in self.param_layout(freeze_coeffs)])

    # --- grid maintenance -----------------------------------------------------

    def update_input_grid(self, i: int, z_samples: np.ndarray):
        """Move input i's grid onto z_samples, refitting every spline edge it feeds."""
        lo, hi = padded_range(z_samples)
        old = [self.edge(i, j) for j in range(self.n_out)]
        self.domain_lo[i], self.domain_hi[i] = lo, hi
        for j, s_old in enumerate(old):
            values = np.asarray(s_old.evaluate(z_samples), dtype=float)
            fresh = self.edge(i, j)
            self.set_edge(i, j, fresh.with_params(ridge_lstsq(fresh.basis_row(z_samples), values)))

    # --- structural edits -----------------------------------------------------

    def copy(self) -> "KandyModel":
        twin = copy.copy(self)
        for name in ("domain_lo", "domain_hi", "coeffs", "slope", "bias", "mask", "feature_mean", "feature_scale",
                     "offset"):
            setattr(twin, name, getattr(self, name).copy())
        twin.symbolic = dict(self.symbolic)
        twin.output_names = list(self.output_names)
        return twin


def new_model(lift: LiftMap, n_out: int, theta_samples: np.ndarray, grid_size: int, knots: int,
              init: str = "small_random", rng: Optional[np.random.Generator] = None,
              normalize: bool = False, exponent_scale: float = DEFAULT_EXPONENT_SCALE,
              output_names=None) -> KandyModel:
    """
    Size a model from lifted training samples (any leading shape, last axis n_in):
    feature statistics when normalizing, grid domains from the sample range.
    Constant features keep unit scale and get a unit-wide domain.
    """
    flat = np.asarray(theta_samples, dtype=float).reshape(-1, lift.n_terms)
    mean = flat.mean(axis=0) if normalize else np.zeros(lift.n_terms)
    scale = flat.std(axis=0) if normalize else np.ones(lift.n_terms)
    scale = np.where(scale > 1e-12, scale, 1.0)
    z = (flat - mean) / scale
    lo, hi = np.empty(lift.n_terms), np.empty(lift.n_terms)
    for i in range(lift.n_terms):
        try:
            lo[i], hi[i] = padded_range(z[:, i])
        except ValueError:
            lo[i], hi[i] = z[0, i] - 0.5, z[0, i] + 0.5
    rng = rng if rng is not None else np.random.default_rng(0)
    coeffs = np.stack([
        np.stack([initial_coeffs(grid_size, init, rng=rng) for _ in range(n_out)])
        for _ in range(lift.n_terms)
    ])
    return KandyModel(lift, n_out, grid_size, knots, lo, hi, coeffs=coeffs,
                      feature_mean=mean, feature_scale=scale, exponent_scale=exponent_scale,
                      output_names=output_names)


def forward(m: KandyModel, theta) -> np.ndarray:
    return m.forward(theta)


def forward_field(m: KandyModel, lifted_rows) -> np.ndarray:
    return m.forward_field(lifted_rows)


def param_gradient(m: KandyModel, theta, upstream) -> ParamGrad:
    return m.param_gradient(theta, upstream)


def input_jacobian(m: KandyModel, theta) -> np.ndarray:
    return m.input_jacobian(theta)


def prune_edge(m: KandyModel, i: int, j: int) -> KandyModel:
    m._check_index(i, j)
    out = m.copy()
    out.mask[i, j] = False
    out.symbolic.pop((i, j), None)
    return out


def set_edge_symbolic(m: KandyModel, i: int, j: int, term: Optional[EdgeTerm]) -> KandyModel:
    """Replace edge (i, j) with a closed-form term; None prunes it."""
    if term is None:
        return prune_edge(m, i, j)
    m._check_index(i, j)
    out = m.copy()
    out.mask[i, j] = True
    out.symbolic[(i, j)] = term
    return out


def model_vector_field(m: KandyModel, states: np.ndarray) -> np.ndarray:
    """f_theta(Phi(x)) reshaped to the state layout (S, d) or (S, N)."""
    out = m.forward_batch(m.lift.lift_batch(states))
    return out[..., 0] if m.lift.is_field else out[..., 0, :]
