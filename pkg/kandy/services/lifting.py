"""
Lifting map from raw states (or periodic 1-D fields) to the lifted feature
vector the model acts on. Column i of every lifted array is terms[i].
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from kandy.utils.term_grammar import DERIVATIVE_ORDERS, Monomial, canonical_label, parse_term

SUPPORTED_ORDERS = DERIVATIVE_ORDERS
SCHEMES = ("spectral", "central_fd")


class TermKind(str, Enum):
    MONOMIAL = "monomial"
    POLYNOMIAL = "polynomial"
    SPATIAL_DERIVATIVE = "spatial_derivative"
    PRODUCT_OF = "product_of"
    CUSTOM_TRIG = "custom_trig"


@dataclass(frozen=True)
class FeatureTerm:
    label: str
    kind: TermKind
    monomials: Tuple[Monomial, ...]

    @property
    def derivative_orders(self):
        return sorted({f.symbol.order for m in self.monomials for f in m.factors if f.symbol.kind == "deriv"})


def classify(monomials: Sequence[Monomial]) -> TermKind:
    symbols = [f.symbol for m in monomials for f in m.factors]
    if any(s.kind == "trig" for s in symbols):
        return TermKind.CUSTOM_TRIG
    if any(s.kind == "deriv" and s.order > 0 for s in symbols):
        single = len(monomials) == 1 and len(monomials[0].factors) == 1
        if single and monomials[0].coef == 1.0 and monomials[0].factors[0].power == 1:
            return TermKind.SPATIAL_DERIVATIVE
        return TermKind.PRODUCT_OF
    return TermKind.MONOMIAL if len(monomials) == 1 else TermKind.POLYNOMIAL


def make_term(text: str, variables: Sequence[str], is_field: bool = False) -> FeatureTerm:
    monomials = tuple(parse_term(text, variables, is_field))
    return FeatureTerm(canonical_label(text), classify(monomials), monomials)


# --- spatial derivatives ------------------------------------------------------

def _check_order(order: int):
    if order not in SUPPORTED_ORDERS:
        raise ValueError(f"Derivative order {order} not in {SUPPORTED_ORDERS}")


def spatial_derivatives(u: np.ndarray, dx: float, order: int, scheme: str = "spectral") -> np.ndarray:
    """
    d^order u / dx^order along the last axis of a periodic field.

    spectral multiplies rfft modes by (i*kappa)^order; the Nyquist mode is
    dropped for odd orders on even grids. Any N works (numpy's FFT is not
    restricted to powers of two), though powers of two are fastest.
    central_fd uses second-order stencils with periodic wrap.
    """
    _check_order(order)
    if dx <= 0:
        raise ValueError(f"dx must be positive, got {dx}")
    u = np.asarray(u, dtype=float)
    if scheme == "spectral":
        n = u.shape[-1]
        kappa = 2.0 * np.pi * np.fft.rfftfreq(n, d=dx)
        mult = (1j * kappa) ** order
        if order % 2 == 1 and n % 2 == 0:
            mult[-1] = 0.0
        return np.fft.irfft(mult * np.fft.rfft(u, axis=-1), n=n, axis=-1)
    if scheme == "central_fd":
        def shift(k):
            return np.roll(u, -k, axis=-1)
        if order == 1:
            return (shift(1) - shift(-1)) / (2.0 * dx)
        if order == 2:
            return (shift(1) - 2.0 * u + shift(-1)) / dx ** 2
        return (shift(2) - 4.0 * shift(1) + 6.0 * u - 4.0 * shift(-1) + shift(-2)) / dx ** 4
    raise ValueError(f"Unknown derivative scheme '{scheme}'")


def derivative_adjoint(g: np.ndarray, dx: float, order: int, scheme: str = "spectral") -> np.ndarray:
    """Transpose of spatial_derivatives; both periodic operators satisfy D^T = (-1)^order D."""
    d = spatial_derivatives(g, dx, order, scheme)
    return -d if order % 2 else d


# --- lift map -----------------------------------------------------------------

@dataclass(frozen=True)
class LiftMap:
    terms: Tuple[FeatureTerm, ...]
    variables: Tuple[str, ...]
    is_field: bool = False
    dx: float = 0.0
    scheme: str = "spectral"
    theta_a: float = 0.4
    theta_b: float = 6.0

    def __post_init__(self):
        labels = [t.label for t in self.terms]
        if len(set(labels)) != len(labels):
            raise ValueError(f"Duplicate lift term labels: {labels}")
        if not self.terms:
            raise ValueError("Lift map needs at least one term")
        if self.is_field:
            if self.dx <= 0:
                raise ValueError(f"Field lift needs dx > 0, got {self.dx}")
            if self.scheme not in SCHEMES:
                raise ValueError(f"Unknown derivative scheme '{self.scheme}'")
            if len(self.variables) != 1:
                raise ValueError("Field lift takes exactly one field variable")

    @property
    def labels(self):
        return [t.label for t in self.terms]

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def state_dim(self) -> int:
        return 1 if self.is_field else len(self.variables)

    # factor values --------------------------------------------------------

    def _theta(self, x: np.ndarray) -> np.ndarray:
        r2 = np.sum(x * x, axis=-1)
        return self.theta_a - self.theta_b / (1.0 + r2)

    def _state_values(self, x: np.ndarray) -> Dict:
        vals = {}
        for i, name in enumerate(self.variables):
            vals[("var", name, 0)] = x[..., i]
        if any(f.symbol.kind == "trig" for t in self.terms for m in t.monomials for f in m.factors):
            theta = self._theta(x)
            vals[("trig", "cos", 0)] = np.cos(theta)
            vals[("trig", "sin", 0)] = np.sin(theta)
        return vals

    def _field_values(self, u: np.ndarray) -> Dict:
        name = self.variables[0]
        vals = {("deriv", name, 0): u}
        orders = {o for t in self.terms for o in t.derivative_orders if o > 0}
        for order in sorted(orders):
            vals[("deriv", name, order)] = spatial_derivatives(u, self.dx, order, self.scheme)
        return vals

    @staticmethod
    def _key(symbol):
        return (symbol.kind, symbol.name, symbol.order)

    def _evaluate(self, vals: Dict, shape) -> np.ndarray:
        cols = []
        for term in self.terms:
            col = np.zeros(shape)
            for mono in term.monomials:
                prod = np.full(shape, mono.coef)
                for f in mono.factors:
                    prod = prod * vals[self._key(f.symbol)] ** f.power
                col = col + prod
            cols.append(col)
        return np.stack(cols, axis=-1)

    def _partials(self, vals: Dict, shape):
        """Yield (term index, factor key, d term / d factor value)."""
        for i, term in enumerate(self.terms):
            for mono in term.monomials:
                for k, f in enumerate(mono.factors):
                    part = np.full(shape, mono.coef * f.power)
                    part = part * vals[self._key(f.symbol)] ** (f.power - 1)
                    for kk, other in enumerate(mono.factors):
                        if kk != k:
                            part = part * vals[self._key(other.symbol)] ** other.power
                    yield i, self._key(f.symbol), part

    # public API -----------------------------------------------------------

    def lift_state(self, x) -> np.ndarray:
        if self.is_field:
            raise ValueError("lift_state is for ODE/map lifts; use lift_field")
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ValueError(f"State has shape {x.shape}, expected ({self.state_dim},)")
        return self._evaluate(self._state_values(x), ())

    def lift_field(self, u) -> np.ndarray:
        if not self.is_field:
            raise ValueError("lift_field needs a field lift")
        u = np.asarray(u, dtype=float)
        if u.ndim != 1:
            raise ValueError("lift_field takes one field snapshot")
        return self._evaluate(self._field_values(u), u.shape)

    def lift_batch(self, states: np.ndarray) -> np.ndarray:
        """(S, d) states -> (S, 1, n_in); (S, N) fields -> (S, N, n_in)."""
        states = np.asarray(states, dtype=float)
        if self.is_field:
            return self._evaluate(self._field_values(states), states.shape)
        if states.shape[-1] != self.state_dim:
            raise ValueError(f"States have width {states.shape[-1]}, expected {self.state_dim}")
        return self._evaluate(self._state_values(states), states.shape[:-1])[..., None, :]

    def state_jacobian(self, states: np.ndarray) -> np.ndarray:
        """dTheta/dx for ODE/map lifts: (S, d) -> (S, n_in, d)."""
        states = np.asarray(states, dtype=float)
        shape = states.shape[:-1]
        vals = self._state_values(states)
        jac = np.zeros(shape + (self.n_terms, self.state_dim))
        dtheta = None
        for i, key, part in self._partials(vals, shape):
            kind, name, _ = key
            if kind == "var":
                jac[..., i, self.variables.index(name)] += part
                continue
            if dtheta is None:
                r2 = np.sum(states * states, axis=-1)
                dtheta = (2.0 * self.theta_b / (1.0 + r2) ** 2)[..., None] * states
            dval = -vals[("trig", "sin", 0)] if name == "cos" else vals[("trig", "cos", 0)]
            jac[..., i, :] += (part * dval)[..., None] * dtheta
        return jac

    def lift_vjp(self, states: np.ndarray, g_theta: np.ndarray) -> np.ndarray:
        """
        Pull a gradient on lift_batch(states) back to the states.
        g_theta has the lift_batch shape; the result has the states shape.
        """
        states = np.asarray(states, dtype=float)
        if not self.is_field:
            jac = self.state_jacobian(states)
            return np.einsum("...i,...id->...d", g_theta[..., 0, :], jac)
        vals = self._field_values(states)
        weights: Dict[int, np.ndarray] = {}
        for i, key, part in self._partials(vals, states.shape):
            order = key[2]
            weights[order] = weights.get(order, 0.0) + g_theta[..., i] * part
        out = np.zeros_like(states)
        for order in sorted(weights):
            w = weights[order]
            out = out + (w if order == 0 else derivative_adjoint(w, self.dx, order, self.scheme))
        return out


def build_lift(terms: Sequence[str], variables: Sequence[str], is_field: bool = False, dx: float = 0.0,
               scheme: str = "spectral", theta: Optional[Dict[str, float]] = None) -> LiftMap:
    theta = theta or {}
    parsed = tuple(make_term(t, variables, is_field) for t in terms)
    return LiftMap(parsed, tuple(variables), is_field, float(dx), scheme,
                   float(theta.get("a", 0.4)), float(theta.get("b", 6.0)))


def identity_lift(variables: Sequence[str]) -> LiftMap:
    return build_lift(list(variables), variables)


def lift_state(L: LiftMap, x) -> np.ndarray:
    return L.lift_state(x)


def lift_field(L: LiftMap, u) -> np.ndarray:
    return L.lift_field(u)
