"""
Symbolic extraction: fit closed-form candidates y = a*f(b*x + c) + d to every
trained edge, score them by R^2 minus a complexity penalty, keep the best
edges and zero the rest.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from kandy.config import settings
from kandy.models.series import Dataset
from kandy.services.audit_logger import audit_log
from kandy.services.kandy_model import KandyModel, prune_edge, set_edge_symbolic

MIN_PAIRS = 8


def _sech2(u):
    return 1.0 / np.cosh(np.clip(u, -350.0, 350.0)) ** 2


def _exp(u):
    return np.exp(np.clip(u, -50.0, 50.0))


@dataclass(frozen=True)
class Family:
    name: str
    complexity: int
    kind: str                      # zero | constant | poly | trans
    fn: Optional[Callable] = None
    dfn: Optional[Callable] = None
    power: int = 0


FAMILIES: Dict[str, Family] = {f.name: f for f in [
    Family("zero", 0, "zero"),
    Family("constant", 0, "constant"),
    Family("x", 1, "poly", lambda u: u, lambda u: np.ones_like(u), 1),
    Family("x^2", 2, "poly", lambda u: u ** 2, lambda u: 2.0 * u, 2),
    Family("x^3", 3, "poly", lambda u: u ** 3, lambda u: 3.0 * u ** 2, 3),
    Family("sin", 3, "trans", np.sin, np.cos),
    Family("cos", 3, "trans", np.cos, lambda u: -np.sin(u)),
    Family("tanh", 3, "trans", np.tanh, lambda u: 1.0 - np.tanh(u) ** 2),
    Family("sech^2", 3, "trans", _sech2, lambda u: -2.0 * np.tanh(u) * _sech2(u)),
    Family("exp", 3, "trans", _exp, _exp),
    Family("1/x", 3, "trans", lambda u: 1.0 / u, lambda u: -1.0 / u ** 2),
]}
DEFAULT_LIBRARY = tuple(FAMILIES)


@dataclass(frozen=True)
class SymbolicTerm:
    """Fitted candidate a*f(b*x + c) + d; polynomials keep b = 1, c = 0."""
    family: str
    alpha: float = 0.0
    beta: float = 1.0
    gamma: float = 0.0
    delta: float = 0.0

    @property
    def complexity(self) -> int:
        return FAMILIES[self.family].complexity

    def shape(self, x) -> np.ndarray:
        """a*f(b*x + c) without the offset."""
        fam = FAMILIES[self.family]
        x = np.asarray(x, dtype=float)
        if fam.kind in ("zero", "constant"):
            return np.zeros_like(x)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return self.alpha * fam.fn(self.beta * x + self.gamma)

    def evaluate(self, x) -> np.ndarray:
        if self.family == "zero":
            return np.zeros_like(np.asarray(x, dtype=float))
        return self.shape(x) + self.delta

    def derivative(self, x) -> np.ndarray:
        fam = FAMILIES[self.family]
        x = np.asarray(x, dtype=float)
        if fam.kind in ("zero", "constant"):
            return np.zeros_like(x)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return self.alpha * self.beta * fam.dfn(self.beta * x + self.gamma)

    def coefficients(self) -> Dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "delta": self.delta}

    def render(self, label: str) -> str:
        """Body of the term without the offset, e.g. '-1.4*x^2' or '0.5*sin(2*x + 1)'."""
        fam = FAMILIES[self.family]
        if fam.kind in ("zero", "constant"):
            return ""
        simple = label.replace("_", "").isalnum()
        if fam.kind == "poly":
            base = label if simple or (fam.power == 1 and not _has_sum(label)) else f"({label})"
            body = base if fam.power == 1 else f"{base}^{fam.power}"
            return f"{_num(self.alpha)}*{body}"
        arg = f"{_num(self.beta)}*{label if not _has_sum(label) else '(' + label + ')'}"
        if self.gamma:
            arg += f" {'-' if self.gamma < 0 else '+'} {_num(abs(self.gamma))}"
        if self.family == "1/x":
            return f"{_num(self.alpha)}/({arg})"
        return f"{_num(self.alpha)}*{self.family}({arg})"


def _has_sum(label: str) -> bool:
    return "+" in label or "-" in label[1:]


def _num(v: float) -> str:
    return f"{v:.6g}"


@dataclass
class EdgeFit:
    edge: Tuple[int, int]
    candidate: SymbolicTerm
    r2: float
    score: float

    @property
    def complexity(self) -> int:
        return self.candidate.complexity


@dataclass
class SymbolicSettings:
    """
    Knobs for extract_equations. The complexity weight defaults to
    w = 0.01 rather than 1: with w = 1 and w_s = 0.8 each complexity unit
    costs 4, more than the whole R^2 range, so every edge would score best
    as a constant. score() itself applies whatever w is given.
    """
    tau: float = 0.0
    w: float = 0.01
    w_s: float = 0.8
    top_t: Optional[int] = None
    c_max: Optional[int] = None
    r2_floor: float = 1e-2
    center_constants: bool = False
    starts: int = 8
    max_fit_samples: int = 2000
    seed: int = 0
    library: Sequence[str] = DEFAULT_LIBRARY

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        unknown = set(self.library) - set(FAMILIES)
        if unknown:
            raise ValueError(f"Unknown symbolic families: {sorted(unknown)}")
        score(1.0, 0, self.w, self.w_s)


# --- scoring ------------------------------------------------------------------

def score(r2: float, complexity: int, w: float, w_s: float) -> float:
    """S = R^2 - w * (w_s / (1 - w_s)) * c."""
    if not 0.0 < w_s < 1.0:
        raise ValueError(f"w_s must lie in (0, 1), got {w_s}")
    if w <= 0:
        raise ValueError(f"w must be positive, got {w}")
    return r2 - w * (w_s / (1.0 - w_s)) * complexity


def r_squared(y: np.ndarray, y_hat: np.ndarray, floor_ss: float = 0.0) -> float:
    resid = y - y_hat
    ss_res = float(np.dot(resid, resid))
    if not np.isfinite(ss_res):
        return float("-inf")
    centered = y - y.mean()
    ss_tot = max(float(np.dot(centered, centered)), floor_ss, 1e-300)
    return min(1.0, 1.0 - ss_res / ss_tot)


# --- fitting ------------------------------------------------------------------

def _fit_poly(x, y, power):
    design = np.column_stack([x ** power, np.ones_like(x)])
    (alpha, delta), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(alpha), 1.0, 0.0, float(delta)


def _linear_outer(f_u, y):
    design = np.column_stack([f_u, np.ones_like(f_u)])
    (alpha, delta), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(alpha), float(delta)


def _fit_transcendental(x, y, fam: Family, rng: np.random.Generator, starts: int):
    x_center = float(np.mean(x))
    x_scale = float(np.std(x)) or 1.0

    def residual(p):
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            r = p[0] * fam.fn(p[1] * x + p[2]) + p[3] - y
        return np.nan_to_num(r, nan=1e10, posinf=1e10, neginf=-1e10)

    def jacobian(p):
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            u = p[1] * x + p[2]
            fu, du = fam.fn(u), fam.dfn(u)
            jac = np.column_stack([fu, p[0] * du * x, p[0] * du, np.ones_like(x)])
        return np.nan_to_num(jac, nan=0.0, posinf=1e10, neginf=-1e10)

    best, best_cost = None, np.inf
    for _ in range(starts):
        beta = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0) / x_scale
        gamma = -beta * x_center + rng.uniform(-1.0, 1.0)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            f_u = fam.fn(beta * x + gamma)
        if not np.all(np.isfinite(f_u)):
            continue
        alpha, delta = _linear_outer(f_u, y)
        try:
            sol = least_squares(residual, np.array([alpha, beta, gamma, delta]), jac=jacobian,
                                method="lm", max_nfev=400)
        except (ValueError, np.linalg.LinAlgError):
            continue
        cost = float(np.sum(residual(sol.x) ** 2))
        if np.all(np.isfinite(sol.x)) and cost < best_cost:
            best, best_cost = sol.x, cost
    if best is None:
        return None
    return tuple(float(v) for v in best)


def fit_edge(x: np.ndarray, y: np.ndarray, library: Sequence[str] = DEFAULT_LIBRARY, w: float = 0.01,
             w_s: float = 0.8, edge: Tuple[int, int] = (0, 0), output_scale: Optional[float] = None,
             r2_floor: float = 1e-2, starts: int = 8, seed: int = 0, max_fit_samples: int = 2000) -> EdgeFit:
    """
    Best-scoring candidate for one edge's (input, activation) pairs. R^2 is
    taken on all pairs; nonlinear fits may run on an evenly strided subset.
    Ties prefer lower complexity, then library order.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    span = float(np.ptp(x)) if x.size else 0.0
    if x.size < MIN_PAIRS or span <= 1e-12 * max(1.0, float(np.max(np.abs(x)))):
        return EdgeFit(edge, SymbolicTerm("zero"), 0.0, score(0.0, 0, w, w_s))
    scale = float(np.std(y)) if output_scale is None else float(output_scale)
    floor_ss = x.size * (r2_floor * scale) ** 2
    stride = max(1, x.size // max_fit_samples)
    xs, ys = x[::stride], y[::stride]
    rng = np.random.default_rng([seed, edge[0], edge[1]])

    best: Optional[EdgeFit] = None
    for order, name in enumerate(library):
        fam = FAMILIES[name]
        if fam.kind == "zero":
            term = SymbolicTerm("zero")
        elif fam.kind == "constant":
            term = SymbolicTerm("constant", delta=float(np.mean(y)))
        elif fam.kind == "poly":
            term = SymbolicTerm(name, *_fit_poly(x, y, fam.power))
        else:
            params = _fit_transcendental(xs, ys, fam, rng, starts)
            if params is None:
                continue
            term = SymbolicTerm(name, *params)
        r2 = r_squared(y, term.evaluate(x), floor_ss)
        if not np.isfinite(r2):
            continue
        fit = EdgeFit(edge, term, r2, score(r2, fam.complexity, w, w_s))
        if best is None or fit.score > best.score or (fit.score == best.score and fit.complexity < best.complexity):
            best = fit
    return best


# --- selection ----------------------------------------------------------------

def select_edges(fits: Sequence[EdgeFit], tau: float, top_t: Optional[int] = None,
                 c_max: Optional[int] = None) -> List[Tuple[int, int]]:
    """
    Greedy keep by score (ties: complexity, then edge index) among fits with
    R^2 >= tau, up to top_t non-constant edges and total complexity c_max.
    Constant fits carry no complexity and do not count toward top_t.
    """
    eligible = [f for f in fits if f.r2 >= tau and f.candidate.family != "zero"]
    eligible.sort(key=lambda f: (-f.score, f.complexity, f.edge))
    kept, count, budget = [], 0, 0
    for f in eligible:
        if f.candidate.family == "constant":
            kept.append(f.edge)
            continue
        if top_t is not None and count >= top_t:
            continue
        if c_max is not None and budget + f.complexity > c_max:
            continue
        kept.append(f.edge)
        count += 1
        budget += f.complexity
    return kept


# --- extraction ---------------------------------------------------------------

def collect_activations(m: KandyModel, D: Dataset) -> Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]]:
    if len(D) == 0:
        raise ValueError("Empty dataset")
    theta = m.lift.lift_batch(D.states).reshape(-1, m.n_in)
    pairs = {}
    for i in range(m.n_in):
        for j in range(m.n_out):
            if m.mask[i, j]:
                pairs[(i, j)] = (theta[:, i], m.edge_output(i, j, theta[:, i]))
    return pairs


@dataclass
class EquationTerm:
    label: str
    edge: Tuple[int, int]
    term: SymbolicTerm
    r2: float
    score: float


@dataclass
class OutputEquation:
    name: str
    constant: float
    terms: List[EquationTerm] = field(default_factory=list)

    def render(self) -> str:
        parts = []
        if self.constant or not self.terms:
            parts.append(_num(self.constant))
        for t in self.terms:
            body = t.term.render(t.label)
            if parts:
                body = f"- {body[1:]}" if body.startswith("-") else f"+ {body}"
            parts.append(body)
        return f"{self.name} = {' '.join(parts)}"


@dataclass
class DiscoveredEquation:
    outputs: List[OutputEquation]
    labels: List[str]

    def render(self) -> str:
        return "\n".join(o.render() for o in self.outputs) + "\n"

    def coefficient(self, output: str, label: str, family: Optional[str] = None) -> float:
        """alpha of the kept term on `label` for `output`; 0 when absent."""
        for o in self.outputs:
            if o.name != output:
                continue
            for t in o.terms:
                if t.label == label and (family is None or t.term.family == family):
                    return t.term.alpha
        return 0.0

    def term_labels(self, output: str) -> List[str]:
        return [t.label for o in self.outputs if o.name == output for t in o.terms]

    def to_record(self) -> dict:
        return {
            o.name: {
                "constant": o.constant,
                "terms": [{"term": t.label, "family": t.term.family, "coefficients": t.term.coefficients(),
                           "R2": t.r2, "score": t.score, "complexity": t.term.complexity,
                           "edge": list(t.edge)} for t in o.terms],
            }
            for o in self.outputs
        }


def fit_all_edges(pairs, output_scales: np.ndarray, cfg: SymbolicSettings) -> List[EdgeFit]:
    edges = sorted(pairs)

    def work(edge):
        x, y = pairs[edge]
        return fit_edge(x, y, cfg.library, cfg.w, cfg.w_s, edge, output_scales[edge[1]], cfg.r2_floor,
                        cfg.starts, cfg.seed, cfg.max_fit_samples)

    with ThreadPoolExecutor(max_workers=settings.THREADS) as pool:
        return list(pool.map(work, edges))


def extract_equations(m: KandyModel, D: Dataset, cfg: SymbolicSettings) -> Tuple[DiscoveredEquation, KandyModel]:
    """
    collect -> fit -> select -> substitute. Kept edges become closed-form
    terms; their offsets fold into one constant per output chosen so the
    substituted output keeps the trained model's mean over D (zero when
    center_constants is set). Outputs with no kept edge are pruned to zero.
    Fits run on raw lifted features, so coefficients are in raw units.
    """
    pairs = collect_activations(m, D)
    theta = m.lift.lift_batch(D.states).reshape(-1, m.n_in)
    full = m.forward_batch(theta)
    out_means, out_scales = full.mean(axis=0), full.std(axis=0)
    fits = fit_all_edges(pairs, out_scales, cfg)
    kept = set(select_edges(fits, cfg.tau, cfg.top_t, cfg.c_max))
    audit_log.log(f"Symbolic fits done: {len(fits)} edges, {len(kept)} kept", "INFO",
                  {"fitted": len(fits), "kept": len(kept)})

    by_edge = {f.edge: f for f in fits}
    labels = m.lift.labels
    substituted = m.copy()
    outputs = []
    for j in range(m.n_out):
        terms, shape_mean = [], 0.0
        any_kept = False
        for i in range(m.n_in):
            edge = (i, j)
            if edge not in pairs:
                continue
            if edge not in kept:
                substituted = prune_edge(substituted, i, j)
                continue
            any_kept = True
            fit = by_edge[edge]
            if fit.candidate.family == "constant":
                substituted = prune_edge(substituted, i, j)
                continue
            term = replace(fit.candidate, delta=0.0)
            shape_mean += float(np.mean(term.shape(theta[:, i])))
            substituted = set_edge_symbolic(substituted, i, j, term)
            terms.append(EquationTerm(labels[i], edge, term, fit.r2, fit.score))
        constant = 0.0
        if any_kept and not cfg.center_constants:
            constant = float(out_means[j] - shape_mean)
        outputs.append(OutputEquation(m.output_names[j], constant, terms))
        substituted.offset[j] = constant
    return DiscoveredEquation(outputs, labels), substituted
