"""
Chaos-aware evaluation: Lyapunov exponent and time, cumulative NRMSE
horizon curves, autoregressive rollouts, PDE error fields, Hopf fiber
metrics, correlation dimension and amplitude coherence.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.stats import ks_2samp, linregress

from kandy.errors import DivergenceError
from kandy.models.series import Dataset, FieldTrajectory, Trajectory
from kandy.services.audit_logger import audit_log
from kandy.services.integrators import STEPPERS, StepScheme
from kandy.services.kandy_model import KandyModel, model_vector_field

ENVELOPE_FACTOR = 10.0
COHERENCE_KS_MAX = 0.1


# --- Lyapunov -----------------------------------------------------------------

def largest_lyapunov(f: Callable[[np.ndarray], np.ndarray], x0, n_intervals: int, kind: str = "ode",
                     dt: float = 0.01, interval: float = 1.0, transient: int = 100, d0: float = 1e-8,
                     expect_chaos: bool = False) -> float:
    """
    Two-trajectory estimate: evolve a companion offset by d0, renormalize it
    back to d0 after every interval and average the log growth. For maps an
    interval is round(interval) iterations. f must accept stacked states (2, d).
    """
    x = np.asarray(x0, dtype=float)
    if kind == "map":
        steps, elapsed = max(1, int(round(interval))), max(1, int(round(interval)))
        advance = f
    else:
        steps, elapsed = max(1, int(round(interval / dt))), interval
        step = STEPPERS["rk4"]

        def advance(s):
            return step(f, s, dt)

    pair = np.stack([x, x + d0 * np.ones_like(x) / np.sqrt(x.size)])
    for _ in range(transient):
        for _ in range(steps):
            pair = advance(pair)
        gap = pair[1] - pair[0]
        pair[1] = pair[0] + gap * (d0 / np.linalg.norm(gap))
    total = 0.0
    for _ in range(n_intervals):
        for _ in range(steps):
            pair = advance(pair)
        gap = pair[1] - pair[0]
        dist = float(np.linalg.norm(gap))
        if not np.isfinite(dist) or dist == 0.0:
            raise DivergenceError("Lyapunov companion separation became degenerate")
        total += np.log(dist / d0)
        pair[1] = pair[0] + gap * (d0 / dist)
    lam = total / (n_intervals * elapsed)
    if expect_chaos and lam <= 0:
        raise ValueError(f"Non-positive Lyapunov estimate {lam:.4g} for a system expected to be chaotic")
    return float(lam)


def lyapunov_time(lam: float) -> float:
    return 1.0 / lam if lam > 0 else float("inf")


# --- rollouts -----------------------------------------------------------------

def _as_array(data) -> np.ndarray:
    if isinstance(data, Trajectory):
        return data.states
    if isinstance(data, FieldTrajectory):
        return data.fields
    return np.asarray(data, dtype=float)


def rollout_vector_field(f: Callable[[np.ndarray], np.ndarray], x0, n_steps: int,
                         scheme: Optional[StepScheme], envelope: Optional[float] = None, substeps: int = 1):
    """
    Iterate x_{n+1} = step(f, x_n) (scheme None: x_{n+1} = f(x_n)), taking
    `substeps` steps of scheme.dt per recorded state.
    Stops early once |x| exceeds ENVELOPE_FACTOR * envelope or turns
    non-finite; returns (states, diverged).
    """
    x = np.asarray(x0, dtype=float)
    out = [x]
    limit = ENVELOPE_FACTOR * envelope if envelope else np.inf
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            try:
                for _ in range(substeps):
                    x = f(x) if scheme is None else STEPPERS[scheme.kind](f, x, scheme.dt)
            except DivergenceError:
                diverged = True
                break
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > limit:
                diverged = True
                break
            out.append(x)
    if diverged:
        audit_log.log(f"Rollout diverged after {len(out) - 1} of {n_steps} steps", "WARN")
    return np.stack(out), diverged


def rollout(m: KandyModel, x0, n_steps: int, scheme: Optional[StepScheme], envelope: Optional[float] = None,
            variables: Optional[Sequence[str]] = None, dx: float = 0.0,
            substeps: int = 1) -> Union[Trajectory, FieldTrajectory]:
    """
    Autoregressive rollout of f(Phi(x)); scheme None iterates the model as a
    map. Recorded states are spaced substeps * scheme.dt apart.
    """
    if scheme is not None and scheme.field_only:
        raise ValueError("Model rollouts use euler or rk4 steps")
    states, diverged = rollout_vector_field(lambda s: model_vector_field(m, s[None])[0], x0, n_steps, scheme,
                                            envelope, substeps)
    dt = scheme.dt * substeps if scheme is not None else 1.0
    times = dt * np.arange(len(states))
    if m.lift.is_field:
        return FieldTrajectory(times, states, dx or m.lift.dx, dt, diverged=diverged)
    names = list(variables) if variables else list(m.lift.variables)
    return Trajectory(times, states, dt, names, "ode" if scheme is not None else "map", diverged=diverged)


# --- error measures -----------------------------------------------------------

def nrmse_curve(pred, truth, dt: Optional[float] = None) -> pd.DataFrame:
    """
    Cumulative normalized RMSE: at step n,
        sqrt(mean_{k<=n} |pred_k - truth_k|^2 / N) / sigma
    with N the state dimension and sigma the RMS amplitude of truth.
    Compared over the common prefix when pred stopped early.
    """
    p, t = _as_array(pred), _as_array(truth)
    n = min(len(p), len(t))
    p, t = p[:n].reshape(n, -1), t[:n].reshape(n, -1)
    sigma = float(np.sqrt(np.mean(t * t)))
    if sigma == 0.0:
        raise ValueError("Truth has zero RMS amplitude")
    err2 = np.sum((p - t) ** 2, axis=1)
    cum = np.cumsum(err2) / np.arange(1, n + 1)
    values = np.sqrt(cum / t.shape[1]) / sigma
    if dt is None:
        dt = getattr(truth, "dt", 1.0)
    return pd.DataFrame({"t": dt * np.arange(n), "nrmse": values})


def crossing_time(curve: pd.DataFrame, level: float) -> float:
    """First time the NRMSE curve exceeds level; inf if it never does."""
    above = curve.index[curve["nrmse"] > level]
    return float(curve.loc[above[0], "t"]) if len(above) else float("inf")


def error_field(pred, truth):
    """Pointwise pred - truth and its RMS per time slice."""
    p, t = _as_array(pred), _as_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"Field shapes differ: {p.shape} vs {t.shape}")
    diff = p - t
    return diff, np.sqrt(np.mean(diff * diff, axis=1))


# --- Hopf ---------------------------------------------------------------------

@dataclass
class FiberMetrics:
    mean_angular_error: float
    p95_radial_error: float
    mean_fiber_rms: float
    max_fiber_error: float


def fiber_metrics(predict: Union[KandyModel, Callable[[np.ndarray], np.ndarray]], dataset: Dataset) -> FiberMetrics:
    """
    Angular error of predicted S^2 directions, radial deviation from the unit
    sphere, and the spread of predictions along each S^1 fiber.
    """
    fn = (lambda s: model_vector_field(predict, s)) if isinstance(predict, KandyModel) else predict
    pred = np.asarray(fn(dataset.states), dtype=float)
    truth = dataset.targets
    cross = np.linalg.norm(np.cross(pred, truth), axis=1)
    dot = np.sum(pred * truth, axis=1)
    angles = np.arctan2(cross, dot)
    radial = np.abs(np.linalg.norm(pred, axis=1) - 1.0)
    groups = dataset.groups if dataset.groups is not None else -np.ones(len(pred), dtype=int)
    rms, worst = [], 0.0
    for g in np.unique(groups[groups >= 0]):
        block = pred[groups == g]
        spread = np.linalg.norm(block - block.mean(axis=0), axis=1)
        rms.append(float(np.sqrt(np.mean(spread ** 2))))
        worst = max(worst, float(spread.max()))
    return FiberMetrics(
        mean_angular_error=float(np.mean(angles)),
        p95_radial_error=float(np.percentile(radial, 95)),
        mean_fiber_rms=float(np.mean(rms)) if rms else 0.0,
        max_fiber_error=worst,
    )


# --- geometry -----------------------------------------------------------------

def correlation_dimension(points, r_values: Sequence[float], min_samples: int = 5000,
                          max_points: Optional[int] = None) -> float:
    """
    Slope of log C(r) against log r, C(r) being the fraction of distinct
    pairs closer than r. Radii with no pairs are dropped.
    """
    pts = _as_array(points)
    pts = pts.reshape(len(pts), -1)
    if len(pts) < min_samples:
        raise ValueError(f"Correlation dimension needs at least {min_samples} samples, got {len(pts)}")
    if max_points and len(pts) > max_points:
        pts = pts[:: int(np.ceil(len(pts) / max_points))]
    n = len(pts)
    radii = np.sort(np.asarray(r_values, dtype=float))
    tree = cKDTree(pts)
    counts = np.asarray(tree.count_neighbors(tree, radii), dtype=float)
    frac = (counts - n) / (n * (n - 1))
    ok = frac > 0
    if ok.sum() < 3:
        raise ValueError("Fewer than 3 radii fall inside the scaling range")
    return float(linregress(np.log(radii[ok]), np.log(frac[ok])).slope)


# --- coherence ----------------------------------------------------------------

@dataclass
class CoherenceReport:
    ks_statistics: Dict[str, float] = field(default_factory=dict)
    inside_envelope: bool = True
    coherent: bool = True
    horizon: float = 0.0


def coherence(pred: Trajectory, truth: Trajectory, horizon: float, envelope_lo: np.ndarray,
              envelope_hi: np.ndarray, margin: float = 0.1) -> CoherenceReport:
    """
    Amplitude coherence over [0, horizon]: per-component KS statistic of the
    two sample distributions, plus a check that pred stays inside the truth
    envelope widened by margin * range.
    """
    steps = min(int(round(horizon / pred.dt)) + 1, len(pred), len(truth))
    p, t = pred.states[:steps], truth.states[:steps]
    stats = {name: float(ks_2samp(p[:, k], t[:, k]).statistic) for k, name in enumerate(pred.variables)}
    span = np.asarray(envelope_hi) - np.asarray(envelope_lo)
    inside = bool(np.all(p >= envelope_lo - margin * span) and np.all(p <= envelope_hi + margin * span))
    coherent = inside and not pred.diverged and all(v < COHERENCE_KS_MAX for v in stats.values())
    return CoherenceReport(stats, inside, coherent, float(horizon))
