"""
Training for KandyModel: derivative supervision plus an optional rollout
term obtained by unrolling a fixed-step integrator, with reverse-mode
gradients through the unrolled steps and through the lift at every stage.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from kandy.errors import DivergenceError
from kandy.models.series import Dataset, DatasetKind, FieldTrajectory, Trajectory
from kandy.services.audit_logger import audit_log
from kandy.services.kandy_model import KandyModel, ParamGrad
from kandy.services.spline_engine import RIDGE_FLOOR, gaussian_basis, ridge_lstsq

OPTIMIZERS = ("adam", "gd", "lbfgs", "lstsq")
DERIVATIVE_SCHEMES = ("provided", "forward_diff", "central_diff")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
LBFGS_PENALTY = 1e30


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    lambda_roll: float = 0.0
    rollout_horizon: int = 10
    rollout_integrator: str = "rk4"
    dt: float = 0.0                  # 0 -> dataset dt
    grid_update_every: int = 0       # 0 -> no grid updates
    grid_update_until: int = 0
    derivative_scheme: str = "provided"
    seed: int = 0
    batch: Union[int, str] = "full"
    optimizer: str = "adam"
    freeze_coeffs: bool = False
    ridge: float = RIDGE_FLOOR
    log_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_roll < 0:
            raise ValueError("lambda_roll must be non-negative")
        if self.lambda_roll > 0 and self.rollout_horizon < 1:
            raise ValueError("rollout_horizon must be >= 1 when lambda_roll > 0")
        if self.rollout_integrator not in ("rk4", "euler"):
            raise ValueError(f"Unknown rollout integrator '{self.rollout_integrator}'")
        if self.derivative_scheme not in DERIVATIVE_SCHEMES:
            raise ValueError(f"Unknown derivative scheme '{self.derivative_scheme}'")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"Unknown optimizer '{self.optimizer}'")
        if self.optimizer == "lstsq" and self.lambda_roll > 0:
            raise ValueError("lstsq optimizer solves the derivative loss only; set lambda_roll = 0")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class LossHistory:
    rows: List[dict] = field(default_factory=list)

    def record(self, epoch: int, train_deriv: float, test_deriv: float, rollout: float, total: float):
        self.rows.append({"epoch": epoch, "train_deriv": train_deriv, "test_deriv": test_deriv,
                          "rollout": rollout, "total": total})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["epoch", "train_deriv", "test_deriv", "rollout", "total"])

    def __len__(self):
        return len(self.rows)

    def first(self, key: str) -> float:
        return self.rows[0][key]

    def last(self, key: str) -> float:
        return self.rows[-1][key]


# --- derivative targets -------------------------------------------------------

def estimate_derivatives(values: np.ndarray, dt: float, scheme: str = "central_diff") -> np.ndarray:
    """
    Time derivative along axis 0 of a uniformly sampled sequence.
    forward_diff: (x[n+1]-x[n])/dt, backward difference at the last sample.
    central_diff: (x[n+1]-x[n-1])/(2dt); second-order one-sided at the ends.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(values, dtype=float)
    if len(x) < 2:
        raise ValueError("Derivative estimation needs at least 2 samples")
    out = np.empty_like(x)
    if scheme == "forward_diff":
        out[:-1] = (x[1:] - x[:-1]) / dt
        out[-1] = (x[-1] - x[-2]) / dt
        return out
    if scheme == "central_diff":
        if len(x) < 3:
            out[:] = (x[1] - x[0]) / dt
            return out
        out[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
        out[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt)
        out[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * dt)
        return out
    raise ValueError(f"Unknown finite-difference scheme '{scheme}'")


def build_dataset(data: Union[Trajectory, FieldTrajectory], kind: DatasetKind, scheme: str = "provided",
                  tendency: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> Dataset:
    """Pair states with supervision targets according to the dataset kind."""
    kind = DatasetKind(kind)
    if isinstance(data, FieldTrajectory):
        states, times = data.fields, data.times
    else:
        states, times = data.states, data.times
    if kind == DatasetKind.MAP:
        return Dataset(states[:-1], states[1:], kind, dt=1.0, times=times[:-1], sequence=states)
    if scheme == "provided":
        if tendency is None:
            raise ValueError("Provided derivatives need the system tendency")
        targets = tendency(states)
    else:
        targets = estimate_derivatives(states, data.dt, scheme)
    meta = {"dx": data.dx} if isinstance(data, FieldTrajectory) else {}
    return Dataset(states, targets, kind, dt=data.dt, times=times, sequence=states, meta=meta)


# --- loss machinery -----------------------------------------------------------

def _targets3(D: Dataset, targets: np.ndarray) -> np.ndarray:
    if D.kind == DatasetKind.PDE_FIELD:
        return targets[..., None]
    return targets[:, None, :]


def _add_grad(acc: Optional[ParamGrad], g: ParamGrad) -> ParamGrad:
    if acc is None:
        return ParamGrad(g.coeffs.copy(), g.slope.copy(), g.bias.copy())
    acc.coeffs += g.coeffs
    acc.slope += g.slope
    acc.bias += g.bias
    return acc


def _vector_field(m: KandyModel, y: np.ndarray):
    theta = m.lift.lift_batch(y)
    out = m.forward_batch(theta)
    value = out[..., 0] if m.lift.is_field else out[..., 0, :]
    return value, theta


def _vector_field_vjp(m: KandyModel, y: np.ndarray, theta: np.ndarray, g: np.ndarray):
    g_out = g[..., None] if m.lift.is_field else g[..., None, :]
    pg = m.param_gradient_batch(theta, g_out)
    jac = m.input_jacobian_batch(theta)
    g_theta = np.einsum("...j,...ji->...i", g_out, jac)
    return m.lift.lift_vjp(y, g_theta), pg


class RolloutStepper:
    """One integrator step of x' = f(Phi(x)) (or x_{n+1} = f(Phi(x_n)) for maps) with its VJP."""

    def __init__(self, m: KandyModel, kind: DatasetKind, integrator: str, dt: float):
        self.m = m
        self.is_map = kind == DatasetKind.MAP
        self.integrator = integrator
        self.dt = dt

    def forward(self, x: np.ndarray):
        m, dt = self.m, self.dt
        if self.is_map:
            k1, t1 = _vector_field(m, x)
            return k1, [(x, t1)]
        if self.integrator == "euler":
            k1, t1 = _vector_field(m, x)
            return x + dt * k1, [(x, t1)]
        k1, t1 = _vector_field(m, x)
        y2 = x + 0.5 * dt * k1
        k2, t2 = _vector_field(m, y2)
        y3 = x + 0.5 * dt * k2
        k3, t3 = _vector_field(m, y3)
        y4 = x + dt * k3
        k4, t4 = _vector_field(m, y4)
        x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return x_next, [(x, t1), (y2, t2), (y3, t3), (y4, t4)]

    def backward(self, cache, g: np.ndarray):
        """Given dL/dx_next, return (dL/dx, parameter gradient)."""
        m, dt = self.m, self.dt
        if self.is_map:
            (x, t1), = cache
            return _vector_field_vjp(m, x, t1, g)
        if self.integrator == "euler":
            (x, t1), = cache
            gx, pg = _vector_field_vjp(m, x, t1, dt * g)
            return g + gx, pg
        (x, t1), (y2, t2), (y3, t3), (y4, t4) = cache
        gx = g.copy()
        g4 = dt / 6.0 * g
        g3 = dt / 3.0 * g
        g2 = dt / 3.0 * g
        g1 = dt / 6.0 * g
        gy4, pg = _vector_field_vjp(m, y4, t4, g4)
        gx += gy4
        g3 = g3 + dt * gy4
        gy3, p3 = _vector_field_vjp(m, y3, t3, g3)
        gx += gy3
        g2 = g2 + 0.5 * dt * gy3
        gy2, p2 = _vector_field_vjp(m, y2, t2, g2)
        gx += gy2
        g1 = g1 + 0.5 * dt * gy2
        gy1, p1 = _vector_field_vjp(m, x, t1, g1)
        gx += gy1
        for extra in (p3, p2, p1):
            pg = _add_grad(pg, extra)
        return gx, pg


def rollout_windows(D: Dataset, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    """Windows of horizon+1 states cut at stride = horizon: (x0 (W, ...), truth (H, W, ...))."""
    seq = D.sequence if D.sequence is not None else D.states
    if horizon < 1 or horizon + 1 > len(seq):
        raise ValueError(f"Rollout horizon {horizon} exceeds trajectory length {len(seq)}")
    starts = np.arange(0, len(seq) - horizon, horizon)
    truth = np.stack([seq[starts + k] for k in range(1, horizon + 1)])
    return seq[starts], truth


class LossProblem:
    """
    Total loss L_deriv + lambda_roll * L_roll and its gradient, as a function
    of the model's flat trainable parameter vector.
    """

    def __init__(self, m: KandyModel, D: Dataset, cfg: TrainConfig, rows: Optional[np.ndarray] = None):
        if len(D) == 0:
            raise ValueError("Empty dataset")
        self.m = m
        self.D = D
        self.cfg = cfg
        states, targets = (D.states, D.targets) if rows is None else (D.states[rows], D.targets[rows])
        self.theta = m.lift.lift_batch(states)
        self.targets = _targets3(D, targets)
        if self.targets.shape[-1] != m.n_out:
            raise ValueError(f"Targets carry {self.targets.shape[-1]} outputs, model has {m.n_out}")
        self.use_rollout = cfg.lambda_roll > 0
        if self.use_rollout:
            if D.kind == DatasetKind.STATIC:
                raise ValueError("Rollout loss needs a time-ordered dataset")
            self.x0, self.truth = rollout_windows(D, cfg.rollout_horizon)
            dt = cfg.dt or D.dt
            self.stepper = RolloutStepper(m, D.kind, cfg.rollout_integrator, dt)

    def derivative(self, with_grad: bool = True):
        m = self.m
        pred = m.forward_batch(self.theta)
        resid = pred - self.targets
        n = resid.shape[0] * resid.shape[1]
        loss = float(np.sum(resid * resid) / n)
        if not with_grad:
            return loss, None
        return loss, m.param_gradient_batch(self.theta, 2.0 * resid / n)

    def rollout(self, with_grad: bool = True):
        horizon = self.cfg.rollout_horizon
        x = self.x0
        caches, errors = [], []
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(horizon):
                x, cache = self.stepper.forward(x)
                caches.append(cache)
                errors.append(x - self.truth[k])
        # squared norm over state components; fields average over grid points
        norm = len(self.x0) * horizon * (self.x0.shape[-1] if self.m.lift.is_field else 1)
        loss = float(sum(np.sum(e * e) for e in errors) / norm)
        if not with_grad or not np.isfinite(loss):
            return loss, None
        adj = np.zeros_like(self.x0)
        total = None
        for k in range(horizon - 1, -1, -1):
            adj = adj + 2.0 * errors[k] / norm
            adj, pg = self.stepper.backward(caches[k], adj)
            total = _add_grad(total, pg)
        return loss, total

    def evaluate(self, with_grad: bool = True):
        """(total, deriv, rollout, ParamGrad or None)."""
        deriv, g = self.derivative(with_grad)
        roll = 0.0
        if self.use_rollout:
            roll, g_roll = self.rollout(with_grad)
            if g is not None and g_roll is not None:
                lam = self.cfg.lambda_roll
                g = ParamGrad(g.coeffs + lam * g_roll.coeffs, g.slope + lam * g_roll.slope,
                              g.bias + lam * g_roll.bias)
            elif with_grad:
                g = None
        total = deriv + self.cfg.lambda_roll * roll
        return total, deriv, roll, g

    def objective(self, vec: np.ndarray):
        """Scalar loss and flat gradient at parameter vector vec."""
        freeze = self.cfg.freeze_coeffs
        self.m.set_params(vec, freeze)
        total, deriv, roll, g = self.evaluate(True)
        if g is None or not np.isfinite(total):
            return total, np.zeros_like(vec), deriv, roll
        return total, self.m.flatten_grad(g, freeze), deriv, roll


def derivative_loss(m: KandyModel, D: Dataset) -> float:
    return LossProblem(m, D, TrainConfig(lambda_roll=0.0)).derivative(with_grad=False)[0]


def rollout_loss(m: KandyModel, D: Dataset, cfg: TrainConfig) -> float:
    if cfg.rollout_horizon < 1:
        raise ValueError("rollout_horizon must be >= 1")
    roll_cfg = TrainConfig(**{**cfg.__dict__, "lambda_roll": max(cfg.lambda_roll, 1.0), "optimizer": "adam"})
    return LossProblem(m, D, roll_cfg).rollout(with_grad=False)[0]


def total_loss(m: KandyModel, D: Dataset, cfg: TrainConfig) -> float:
    return LossProblem(m, D, cfg).evaluate(with_grad=False)[0]


def total_loss_and_grad(m: KandyModel, D: Dataset, cfg: TrainConfig) -> Tuple[float, np.ndarray]:
    problem = LossProblem(m, D, cfg)
    total, grad, _, _ = problem.objective(m.get_params(cfg.freeze_coeffs))
    return total, grad


# --- training -----------------------------------------------------------------

def batch_rows(n: int, batch: Union[int, str], seed: int) -> Optional[np.ndarray]:
    """Fixed sample subset used for every epoch, or None for full batch."""
    if batch == "full" or batch is None or int(batch) >= n:
        return None
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=int(batch), replace=False))


def update_grids(m: KandyModel, theta: np.ndarray, epoch: int):
    """Refit every input's grid to the current lifted training samples."""
    z = m.normalize(theta.reshape(-1, m.n_in))
    for i in range(m.n_in):
        try:
            m.update_input_grid(i, z[:, i])
        except ValueError:
            audit_log.log(f"Grid update skipped for constant input '{m.lift.labels[i]}'", "DEBUG",
                          {"epoch": epoch, "input": i})
    audit_log.log(f"Grid update at epoch {epoch}", "INFO", {"epoch": epoch})


def grid_update_epochs(cfg: TrainConfig) -> List[int]:
    if cfg.grid_update_every <= 0:
        return []
    until = min(cfg.grid_update_until or cfg.epochs, cfg.epochs - 1)
    return list(range(cfg.grid_update_every, until + 1, cfg.grid_update_every))


class Trainer:
    """Owns the model during optimization; the optimizer step is exclusive."""

    def __init__(self, m: KandyModel, D: Dataset, cfg: TrainConfig, test: Optional[Dataset] = None):
        self.m = m
        self.D = D
        self.cfg = cfg
        self.test = test
        self.rows = batch_rows(len(D), cfg.batch, cfg.seed)
        self.problem = LossProblem(m, D, cfg, self.rows)
        self.test_problem = LossProblem(m, test, TrainConfig(lambda_roll=0.0)) if test is not None and len(test) else None
        self.history = LossHistory()
        self.last_finite = float("nan")

    def _test_loss(self) -> float:
        if self.test_problem is None:
            return float("nan")
        return self.test_problem.derivative(with_grad=False)[0]

    def _record(self, epoch: int, total: float, deriv: float, roll: float):
        if not np.isfinite(total):
            audit_log.log("Training diverged", "ERROR", {"epoch": epoch, "last_finite_loss": self.last_finite})
            raise DivergenceError(f"Loss became non-finite at epoch {epoch} (last finite loss {self.last_finite})",
                                  epoch=epoch, last_finite_loss=self.last_finite)
        self.last_finite = total
        self.history.record(epoch, deriv, self._test_loss(), roll, total)
        if self.cfg.log_every and epoch % self.cfg.log_every == 0:
            audit_log.log(f"Epoch {epoch}: total={total:.6g} deriv={deriv:.6g} rollout={roll:.6g}", "DEBUG")

    def _grid_update(self, epoch: int):
        update_grids(self.m, self.problem.theta, epoch)

    def run(self) -> Tuple[KandyModel, LossHistory]:
        cfg = self.cfg
        audit_log.log(f"Training started ({cfg.optimizer}, {cfg.epochs} epochs)", "INFO",
                      {"optimizer": cfg.optimizer, "epochs": cfg.epochs, "lambda_roll": cfg.lambda_roll,
                       "samples": len(self.D)})
        if cfg.optimizer == "lstsq":
            self._run_lstsq()
        elif cfg.optimizer == "lbfgs":
            self._run_lbfgs()
        else:
            self._run_first_order()
        audit_log.log("Training finished", "INFO", {"final_total": self.history.last("total"),
                                                    "epochs_run": self.history.last("epoch")})
        return self.m, self.history

    def _run_first_order(self):
        cfg, m = self.cfg, self.m
        freeze = cfg.freeze_coeffs
        updates = set(grid_update_epochs(cfg))
        vec = m.get_params(freeze)
        mom = np.zeros_like(vec)
        vel = np.zeros_like(vec)
        step = 0
        for epoch in range(cfg.epochs + 1):
            total, grad, deriv, roll = self.problem.objective(vec)
            self._record(epoch, total, deriv, roll)
            if epoch == cfg.epochs:
                break
            if cfg.optimizer == "gd":
                vec = vec - cfg.learning_rate * grad
            else:
                step += 1
                mom = ADAM_BETA1 * mom + (1 - ADAM_BETA1) * grad
                vel = ADAM_BETA2 * vel + (1 - ADAM_BETA2) * grad * grad
                m_hat = mom / (1 - ADAM_BETA1 ** step)
                v_hat = vel / (1 - ADAM_BETA2 ** step)
                vec = vec - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            if epoch + 1 in updates:
                m.set_params(vec, freeze)
                self._grid_update(epoch + 1)
                vec = m.get_params(freeze)
                mom[:] = 0.0
                vel[:] = 0.0
                step = 0
        m.set_params(vec, freeze)

    def _run_lbfgs(self):
        cfg, m = self.cfg, self.m
        freeze = cfg.freeze_coeffs
        bounds = grid_update_epochs(cfg) + [cfg.epochs]
        memo = {}

        def fun(vec):
            total, grad, deriv, roll = self.problem.objective(vec)
            memo[vec.tobytes()] = (total, deriv, roll)
            if not np.isfinite(total):
                return LBFGS_PENALTY, np.zeros_like(vec)
            return total, grad

        vec = m.get_params(freeze)
        fun(vec)
        self._record(0, *memo[vec.tobytes()])
        epoch = 0
        for bound in bounds:
            if bound <= epoch:
                continue

            def callback(xk):
                nonlocal epoch
                epoch += 1
                key = xk.tobytes()
                if key not in memo:
                    fun(xk)
                self._record(epoch, *memo[key])
                memo.clear()

            result = minimize(fun, vec, jac=True, method="L-BFGS-B", callback=callback,
                              options={"maxiter": bound - epoch, "maxcor": 20, "gtol": 1e-14, "ftol": 1e-16})
            vec = result.x
            m.set_params(vec, freeze)
            if epoch < bound and epoch < cfg.epochs:
                audit_log.log(f"L-BFGS stopped early at epoch {epoch}: {result.message}", "INFO")
            if bound < cfg.epochs:
                self._grid_update(bound)
                vec = m.get_params(freeze)
                epoch = max(epoch, bound)
        m.set_params(vec, freeze)

    def _run_lstsq(self):
        m, cfg = self.m, self.cfg
        total, deriv, roll, _ = self.problem.evaluate(with_grad=False)
        self._record(0, total, deriv, roll)
        solve_least_squares(m, self.problem.theta, self.problem.targets, cfg.freeze_coeffs, cfg.ridge)
        total, deriv, roll, _ = self.problem.evaluate(with_grad=False)
        self._record(1, total, deriv, roll)


def solve_least_squares(m: KandyModel, theta: np.ndarray, targets: np.ndarray, freeze_coeffs: bool = False,
                        ridge: float = RIDGE_FLOOR):
    """
    Closed-form minimizer of the derivative loss. Each output is linear in
    its own edges' (coeffs, slope, bias), so outputs are solved separately.
    """
    flat = theta.reshape(-1, m.n_in)
    y = targets.reshape(-1, m.n_out)
    z = m.normalize(flat)
    basis = gaussian_basis(z, m.centers, m.bandwidths[:, None], m.exponent_scale)
    sm = m.spline_mask
    ones = np.ones((len(flat), 1))
    for j in range(m.n_out):
        blocks, layout = [], []
        target = y[:, j] - m.offset[j]
        for (i, jj), term in m.symbolic.items():
            if jj == j and m.mask[i, j]:
                target -= term.evaluate(flat[:, i])
        for i in range(m.n_in):
            if not sm[i, j]:
                continue
            if freeze_coeffs:
                target -= basis[:, i, :] @ m.coeffs[i, j]
            if not freeze_coeffs:
                blocks.append(basis[:, i, :])
            blocks.extend([z[:, i:i + 1], ones])
            layout.append(i)
        if not blocks:
            continue
        sol = ridge_lstsq(np.hstack(blocks), target, ridge)
        pos = 0
        for i in layout:
            if not freeze_coeffs:
                m.coeffs[i, j] = sol[pos:pos + m.grid_size]
                pos += m.grid_size
            m.slope[i, j] = sol[pos]
            m.bias[i, j] = sol[pos + 1]
            pos += 2


def train(m: KandyModel, D: Dataset, cfg: TrainConfig, test: Optional[Dataset] = None) -> Tuple[KandyModel, LossHistory]:
    return Trainer(m, D, cfg, test).run()
