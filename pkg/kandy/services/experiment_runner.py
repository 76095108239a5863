"""
Stage orchestration: generate -> train -> discover -> diagnose, each stage
reading its inputs from the run directory so any stage can be rerun alone.
"""
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from kandy import __version__
from kandy.config import settings
from kandy.errors import ConfigError
from kandy.models.experiment import ExperimentConfig
from kandy.models.records import (
    CoherenceRecord, DiagnosticsRecord, EquationsRecord, FiberRecord, Manifest, RolloutSummary,
)
from kandy.models.series import Dataset, DatasetKind, FieldTrajectory, Trajectory
from kandy.services import artifact_store as files
from kandy.services.artifact_store import ArtifactStore
from kandy.services.audit_logger import audit_log
from kandy.services.diagnostics import (
    coherence, correlation_dimension, crossing_time, error_field, fiber_metrics, largest_lyapunov,
    lyapunov_time, nrmse_curve, rollout,
)
from kandy.services.integrators import StepScheme, integrate
from kandy.services.kandy_model import KandyModel, new_model
from kandy.services.lifting import build_lift
from kandy.services.symbolic import DEFAULT_LIBRARY, DiscoveredEquation, SymbolicSettings, extract_equations
from kandy.services.systems import (
    KINDS, OUTPUTS, VARIABLES, SystemSpec, generate, iterate_map, lorenz_field, map_function, true_tendency,
)
from kandy.services.training import TrainConfig, build_dataset, train

STAGES = ("generate", "train", "discover", "diagnose")


def stage_seeds(seed: int) -> Dict[str, int]:
    """SeedSequence(seed).spawn(4), one child per stage in STAGES order."""
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(STAGES, children)}


def resolve_run_dir(cfg: ExperimentConfig, out: Optional[str] = None) -> Path:
    if out:
        return Path(out)
    if cfg.experiment.output_dir:
        return Path(cfg.experiment.output_dir)
    return Path(settings.OUTPUT_DIR) / cfg.experiment.name


def split_static(D: Dataset, test_fraction: float) -> Tuple[Dataset, Optional[Dataset]]:
    """Hold out the last fibers whole plus the tail of the unstructured samples."""
    if test_fraction <= 0:
        return D, None
    groups = D.groups if D.groups is not None else -np.ones(len(D), dtype=int)
    test = np.zeros(len(D), dtype=bool)
    loose = np.flatnonzero(groups < 0)
    n_loose = int(round(len(loose) * test_fraction))
    if n_loose:
        test[loose[-n_loose:]] = True
    n_fibers = int(groups.max()) + 1 if np.any(groups >= 0) else 0
    held = int(round(n_fibers * test_fraction))
    if held:
        test |= groups >= n_fibers - held
    return D.subset(np.flatnonzero(~test)), D.subset(np.flatnonzero(test))


def _finite(v) -> Optional[float]:
    return float(v) if v is not None and np.isfinite(v) else None


def parameter_summary(system: str, eq: DiscoveredEquation) -> Dict[str, float]:
    """Recovered physical parameters read off the discovered coefficients."""
    c = eq.coefficient
    constants = {o.name: o.constant for o in eq.outputs}
    if system == "lorenz":
        return {"sigma": 0.5 * (abs(c("x'", "y")) + abs(c("x'", "x"))), "rho": c("y'", "x"),
                "beta": -c("z'", "z"), "xz": c("y'", "x*z"), "xy": c("z'", "x*y")}
    if system == "henon":
        return {"a": -c("x'", "x", "x^2"), "b": c("y'", "x"), "x'_y": c("x'", "y"), "x'_constant": constants["x'"]}
    if system == "ikeda":
        parts = [c("x'", "x*cos(theta)"), -c("x'", "y*sin(theta)"), c("y'", "x*sin(theta)"),
                 c("y'", "y*cos(theta)")]
        return {"u": float(np.mean(parts)), "x'_constant": constants["x'"]}
    if system in ("ks", "burgers"):
        labels = ("u*u_x", "u_xx", "u_xxxx") if system == "ks" else ("u*u_x", "u_xx")
        return {label: c("u_t", label) for label in labels}
    if system == "hopf":
        return {f"{o.name}:{t.label}": t.term.alpha for o in eq.outputs for t in o.terms}
    return {}


class ExperimentRunner:
    """Runs the stages of one experiment against its run directory."""

    def __init__(self, cfg: ExperimentConfig, run_dir, seed: Optional[int] = None):
        if seed is not None:
            cfg = cfg.model_copy(update={"experiment": cfg.experiment.model_copy(update={"seed": seed})})
        self.cfg = cfg
        self.seed = cfg.experiment.seed
        self.seeds = stage_seeds(self.seed)
        self.store = ArtifactStore(run_dir)
        self.name = cfg.system.name
        self.kind = KINDS[self.name]
        self.variables = VARIABLES[self.name]
        sysc = cfg.system
        try:
            self.spec = SystemSpec(
                name=sysc.name, params=dict(sysc.params), ic=sysc.ic, ic_perturbation=sysc.ic_perturbation,
                dt=sysc.dt, n_steps=sysc.n_steps, burn_in=sysc.burn_in, seed=self.seeds["generate"],
                sample_every=sysc.sample_every, ic_kind=sysc.ic_kind, fourier_modes=sysc.fourier_modes,
                fourier_decay=sysc.fourier_decay, ic_seed=sysc.ic_seed, n_points=sysc.n_points,
                n_fibers=sysc.n_fibers, points_per_fiber=sysc.points_per_fiber,
            )
        except ValueError as e:
            raise ConfigError(f"system: {e}") from e

    # --- dispatch -------------------------------------------------------------

    def handle(self, stage: str):
        self.store.run_dir.mkdir(parents=True, exist_ok=True)
        audit_log.attach(self.store.run_dir)
        try:
            if stage == "all":
                for s in STAGES:
                    self._run_stage(s)
            elif stage in STAGES:
                self._run_stage(stage)
            else:
                raise ConfigError(f"Unknown stage '{stage}'")
        finally:
            audit_log.detach()

    def _run_stage(self, stage: str):
        audit_log.log(f"Stage {stage} started", "INFO", {"system": self.name, "seed": self.seeds[stage]})
        getattr(self, stage)()
        self._write_manifest(stage)
        audit_log.log(f"Stage {stage} finished", "INFO")

    def _write_manifest(self, stage: str):
        done = {stage}
        if self.store.exists(files.MANIFEST):
            prev = self.store.read_record(files.MANIFEST, Manifest)
            if prev.config_hash == self.cfg.config_hash():
                done |= set(prev.stages)
        manifest = Manifest(
            tool_version=__version__,
            config_hash=self.cfg.config_hash(),
            seed=self.seed,
            stage_seeds=self.seeds,
            stages=[s for s in STAGES if s in done],
            config=self.cfg.model_dump(mode="json"),
            files=self.store.checksums(),
        )
        self.store.write_record(files.MANIFEST, manifest)

    # --- shared inputs --------------------------------------------------------

    def _load_data(self):
        return self.store.load_data(self.kind, self.variables, self.spec.dt)

    def _datasets(self, data) -> Tuple[Dataset, Optional[Dataset]]:
        frac = self.cfg.experiment.test_fraction
        if self.kind == DatasetKind.STATIC:
            return split_static(data, frac)
        scheme = self.cfg.train.derivative_scheme
        tendency = None
        if self.kind != DatasetKind.MAP and scheme == "provided":
            tendency = true_tendency(self.spec)
        head, tail = data.split(frac)
        train_set = build_dataset(head, self.kind, scheme, tendency)
        test_set = build_dataset(tail, self.kind, scheme, tendency) if len(tail) >= 3 else None
        return train_set, test_set

    def _lift(self, data):
        lc = self.cfg.lift
        terms = lc.terms or list(self.variables)
        is_field = self.kind == DatasetKind.PDE_FIELD
        try:
            return build_lift(terms, self.variables, is_field, data.dx if is_field else 0.0, lc.scheme,
                              {"a": lc.theta_a, "b": lc.theta_b})
        except ValueError as e:
            raise ConfigError(f"lift.terms: {e}") from e

    def _train_config(self, dt: float) -> TrainConfig:
        t = self.cfg.train
        try:
            return TrainConfig(
                learning_rate=t.learning_rate, epochs=t.epochs, lambda_roll=t.lambda_roll,
                rollout_horizon=t.rollout_horizon, rollout_integrator=t.rollout_integrator, dt=dt,
                grid_update_every=t.grid_update_every, grid_update_until=t.grid_update_until,
                derivative_scheme=t.derivative_scheme, seed=self.seeds["train"], batch=t.batch,
                optimizer=t.optimizer, freeze_coeffs=t.freeze_coeffs, ridge=t.ridge, log_every=t.log_every,
            )
        except ValueError as e:
            raise ConfigError(f"train: {e}") from e

    def _symbolic_settings(self) -> SymbolicSettings:
        s = self.cfg.symbolic
        try:
            return SymbolicSettings(
                tau=s.tau, w=s.w, w_s=s.w_s, top_t=s.top_t, c_max=s.c_max, r2_floor=s.r2_floor,
                center_constants=s.center_constants, starts=s.starts, max_fit_samples=s.max_fit_samples,
                seed=self.seeds["discover"], library=tuple(s.library) if s.library else DEFAULT_LIBRARY,
            )
        except ValueError as e:
            raise ConfigError(f"symbolic: {e}") from e

    # --- stages ---------------------------------------------------------------

    def generate(self):
        data = generate(self.spec)
        self.store.save_data(data)
        audit_log.log(f"Generated {len(data)} samples for {self.name}", "INFO")

    def train(self):
        data = self._load_data()
        train_set, test_set = self._datasets(data)
        lift = self._lift(data)
        sc = self.cfg.spline
        rng = np.random.default_rng(self.seeds["train"])
        m = new_model(lift, len(OUTPUTS[self.name]), lift.lift_batch(train_set.states), sc.grid_size, sc.knots,
                      sc.init, rng, sc.normalize, sc.exponent_scale, OUTPUTS[self.name])
        m, history = train(m, train_set, self._train_config(train_set.dt), test=test_set)
        self.store.save_model(files.MODEL, m, trained=True, system=self.name)
        self.store.write_frame(files.LOSS_HISTORY, history.to_frame())

    def discover(self):
        m = self.store.load_model(files.MODEL)
        train_set, _ = self._datasets(self._load_data())
        eq, substituted = extract_equations(m, train_set, self._symbolic_settings())
        text = eq.render()
        summary = parameter_summary(self.name, eq)
        self.store.write_text(files.EQUATIONS_TEXT, text)
        self.store.write_record(files.EQUATIONS_JSON, EquationsRecord(
            system=self.name, labels=eq.labels, outputs=eq.to_record(), text=text, summary=summary))
        self.store.save_model(files.SYMBOLIC_MODEL, substituted, trained=True, system=self.name)
        for line in text.strip().splitlines():
            audit_log.log(f"Discovered {line}", "INFO")
        if summary:
            audit_log.log("Recovered parameters", "INFO", summary)

    def diagnose(self):
        m = self.store.load_model(files.MODEL)
        sym = None
        if self.cfg.diagnostics.equation_rollout and self.store.exists(files.SYMBOLIC_MODEL):
            sym = self.store.load_model(files.SYMBOLIC_MODEL)
        data = self._load_data()
        report = DiagnosticsRecord(system=self.name)
        if self.kind == DatasetKind.STATIC:
            self._diagnose_static(data, m, sym, report)
        elif self.kind == DatasetKind.PDE_FIELD:
            self._diagnose_field(data, m, sym, report)
        else:
            self._diagnose_trajectory(data, m, sym, report)
        self.store.write_record(files.DIAGNOSTICS, report)

    # --- diagnose helpers -----------------------------------------------------

    def _diagnose_static(self, data: Dataset, m: KandyModel, sym: Optional[KandyModel], report: DiagnosticsRecord):
        _, test = split_static(data, self.cfg.experiment.test_fraction)
        target = test if test is not None and len(test) else data
        report.fiber_model = FiberRecord(**asdict(fiber_metrics(m, target)))
        if sym is not None:
            report.fiber_equation = FiberRecord(**asdict(fiber_metrics(sym, target)))
        audit_log.log("Fiber metrics", "INFO", report.fiber_model.model_dump())

    def _diagnose_field(self, data: FieldTrajectory, m: KandyModel, sym: Optional[KandyModel],
                        report: DiagnosticsRecord):
        dc = self.cfg.diagnostics
        _, tail = data.split(self.cfg.experiment.test_fraction)
        ref = tail if len(tail) >= 2 else data
        steps = min(dc.rollout_steps, len(ref) - 1)
        truth = FieldTrajectory(ref.times[:steps + 1], ref.fields[:steps + 1], ref.dx, ref.dt)
        scheme = StepScheme(self.cfg.train.rollout_integrator, ref.dt / dc.rollout_substeps)
        envelope = float(np.max(np.abs(data.fields)))
        curves = {}
        for tag, model in (("model", m), ("equation", sym)):
            if model is None:
                continue
            pred = rollout(model, truth.fields[0], steps, scheme, envelope, dx=ref.dx, substeps=dc.rollout_substeps)
            n = len(pred)
            diff, rms = error_field(pred.fields, truth.fields[:n])
            curve = nrmse_curve(pred, truth, dt=ref.dt)
            curves[tag] = curve
            if tag == "model":
                self.store.write_field(files.ERROR_FIELD, diff, {"dx": ref.dx, "dt": ref.dt})
                self.store.write_frame(files.ERROR_RMS, pd.DataFrame({"t": truth.times[:n] - truth.times[0],
                                                                      "rms": rms}))
            setattr(report, tag, RolloutSummary(
                steps_requested=steps, steps_completed=n - 1, diverged=pred.diverged,
                final_nrmse=_finite(curve["nrmse"].iloc[-1]), mean_error_rms=_finite(float(np.mean(rms))),
                crossings={str(level): _finite(crossing_time(curve, level)) for level in dc.nrmse_levels},
            ))
        self._write_nrmse(curves)

    def _diagnose_trajectory(self, data: Trajectory, m: KandyModel, sym: Optional[KandyModel],
                             report: DiagnosticsRecord):
        dc = self.cfg.diagnostics
        is_map = self.kind == DatasetKind.MAP
        f_true = map_function(self.spec) if is_map else lorenz_field(self.spec.params)
        lam = largest_lyapunov(f_true, data.states[-1], dc.lyapunov_intervals, "map" if is_map else "ode",
                               self.spec.dt, dc.lyapunov_interval, dc.lyapunov_transient)
        tau = lyapunov_time(lam)
        report.lyapunov_exponent, report.lyapunov_time = _finite(lam), _finite(tau)
        audit_log.log(f"Largest Lyapunov exponent {lam:.6g} (time {tau:.6g})", "INFO")

        _, tail = data.split(self.cfg.experiment.test_fraction)
        ic = np.asarray(dc.rollout_ic if dc.rollout_ic is not None else
                        (tail.states[0] if len(tail) else data.states[-1]), dtype=float)
        steps = dc.rollout_steps
        if is_map:
            states, scheme, dt = iterate_map(f_true, ic, steps), None, 1.0
        else:
            states, dt = integrate(f_true, ic, self.spec.dt, steps), self.spec.dt
            scheme = StepScheme(self.cfg.train.rollout_integrator, dt / dc.rollout_substeps)
        truth = Trajectory(dt * np.arange(len(states)), states, dt, self.variables, data.kind)
        envelope = float(np.max(np.abs(data.states)))
        lo, hi = data.states.min(axis=0), data.states.max(axis=0)

        curves, frame = {}, pd.DataFrame({"t": truth.times})
        for k, v in enumerate(self.variables):
            frame[f"true_{v}"] = truth.states[:, k]
        for tag, model in (("model", m), ("equation", sym)):
            if model is None:
                continue
            pred = rollout(model, ic, steps, scheme, envelope, self.variables, substeps=dc.rollout_substeps)
            curve = nrmse_curve(pred, truth, dt=dt)
            curves[tag] = curve
            for k, v in enumerate(self.variables):
                frame[f"{tag}_{v}"] = pd.Series(pred.states[:, k])
            summary = RolloutSummary(
                steps_requested=steps, steps_completed=len(pred) - 1, diverged=pred.diverged,
                final_nrmse=_finite(curve["nrmse"].iloc[-1]),
                crossings={str(level): _finite(crossing_time(curve, level)) for level in dc.nrmse_levels},
            )
            if np.isfinite(tau):
                summary.crossings_lyapunov = {key: (None if t is None else t / tau)
                                              for key, t in summary.crossings.items()}
                if not is_map:
                    rep = coherence(pred, truth, dc.coherence_lyapunov_times * tau, lo, hi)
                    summary.coherence = CoherenceRecord(horizon=rep.horizon, ks_statistics=rep.ks_statistics,
                                                        inside_envelope=rep.inside_envelope,
                                                        coherent=rep.coherent)
            if tag == "model" and dc.corr_dim_radii:
                report.correlation_dimension_model = self._corr_dim(pred.states)
            setattr(report, tag, summary)
        if dc.corr_dim_radii:
            report.correlation_dimension_truth = self._corr_dim(data.states)
        self.store.write_frame(files.ROLLOUT, frame)
        self._write_nrmse(curves)

    def _corr_dim(self, points: np.ndarray) -> Optional[float]:
        dc = self.cfg.diagnostics
        try:
            return correlation_dimension(points, dc.corr_dim_radii, dc.corr_dim_min_samples, dc.corr_dim_max_points)
        except ValueError as e:
            audit_log.log(f"Correlation dimension skipped: {e}", "WARN")
            return None

    def _write_nrmse(self, curves: Dict[str, pd.DataFrame]):
        if not curves:
            return
        base = max(curves.values(), key=len)
        frame = pd.DataFrame({"t": base["t"]})
        for tag, curve in curves.items():
            frame[f"nrmse_{tag}"] = curve["nrmse"]
        self.store.write_frame(files.NRMSE, frame)
