import hashlib
import json
import sys
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from kandy.errors import ArtifactIOError, ConfigError
from kandy.models.series import DatasetKind
from kandy.services.systems import KINDS, VARIABLES
from kandy.utils.term_grammar import parse_term

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ExperimentSection(Section):
    name: str
    seed: int = Field(0, ge=0)
    test_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    output_dir: Optional[str] = None


class SystemSection(Section):
    name: Literal["lorenz", "henon", "ikeda", "ks", "burgers", "hopf"]
    params: Dict[str, float] = {}
    ic: Optional[List[float]] = None
    ic_perturbation: float = 0.0
    dt: float = Field(0.005, gt=0.0)
    n_steps: int = Field(10000, ge=2)
    burn_in: int = Field(0, ge=0)
    sample_every: int = Field(1, ge=1)
    ic_kind: Literal["sine", "random_fourier"] = "sine"
    fourier_modes: int = Field(20, ge=1)
    fourier_decay: float = 1.0
    ic_seed: int = 42
    n_points: int = Field(2000, ge=1)
    n_fibers: int = Field(64, ge=0)
    points_per_fiber: int = Field(16, ge=2)


class LiftSection(Section):
    # empty -> identity lift on the system variables
    terms: List[str] = []
    scheme: Literal["spectral", "central_fd"] = "spectral"
    theta_a: float = 0.4
    theta_b: float = 6.0


class SplineSection(Section):
    grid_size: int = Field(5, ge=1)
    knots: int = Field(3, ge=1)
    exponent_scale: float = Field(3.0, gt=0.0)
    init: Literal["zero", "small_random"] = "small_random"
    normalize: bool = False


class TrainSection(Section):
    lambda_roll: float = Field(..., ge=0.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    epochs: int = Field(300, ge=0)
    rollout_horizon: int = Field(10, ge=1)
    rollout_integrator: Literal["rk4", "euler"] = "rk4"
    grid_update_every: int = Field(0, ge=0)
    grid_update_until: int = Field(0, ge=0)
    derivative_scheme: Literal["provided", "forward_diff", "central_diff"] = "provided"
    batch: Union[int, Literal["full"]] = "full"
    optimizer: Literal["adam", "gd", "lbfgs", "lstsq"] = "adam"
    freeze_coeffs: bool = False
    ridge: float = Field(1e-8, ge=0.0)
    log_every: int = Field(50, ge=1)


class SymbolicSection(Section):
    tau: float = Field(0.0, ge=0.0, le=1.0)
    w: float = Field(0.01, gt=0.0)
    w_s: float = Field(0.8, gt=0.0, lt=1.0)
    top_t: Optional[int] = Field(None, ge=1)
    c_max: Optional[int] = Field(None, ge=0)
    r2_floor: float = Field(1e-2, ge=0.0)
    center_constants: bool = False
    starts: int = Field(8, ge=1)
    max_fit_samples: int = Field(2000, ge=10)
    library: Optional[List[str]] = None


class DiagnosticsSection(Section):
    lyapunov_intervals: int = Field(10000, ge=1)
    lyapunov_transient: int = Field(100, ge=0)
    lyapunov_interval: float = Field(1.0, gt=0.0)
    rollout_steps: int = Field(2000, ge=1)
    rollout_substeps: int = Field(1, ge=1)
    rollout_ic: Optional[List[float]] = None
    coherence_lyapunov_times: float = Field(5.0, gt=0.0)
    nrmse_levels: List[float] = [0.1, 0.4]
    corr_dim_radii: List[float] = []
    corr_dim_min_samples: int = Field(5000, ge=10)
    corr_dim_max_points: int = Field(5000, ge=10)
    equation_rollout: bool = True

    @field_validator("nrmse_levels")
    @classmethod
    def _positive_levels(cls, v):
        if any(level <= 0 for level in v):
            raise ValueError("nrmse levels must be positive")
        return v


class ExperimentConfig(Section):
    experiment: ExperimentSection
    system: SystemSection
    lift: LiftSection = LiftSection()
    spline: SplineSection = SplineSection()
    train: TrainSection
    symbolic: SymbolicSection = SymbolicSection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _check_lift_terms(cfg: ExperimentConfig):
    is_field = KINDS[cfg.system.name] == DatasetKind.PDE_FIELD
    for k, text in enumerate(cfg.lift.terms):
        try:
            parse_term(text, VARIABLES[cfg.system.name], is_field)
        except ValueError as e:
            raise ConfigError(f"lift.terms.{k}: {e}") from e


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a raw mapping; the first error is reported by dotted field path."""
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as e:
        err = e.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        raise ConfigError(f"{path}: {err['msg']}") from e
    _check_lift_terms(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config {path} is not valid TOML: {e}") from e
    except OSError as e:
        raise ArtifactIOError(f"Could not read config {path}: {e}") from e
    return parse_config(doc)
