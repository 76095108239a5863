"""
Persisted artifact schemas. Every JSON file a run writes is one of these.
"""
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict

MODEL_FORMAT = "kandy-model/1"
MANIFEST_FORMAT = "kandy-manifest/1"


class Record(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SplineRecord(Record):
    lo: float
    hi: float
    G: int
    k: int
    coeffs: List[float]
    slope: float
    bias: float
    basis: str = "gaussian_rbf"


class LiftRecord(Record):
    terms: List[str]
    variables: List[str]
    is_field: bool = False
    dx: float = 0.0
    scheme: str = "spectral"
    theta_a: float = 0.4
    theta_b: float = 6.0


class EdgeRecord(Record):
    i: int
    j: int
    spline: SplineRecord


class SymbolicEdgeRecord(Record):
    i: int
    j: int
    family: str
    alpha: float
    beta: float = 1.0
    gamma: float = 0.0
    delta: float = 0.0


class ModelRecord(Record):
    format: str = MODEL_FORMAT
    trained: bool = False
    system: str = ""
    lift: LiftRecord
    n_out: int
    output_names: List[str]
    grid_size: int
    knots: int
    exponent_scale: float
    feature_mean: List[float]
    feature_scale: List[float]
    offset: List[float]
    mask: List[List[bool]]
    edges: List[EdgeRecord]
    symbolic: List[SymbolicEdgeRecord] = []


class EquationsRecord(Record):
    system: str
    labels: List[str]
    outputs: Dict[str, dict]
    text: str
    summary: Dict[str, float] = {}


class FiberRecord(Record):
    mean_angular_error: float
    p95_radial_error: float
    mean_fiber_rms: float
    max_fiber_error: float


class CoherenceRecord(Record):
    horizon: float
    ks_statistics: Dict[str, float]
    inside_envelope: bool
    coherent: bool


class RolloutSummary(Record):
    steps_requested: int
    steps_completed: int
    diverged: bool
    final_nrmse: Optional[float] = None
    # level -> first crossing time (None when never crossed)
    crossings: Dict[str, Optional[float]] = {}
    crossings_lyapunov: Dict[str, Optional[float]] = {}
    coherence: Optional[CoherenceRecord] = None
    mean_error_rms: Optional[float] = None


class DiagnosticsRecord(Record):
    system: str
    lyapunov_exponent: Optional[float] = None
    lyapunov_time: Optional[float] = None
    model: Optional[RolloutSummary] = None
    equation: Optional[RolloutSummary] = None
    fiber_model: Optional[FiberRecord] = None
    fiber_equation: Optional[FiberRecord] = None
    correlation_dimension_truth: Optional[float] = None
    correlation_dimension_model: Optional[float] = None


class Manifest(Record):
    format: str = MANIFEST_FORMAT
    tool_version: str
    config_hash: str
    seed: int
    stage_seeds: Dict[str, int]
    stages: List[str]
    config: dict
    files: Dict[str, str]
