"""
Artifact persistence for a run directory: JSON records, CSV tables and raw
float64 fields with a JSON sidecar.
"""
import hashlib
import json
from pathlib import Path
from typing import Dict, Optional, Type, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from kandy.errors import ArtifactIOError, MissingArtifactError
from kandy.models.records import (
    EdgeRecord, LiftRecord, ModelRecord, SplineRecord, SymbolicEdgeRecord,
)
from kandy.models.series import Dataset, DatasetKind, FieldTrajectory, Trajectory
from kandy.services.kandy_model import KandyModel
from kandy.services.lifting import build_lift
from kandy.services.symbolic import SymbolicTerm

R = TypeVar("R", bound=BaseModel)

FLOAT_FORMAT = "%.17g"
FIELD_DTYPE = "<f8"

TRAJECTORY = "trajectory.csv"
FIELD = "field.bin"
DATASET = "dataset.csv"
MODEL = "model.json"
LOSS_HISTORY = "loss_history.csv"
EQUATIONS_JSON = "equations.json"
EQUATIONS_TEXT = "equations.txt"
SYMBOLIC_MODEL = "symbolic_model.json"
DIAGNOSTICS = "diagnostics.json"
NRMSE = "nrmse.csv"
ROLLOUT = "rollout.csv"
ERROR_FIELD = "error_field.bin"
ERROR_RMS = "error_rms.csv"
MANIFEST = "manifest.json"
EVENTS = "events.jsonl"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def dumps(doc) -> str:
    """Stable JSON text: sorted keys, shortest round-trip floats."""
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


class ArtifactStore:
    """Reads and writes every artifact of one run directory."""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def exists(self, name: str) -> bool:
        return self.path(name).is_file()

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.is_file():
            raise MissingArtifactError(str(p))
        return p

    def _write_text(self, name: str, text: str):
        try:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as e:
            raise ArtifactIOError(f"Could not write {self.path(name)}: {e}") from e

    # --- JSON ---------------------------------------------------------------

    def write_record(self, name: str, record: BaseModel):
        try:
            text = dumps(record.model_dump(mode="json"))
        except ValueError as e:
            raise ArtifactIOError(f"{name} holds a non-finite value: {e}") from e
        self._write_text(name, text)

    def read_record(self, name: str, cls: Type[R]) -> R:
        p = self.require(name)
        try:
            with open(p, encoding="utf-8") as fh:
                return cls.model_validate(json.load(fh))
        except (json.JSONDecodeError, ValidationError) as e:
            raise MissingArtifactError(str(p), f"unreadable: {e}") from e
        except OSError as e:
            raise ArtifactIOError(f"Could not read {p}: {e}") from e

    def write_text(self, name: str, text: str):
        self._write_text(name, text)

    # --- CSV ----------------------------------------------------------------

    def write_frame(self, name: str, frame: pd.DataFrame):
        try:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            frame.to_csv(self.path(name), index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        except OSError as e:
            raise ArtifactIOError(f"Could not write {self.path(name)}: {e}") from e

    def read_frame(self, name: str) -> pd.DataFrame:
        p = self.require(name)
        try:
            return pd.read_csv(p, float_precision="round_trip")
        except OSError as e:
            raise ArtifactIOError(f"Could not read {p}: {e}") from e

    # --- raw fields ---------------------------------------------------------

    def write_field(self, name: str, values: np.ndarray, meta: Optional[dict] = None):
        """values as little-endian float64 in C order; shape and meta in <name>.json."""
        values = np.ascontiguousarray(values, dtype=FIELD_DTYPE)
        sidecar = {"shape": list(values.shape), "dtype": FIELD_DTYPE, **(meta or {})}
        try:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            values.tofile(self.path(name))
        except OSError as e:
            raise ArtifactIOError(f"Could not write {self.path(name)}: {e}") from e
        self._write_text(Path(name).stem + ".json", dumps(sidecar))

    def read_field(self, name: str):
        p = self.require(name)
        side = self.require(Path(name).stem + ".json")
        try:
            with open(side, encoding="utf-8") as fh:
                meta = json.load(fh)
            values = np.fromfile(p, dtype=meta["dtype"])
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise ArtifactIOError(f"Could not read field {p}: {e}") from e
        shape = tuple(meta["shape"])
        if values.size != int(np.prod(shape)):
            raise MissingArtifactError(str(p), f"size {values.size} does not match shape {shape}")
        return values.reshape(shape).astype(float), meta

    # --- generated data -----------------------------------------------------

    def save_data(self, data):
        if isinstance(data, FieldTrajectory):
            self.write_field(FIELD, data.fields, {"dx": data.dx, "dt": data.dt, "t0": float(data.times[0])})
        elif isinstance(data, Trajectory):
            frame = pd.DataFrame(data.states, columns=data.variables)
            frame.insert(0, "t", data.times)
            self.write_frame(TRAJECTORY, frame)
        else:
            frame = pd.DataFrame(data.states, columns=[f"x{i + 1}" for i in range(data.states.shape[1])])
            for k in range(data.targets.shape[1]):
                frame[f"h{k + 1}"] = data.targets[:, k]
            frame["group"] = data.groups if data.groups is not None else -1
            self.write_frame(DATASET, frame)

    def load_data(self, kind: DatasetKind, variables, dt: float = 1.0):
        kind = DatasetKind(kind)
        if kind == DatasetKind.PDE_FIELD:
            fields, meta = self.read_field(FIELD)
            times = meta.get("t0", 0.0) + meta["dt"] * np.arange(len(fields))
            return FieldTrajectory(times, fields, meta["dx"], meta["dt"])
        if kind == DatasetKind.STATIC:
            frame = self.read_frame(DATASET)
            xs = [c for c in frame.columns if c.startswith("x")]
            hs = [c for c in frame.columns if c.startswith("h")]
            return Dataset(frame[xs].to_numpy(), frame[hs].to_numpy(), DatasetKind.STATIC,
                           groups=frame["group"].to_numpy(dtype=int))
        frame = self.read_frame(TRAJECTORY)
        dt = 1.0 if kind == DatasetKind.MAP else dt
        return Trajectory(frame["t"].to_numpy(), frame[list(variables)].to_numpy(), dt, list(variables), kind.value)

    # --- models -------------------------------------------------------------

    def save_model(self, name: str, m: KandyModel, trained: bool, system: str = ""):
        self.write_record(name, model_to_record(m, trained, system))

    def load_model(self, name: str, require_trained: bool = True) -> KandyModel:
        rec = self.read_record(name, ModelRecord)
        if require_trained and not rec.trained:
            raise MissingArtifactError(str(self.path(name)), "model is untrained")
        return model_from_record(rec)

    def checksums(self, exclude=(MANIFEST, EVENTS)) -> Dict[str, str]:
        if not self.run_dir.is_dir():
            return {}
        return {p.name: sha256_file(p) for p in sorted(self.run_dir.iterdir())
                if p.is_file() and p.name not in exclude}


def model_to_record(m: KandyModel, trained: bool = True, system: str = "") -> ModelRecord:
    lift = m.lift
    edges = [EdgeRecord(i=i, j=j, spline=SplineRecord(**m.edge(i, j).to_record()))
             for i in range(m.n_in) for j in range(m.n_out)]
    symbolic = []
    for (i, j), term in sorted(m.symbolic.items()):
        if not isinstance(term, SymbolicTerm):
            raise ArtifactIOError(f"Edge ({i}, {j}) holds a term that cannot be serialized")
        symbolic.append(SymbolicEdgeRecord(i=i, j=j, family=term.family, alpha=term.alpha, beta=term.beta,
                                           gamma=term.gamma, delta=term.delta))
    return ModelRecord(
        trained=trained,
        system=system,
        lift=LiftRecord(terms=lift.labels, variables=list(lift.variables), is_field=lift.is_field, dx=lift.dx,
                        scheme=lift.scheme, theta_a=lift.theta_a, theta_b=lift.theta_b),
        n_out=m.n_out,
        output_names=list(m.output_names),
        grid_size=m.grid_size,
        knots=m.knots,
        exponent_scale=m.exponent_scale,
        feature_mean=[float(v) for v in m.feature_mean],
        feature_scale=[float(v) for v in m.feature_scale],
        offset=[float(v) for v in m.offset],
        mask=m.mask.tolist(),
        edges=edges,
        symbolic=symbolic,
    )


def model_from_record(rec: ModelRecord) -> KandyModel:
    lr = rec.lift
    lift = build_lift(lr.terms, lr.variables, lr.is_field, lr.dx, lr.scheme, {"a": lr.theta_a, "b": lr.theta_b})
    n_in = lift.n_terms
    lo, hi = np.zeros(n_in), np.ones(n_in)
    coeffs = np.zeros((n_in, rec.n_out, rec.grid_size))
    slope, bias = np.zeros((n_in, rec.n_out)), np.zeros((n_in, rec.n_out))
    for e in rec.edges:
        lo[e.i], hi[e.i] = e.spline.lo, e.spline.hi
        coeffs[e.i, e.j] = e.spline.coeffs
        slope[e.i, e.j], bias[e.i, e.j] = e.spline.slope, e.spline.bias
    m = KandyModel(lift, rec.n_out, rec.grid_size, rec.knots, lo, hi, coeffs=coeffs, slope=slope, bias=bias,
                   mask=np.array(rec.mask, dtype=bool), feature_mean=rec.feature_mean,
                   feature_scale=rec.feature_scale, exponent_scale=rec.exponent_scale,
                   output_names=rec.output_names)
    m.offset = np.array(rec.offset, dtype=float)
    for s in rec.symbolic:
        m.symbolic[(s.i, s.j)] = SymbolicTerm(s.family, s.alpha, s.beta, s.gamma, s.delta)
    return m
