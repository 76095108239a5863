from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np


class DatasetKind(str, Enum):
    ODE = "ode"
    MAP = "map"
    PDE_FIELD = "pde_field"
    STATIC = "static"


@dataclass
class Trajectory:
    """Uniformly sampled state sequence of an ODE or map."""
    times: np.ndarray            # (T,)
    states: np.ndarray           # (T, d)
    dt: float
    variables: List[str]
    kind: str = "ode"
    diverged: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.states.ndim != 2:
            raise ValueError("Trajectory states must be (T, d)")
        if len(self.times) != len(self.states):
            raise ValueError("Trajectory times/states length mismatch")
        if len(self.variables) != self.states.shape[1]:
            raise ValueError("Trajectory variable names do not match state dimension")

    def __len__(self):
        return len(self.states)

    def split(self, test_fraction: float):
        """Contiguous head/tail split; the tail is held out."""
        n_test = int(round(len(self) * test_fraction))
        n_train = len(self) - n_test
        head = Trajectory(self.times[:n_train], self.states[:n_train], self.dt, self.variables, self.kind)
        tail = Trajectory(self.times[n_train:], self.states[n_train:], self.dt, self.variables, self.kind)
        return head, tail


@dataclass
class FieldTrajectory:
    """Space-time field on a periodic 1-D grid, rows are time slices."""
    times: np.ndarray            # (T,)
    fields: np.ndarray           # (T, N)
    dx: float
    dt: float
    diverged: bool = False

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.fields.ndim != 2:
            raise ValueError("Field trajectory must be (T, N)")
        if self.dx <= 0:
            raise ValueError("dx must be positive")

    def __len__(self):
        return len(self.fields)

    @property
    def n_points(self) -> int:
        return self.fields.shape[1]

    @property
    def length(self) -> float:
        return self.n_points * self.dx

    def split(self, test_fraction: float):
        n_test = int(round(len(self) * test_fraction))
        n_train = len(self) - n_test
        head = FieldTrajectory(self.times[:n_train], self.fields[:n_train], self.dx, self.dt)
        tail = FieldTrajectory(self.times[n_train:], self.fields[n_train:], self.dx, self.dt)
        return head, tail


@dataclass
class Dataset:
    """
    Paired (state, target) samples.
    - ode: targets are time derivatives
    - map: targets are next states
    - pde_field: states are field snapshots (S, N), targets u_t snapshots (S, N)
    - static: targets are plain outputs
    `sequence` keeps the contiguous states used to cut rollout windows.
    """
    states: np.ndarray
    targets: np.ndarray
    kind: DatasetKind
    dt: float = 0.0
    times: Optional[np.ndarray] = None
    sequence: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None   # e.g. Hopf fiber ids (-1 = unstructured sample)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = DatasetKind(self.kind)
        self.states = np.asarray(self.states, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if len(self.states) != len(self.targets):
            raise ValueError("Dataset states/targets row counts differ")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.targets))):
            raise ValueError("Dataset contains non-finite entries")

    def __len__(self):
        return len(self.states)

    def subset(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            states=self.states[rows],
            targets=self.targets[rows],
            kind=self.kind,
            dt=self.dt,
            times=None if self.times is None else self.times[rows],
            sequence=self.sequence,
            groups=None if self.groups is None else self.groups[rows],
            meta=dict(self.meta),
        )
