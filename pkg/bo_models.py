#!/usr/bin/env python3
"""
Shared data models for Bayesian optimization with derivative observations.
"""

from typing import List, Optional, Tuple
from dataclasses import dataclass, field
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

import numpy as np


UNIT_NORM_TOLERANCE = 1e-12


class ContractViolationError(ValueError):
    """Dimension mismatch, non-unit direction, point outside the box and similar."""


class SingularModelError(np.linalg.LinAlgError):
    """Cholesky failed even with the maximum jitter."""

    def __init__(self, message: str, record_index: Optional[int] = None):
        super().__init__(message)
        self.record_index = record_index


class SamplerInitializationError(RuntimeError):
    """Every walker of the ensemble starts at a -inf log posterior."""


class ObjectiveEvaluationError(RuntimeError):
    """Raised by an objective that could not be evaluated at a point."""


class FantasyMode(StrEnum):
    DIRECTIONAL = 'directional'  # value + one directional derivative per point
    FULL = 'full'  # value + all d partials
    MASKED = 'masked'  # value + the partials selected by a mask
    VALUE = 'value'  # value only, no derivatives


def check_unit_direction(direction: np.ndarray) -> np.ndarray:
    direction = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
        raise ContractViolationError(f"Direction must have unit norm, got |theta| = {norm!r}")
    return direction


@dataclass(frozen=True)
class KernelSpec:
    """Гиперпараметры квадратично-экспоненциального ядра и шума по каналам.

    Канал 0 - значение функции, каналы 1..d - частные производные.
    """
    signal_variance: float
    length_scales: Tuple[float, ...]
    noise_variances: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'length_scales', tuple(float(v) for v in self.length_scales))
        object.__setattr__(self, 'noise_variances', tuple(float(v) for v in self.noise_variances))
        if not self.signal_variance > 0:
            raise ContractViolationError(f"signal_variance must be positive, got {self.signal_variance}")
        if not self.length_scales or any(not v > 0 for v in self.length_scales):
            raise ContractViolationError(f"length_scales must be positive, got {self.length_scales}")
        if len(self.noise_variances) != len(self.length_scales) + 1:
            raise ContractViolationError(
                f"Expected {len(self.length_scales) + 1} noise variances, got {len(self.noise_variances)}")
        if any(not v >= 0 for v in self.noise_variances):
            raise ContractViolationError(f"noise_variances must be nonnegative, got {self.noise_variances}")

    @property
    def dim(self) -> int:
        return len(self.length_scales)


@dataclass(frozen=True)
class ObservationRecord:
    """One evaluation: noisy value, masked partials and/or a directional derivative.

    partials holds d entries; only the entries where partials_mask is True were observed.
    """
    location: Tuple[float, ...]
    value: Optional[float] = None
    partials: Optional[Tuple[float, ...]] = None
    partials_mask: Optional[Tuple[bool, ...]] = None
    direction: Optional[Tuple[float, ...]] = None
    directional: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, 'location', tuple(float(v) for v in self.location))
        d = len(self.location)
        if self.partials is not None:
            object.__setattr__(self, 'partials', tuple(float(v) for v in self.partials))
            mask = self.partials_mask if self.partials_mask is not None else (True,) * d
            object.__setattr__(self, 'partials_mask', tuple(bool(m) for m in mask))
            if len(self.partials) != d or len(self.partials_mask) != d:
                raise ContractViolationError(f"partials and mask must have {d} entries")
        if (self.direction is None) != (self.directional is None):
            raise ContractViolationError("direction and directional value must be given together")
        if self.direction is not None:
            direction = check_unit_direction(self.direction)
            if direction.shape != (d,):
                raise ContractViolationError(f"direction must have {d} entries")
            object.__setattr__(self, 'direction', tuple(float(v) for v in direction))
        if not self.channel_weights().shape[0]:
            raise ContractViolationError("Observation record has no observed channel")

    @property
    def dim(self) -> int:
        return len(self.location)

    def channel_weights(self) -> np.ndarray:
        """Weight rows c of the observed functionals c·(f, ∇f), in storage order."""
        d = self.dim
        rows = []
        if self.value is not None:
            row = np.zeros(d + 1)
            row[0] = 1.0
            rows.append(row)
        if self.partials is not None:
            for i, observed in enumerate(self.partials_mask):
                if observed:
                    row = np.zeros(d + 1)
                    row[i + 1] = 1.0
                    rows.append(row)
        if self.direction is not None:
            rows.append(np.concatenate(([0.0], self.direction)))
        return np.array(rows).reshape(len(rows), d + 1)

    def channel_values(self) -> np.ndarray:
        values = []
        if self.value is not None:
            values.append(self.value)
        if self.partials is not None:
            values.extend(p for p, observed in zip(self.partials, self.partials_mask) if observed)
        if self.directional is not None:
            values.append(self.directional)
        return np.array(values, dtype=float)

    @property
    def num_channels(self) -> int:
        return self.channel_weights().shape[0]


@dataclass
class CandidateBatch:
    """q candidate locations plus the shared direction of the retained derivative."""
    points: np.ndarray
    direction: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] < 1:
            raise ContractViolationError("Batch must contain at least one point")
        if self.direction is not None:
            self.direction = check_unit_direction(self.direction)
            if self.direction.shape != (self.points.shape[1],):
                raise ContractViolationError("Direction dimension does not match the batch")

    @property
    def q(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass
class FantasyDraw:
    """Standard normal vector W driving one simulated future posterior mean."""
    w: np.ndarray

    @property
    def dim(self) -> int:
        return self.w.shape[0]


@dataclass
class AcquisitionEstimate:
    value: float
    std_error: float
    num_fantasies: int
    samples: Optional[np.ndarray] = None


@dataclass(frozen=True)
class HyperSample:
    kernel: KernelSpec
    prior_mean: float
    log_posterior: float


@dataclass
class IterationRecord:
    """Одна итерация алгоритма: выбранный батч, наблюдения и рекомендация."""
    iteration: int
    eval_count: int
    batch: np.ndarray
    direction: Optional[np.ndarray]
    observations: List[ObservationRecord]
    recommendation: np.ndarray
    recommendation_value: Optional[float]
    acquisition_value: float
    wall_ms: float
    hyper_digest: str


@dataclass
class RunTrace:
    """Полный журнал одного запуска оптимизации."""
    iterations: List[IterationRecord] = field(default_factory=list)
    initial_design: List[ObservationRecord] = field(default_factory=list)
    complete: bool = False
    failure: Optional[str] = None
    bounds: Optional[np.ndarray] = None
    value_shift: float = 0.0
    value_scale: float = 1.0

    @property
    def eval_count(self) -> int:
        return self.iterations[-1].eval_count if self.iterations else 0


class ConfigError(ValueError):
    """Invalid experiment configuration; key_path is the dotted path of the offending key."""

    def __init__(self, message: str, key_path: Optional[str] = None):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


@dataclass
class ReplicationResult:
    """One seeded replication of an experiment; trace is None when the run raised."""
    replication: int
    seed: int
    trace: Optional[RunTrace] = None
    failure: Optional[str] = None

    @property
    def completed(self) -> bool:
        return self.trace is not None and self.trace.complete
