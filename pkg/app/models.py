"""
Pydantic models for the bivariate nested error regression domain types.
"""

from functools import cached_property
from typing import Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy.sparse as sps
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.covariance import build_cov2
from app.errors import DataError


THETA_NAMES = ("sigma2_u1", "sigma2_u2", "rho_u", "sigma2_e1", "sigma2_e2", "rho_e")

ArrayConfig = ConfigDict(frozen=True, arbitrary_types_allowed=True)


def _frozen(value, ndim: int, dtype=np.float64, name: str = "array") -> np.ndarray:
    """Copy into a read-only array of the given rank."""
    arr = np.array(value, dtype=dtype, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------
# Model parameters
# ---------------------------------------------------------------------


class VarianceComponents(BaseModel):
    """Covariance parameters of the random effects (u) and unit errors (e)."""

    model_config = ConfigDict(frozen=True)

    sigma2_u1: float = Field(..., gt=0, allow_inf_nan=False)
    sigma2_u2: float = Field(..., gt=0, allow_inf_nan=False)
    rho_u: float = Field(..., gt=-1, lt=1)
    sigma2_e1: float = Field(..., gt=0, allow_inf_nan=False)
    sigma2_e2: float = Field(..., gt=0, allow_inf_nan=False)
    rho_e: float = Field(..., gt=-1, lt=1)

    @property
    def v_u(self) -> np.ndarray:
        return build_cov2(self.sigma2_u1, self.sigma2_u2, self.rho_u)

    @property
    def v_e(self) -> np.ndarray:
        return build_cov2(self.sigma2_e1, self.sigma2_e2, self.rho_e)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in THETA_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "VarianceComponents":
        return cls(**{name: float(v) for name, v in zip(THETA_NAMES, values)})


class RegressionCoefficients(BaseModel):
    """Fixed effects beta = (beta1', beta2')'."""

    model_config = ArrayConfig

    beta1: np.ndarray
    beta2: np.ndarray

    @field_validator("beta1", "beta2", mode="before")
    @classmethod
    def _as_vector(cls, value, info):
        arr = _frozen(value, 1, name=info.field_name)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{info.field_name} has non-finite entries")
        return arr

    @property
    def p1(self) -> int:
        return self.beta1.shape[0]

    @property
    def p2(self) -> int:
        return self.beta2.shape[0]

    @property
    def p(self) -> int:
        return self.p1 + self.p2

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.beta1, self.beta2])

    @classmethod
    def from_array(cls, values: Sequence[float], p1: int) -> "RegressionCoefficients":
        values = np.asarray(values, dtype=np.float64)
        return cls(beta1=values[:p1], beta2=values[p1:])


class ModelParams(BaseModel):
    """psi = (beta, theta)."""

    model_config = ConfigDict(frozen=True)

    beta: RegressionCoefficients
    theta: VarianceComponents


# ---------------------------------------------------------------------
# Sample and auxiliary data
# ---------------------------------------------------------------------


class UnitRecord(BaseModel):
    """One sampled unit: domain, covariate rows and transformed responses."""

    model_config = ConfigDict(frozen=True)

    domain_id: str
    x1: list[float]
    x2: list[float]
    y1: float = Field(..., allow_inf_nan=False)
    y2: float = Field(..., allow_inf_nan=False)

    @field_validator("domain_id", mode="before")
    @classmethod
    def _as_str(cls, value):
        return str(value)


class SampleData(BaseModel):
    """
    Array-backed sample grouped by domain.

    Rows are kept sorted by domain (stable within a domain). The registry
    ``domain_ids`` may name domains that have no sampled units (n_d = 0).
    """

    model_config = ArrayConfig

    domain_ids: tuple[str, ...]
    domain_index: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray

    @model_validator(mode="before")
    @classmethod
    def _group_by_domain(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        data["domain_ids"] = tuple(str(d) for d in data["domain_ids"])
        index = np.asarray(data["domain_index"], dtype=np.int64).reshape(-1)
        order = np.argsort(index, kind="stable")
        data["domain_index"] = _frozen(index[order], 1, dtype=np.int64, name="domain_index")
        for key in ("x1", "x2", "y"):
            arr = np.asarray(data[key], dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"{key} must be 2-dimensional, got shape {arr.shape}")
            data[key] = _frozen(arr[order], 2, name=key)
        return data

    @model_validator(mode="after")
    def _check_layout(self):
        n = self.domain_index.shape[0]
        if len(set(self.domain_ids)) != len(self.domain_ids):
            raise ValueError("domain ids must be unique")
        if self.x1.shape[0] != n or self.x2.shape[0] != n or self.y.shape != (n, 2):
            raise ValueError("x1, x2 and y must have one row per unit (y with two columns)")
        if n and (self.domain_index.min() < 0 or self.domain_index.max() >= len(self.domain_ids)):
            raise ValueError("domain_index out of range of the domain registry")
        for key in ("x1", "x2", "y"):
            if not np.all(np.isfinite(getattr(self, key))):
                raise ValueError(f"{key} has non-finite entries")
        return self

    @property
    def n(self) -> int:
        return self.domain_index.shape[0]

    @property
    def D(self) -> int:
        return len(self.domain_ids)

    @property
    def p1(self) -> int:
        return self.x1.shape[1]

    @property
    def p2(self) -> int:
        return self.x2.shape[1]

    @property
    def p(self) -> int:
        return self.p1 + self.p2

    @cached_property
    def n_d(self) -> np.ndarray:
        counts = np.bincount(self.domain_index, minlength=self.D)
        counts.flags.writeable = False
        return counts

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.n_d)])

    @cached_property
    def design(self) -> np.ndarray:
        """Per-unit 2 x p design matrices X_dj = diag(x_dj1, x_dj2)."""
        X = np.zeros((self.n, 2, self.p))
        X[:, 0, : self.p1] = self.x1
        X[:, 1, self.p1 :] = self.x2
        return X

    @cached_property
    def indicator(self) -> sps.csr_matrix:
        """Sparse D x n domain membership matrix; row sums are n_d."""
        return sps.csr_matrix(
            (np.ones(self.n), (self.domain_index, np.arange(self.n))),
            shape=(self.D, self.n),
        )

    def domain_rows(self, d: int) -> slice:
        return slice(int(self.offsets[d]), int(self.offsets[d + 1]))

    def domain_design(self, d: int) -> np.ndarray:
        """Stacked 2n_d x p design of domain d."""
        return self.design[self.domain_rows(d)].reshape(-1, self.p)

    def domain_response(self, d: int) -> np.ndarray:
        """Stacked 2n_d response vector of domain d."""
        return self.y[self.domain_rows(d)].reshape(-1)

    def reindexed(self, domain_ids: Sequence[str]) -> "SampleData":
        """Re-express the sample against another domain registry."""
        domain_ids = tuple(str(d) for d in domain_ids)
        position = {d: i for i, d in enumerate(domain_ids)}
        missing = [d for d in np.unique(np.asarray(self.domain_ids)[self.n_d > 0]) if d not in position]
        if missing:
            raise DataError(f"sample domains missing from the registry: {sorted(missing)}")
        mapping = np.array([position.get(d, -1) for d in self.domain_ids], dtype=np.int64)
        return SampleData(
            domain_ids=domain_ids,
            domain_index=mapping[self.domain_index] if self.n else self.domain_index,
            x1=self.x1,
            x2=self.x2,
            y=self.y,
        )

    def records(self) -> list[UnitRecord]:
        return [
            UnitRecord(
                domain_id=self.domain_ids[self.domain_index[i]],
                x1=self.x1[i].tolist(),
                x2=self.x2[i].tolist(),
                y1=float(self.y[i, 0]),
                y2=float(self.y[i, 1]),
            )
            for i in range(self.n)
        ]

    @classmethod
    def from_records(
        cls,
        records: Sequence[UnitRecord],
        domain_ids: Optional[Sequence[str]] = None,
    ) -> "SampleData":
        """
        Group UnitRecords by domain.

        Args:
            records: Sampled units; covariate rows must share lengths.
            domain_ids: Optional registry (may include unsampled domains).
                Defaults to the order of first appearance.
        """
        if domain_ids is None:
            domain_ids = list(dict.fromkeys(r.domain_id for r in records))
        domain_ids = [str(d) for d in domain_ids]
        position = {d: i for i, d in enumerate(domain_ids)}
        unknown = {r.domain_id for r in records} - set(position)
        if unknown:
            raise DataError(f"records reference unregistered domains: {sorted(unknown)}")
        p1 = len(records[0].x1) if records else 0
        p2 = len(records[0].x2) if records else 0
        if any(len(r.x1) != p1 or len(r.x2) != p2 for r in records):
            raise DataError(f"covariate rows must all have lengths p1={p1}, p2={p2}")
        return cls(
            domain_ids=domain_ids,
            domain_index=[position[r.domain_id] for r in records],
            x1=np.array([r.x1 for r in records], dtype=np.float64).reshape(len(records), p1),
            x2=np.array([r.x2 for r in records], dtype=np.float64).reshape(len(records), p2),
            y=np.array([[r.y1, r.y2] for r in records], dtype=np.float64).reshape(len(records), 2),
        )


class SampleAlignment(BaseModel):
    """A sample matched against the auxiliary pattern counts."""

    model_config = ArrayConfig

    sample: "SampleData"
    unit_pattern: np.ndarray
    n_dt: np.ndarray
    remaining: np.ndarray


class AuxCounts(BaseModel):
    """
    Aggregated auxiliary information: population counts N_dt of every
    categorical covariate pattern X_0t in every domain.
    """

    model_config = ArrayConfig

    domain_ids: tuple[str, ...]
    pattern_ids: tuple[str, ...]
    pattern_x1: np.ndarray
    pattern_x2: np.ndarray
    counts: np.ndarray

    @field_validator("domain_ids", "pattern_ids", mode="before")
    @classmethod
    def _as_ids(cls, value):
        return tuple(str(v) for v in value)

    @field_validator("pattern_x1", "pattern_x2", mode="before")
    @classmethod
    def _as_rows(cls, value, info):
        return _frozen(value, 2, name=info.field_name)

    @field_validator("counts", mode="before")
    @classmethod
    def _as_counts(cls, value):
        arr = np.asarray(value)
        if arr.ndim != 2 or not np.all(arr == np.round(arr)):
            raise ValueError("counts must be a 2-D array of integers")
        return _frozen(arr, 2, dtype=np.int64, name="counts")

    @model_validator(mode="after")
    def _check_layout(self):
        D, T = len(self.domain_ids), len(self.pattern_ids)
        if len(set(self.domain_ids)) != D:
            raise ValueError("domain ids must be unique")
        if len(set(self.pattern_ids)) != T:
            raise ValueError("pattern ids must be unique")
        if self.pattern_x1.shape[0] != T or self.pattern_x2.shape[0] != T:
            raise ValueError("one covariate row pair is required per pattern")
        if self.counts.shape != (D, T):
            raise ValueError(f"counts must have shape ({D}, {T}), got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if len(self.pattern_lookup) != T:
            raise ValueError("pattern covariate rows must be distinct")
        return self

    @property
    def D(self) -> int:
        return len(self.domain_ids)

    @property
    def T(self) -> int:
        return len(self.pattern_ids)

    @property
    def p1(self) -> int:
        return self.pattern_x1.shape[1]

    @property
    def p2(self) -> int:
        return self.pattern_x2.shape[1]

    @cached_property
    def N_d(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @cached_property
    def pattern_design(self) -> np.ndarray:
        """Pattern design matrices X_0t, shape (T, 2, p)."""
        p1, p2 = self.p1, self.p2
        X = np.zeros((self.T, 2, p1 + p2))
        X[:, 0, :p1] = self.pattern_x1
        X[:, 1, p1:] = self.pattern_x2
        return X

    @cached_property
    def pattern_lookup(self) -> dict[tuple[float, ...], int]:
        rows = np.hstack([self.pattern_x1, self.pattern_x2])
        return {tuple(row.tolist()): t for t, row in enumerate(rows)}

    def match_sample(self, sample: SampleData) -> SampleAlignment:
        """
        Match every sampled unit to exactly one pattern and tabulate n_dt.

        Raises:
            DataError: unknown domain, unmatched covariates, or N_dt < n_dt.
        """
        if sample.p1 != self.p1 or sample.p2 != self.p2:
            raise DataError(
                f"sample has (p1, p2) = ({sample.p1}, {sample.p2}) but patterns have "
                f"({self.p1}, {self.p2})"
            )
        aligned = sample.reindexed(self.domain_ids)
        lookup = self.pattern_lookup
        rows = np.hstack([aligned.x1, aligned.x2])
        unit_pattern = np.empty(aligned.n, dtype=np.int64)
        for i, row in enumerate(rows):
            t = lookup.get(tuple(row.tolist()))
            if t is None:
                domain = aligned.domain_ids[aligned.domain_index[i]]
                raise DataError(
                    f"sampled unit {i} of domain '{domain}' matches no registered covariate pattern"
                )
            unit_pattern[i] = t
        n_dt = np.zeros((self.D, self.T), dtype=np.int64)
        np.add.at(n_dt, (aligned.domain_index, unit_pattern), 1)
        short = np.argwhere(self.counts < n_dt)
        if short.size:
            d, t = short[0]
            raise DataError(
                f"N_dt < n_dt for domain '{self.domain_ids[d]}', pattern '{self.pattern_ids[t]}' "
                f"({self.counts[d, t]} < {n_dt[d, t]})"
            )
        unit_pattern.flags.writeable = False
        return SampleAlignment(
            sample=aligned,
            unit_pattern=unit_pattern,
            n_dt=n_dt,
            remaining=self.counts - n_dt,
        )

    @classmethod
    def from_population(
        cls,
        domain_ids: Sequence[str],
        x1: np.ndarray,
        x2: np.ndarray,
    ) -> "AuxCounts":
        """
        Build patterns and counts from a full population covariate file.

        Every distinct (x1, x2) row pair becomes a pattern; domains keep their
        order of first appearance.
        """
        domain_ids = [str(d) for d in domain_ids]
        x1 = np.asarray(x1, dtype=np.float64)
        x2 = np.asarray(x2, dtype=np.float64)
        registry = list(dict.fromkeys(domain_ids))
        position = {d: i for i, d in enumerate(registry)}
        rows, inverse = np.unique(np.hstack([x1, x2]), axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        counts = np.zeros((len(registry), rows.shape[0]), dtype=np.int64)
        np.add.at(counts, (np.array([position[d] for d in domain_ids]), inverse), 1)
        return cls(
            domain_ids=registry,
            pattern_ids=[str(t + 1) for t in range(rows.shape[0])],
            pattern_x1=rows[:, : x1.shape[1]],
            pattern_x2=rows[:, x1.shape[1] :],
            counts=counts,
        )


# ---------------------------------------------------------------------
# Options and results
# ---------------------------------------------------------------------


class FitOptions(BaseModel):
    """Fisher-scoring controls for REML fitting."""

    model_config = ConfigDict(frozen=True)

    max_iterations: int = Field(200, ge=1)
    rel_tolerance: float = Field(1e-8, gt=0)
    step_halving_max: int = Field(10, ge=0)
    init: Union[Literal["moment"], VarianceComponents] = "moment"


class FittedModel(BaseModel):
    """REML fit: estimates, GLS covariance, Fisher information and BLUPs."""

    model_config = ArrayConfig

    params: ModelParams
    beta_cov: np.ndarray
    theta_fisher_info: np.ndarray
    reml_loglik: float
    converged: bool
    iterations: int
    domain_ids: tuple[str, ...]
    blups: np.ndarray
    score: np.ndarray
    projection_events: int = 0
    boundary: tuple[str, ...] = ()
    n_domains_used: int = 0


class McOptions(BaseModel):
    """Monte Carlo controls for the EBP approximation."""

    model_config = ConfigDict(frozen=True)

    L: int = Field(200, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    antithetic: bool = False
    chunk_elements: int = Field(2_000_000, ge=2)


class BootstrapOptions(BaseModel):
    """Controls for the parametric bootstrap MSE estimator."""

    model_config = ConfigDict(frozen=True)

    B: int = Field(400, ge=1)
    L: int = Field(200, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    refit: bool = True
    antithetic: bool = False
    threads: int = Field(1, ge=1)
    fit: FitOptions = FitOptions()


class MseReport(BaseModel):
    """
    Bootstrap MSE estimates per domain and target.

    ``cross`` holds the full K x K cross-product matrix per domain; ``mse`` is
    its diagonal.
    """

    model_config = ArrayConfig

    domain_ids: tuple[str, ...]
    targets: tuple[str, ...]
    point: np.ndarray
    mse: np.ndarray
    cross: np.ndarray
    B_requested: int
    B_used: int
    n_failed: int
    reliable: bool

    @property
    def rrmse_pct(self) -> np.ndarray:
        """100 * sqrt(mse) / |point|, NaN where the point estimate is zero."""
        with np.errstate(divide="ignore", invalid="ignore"):
            out = 100.0 * np.sqrt(self.mse) / np.abs(self.point)
        return np.where(self.point != 0, out, np.nan)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        rrmse = self.rrmse_pct
        for d, domain in enumerate(self.domain_ids):
            for k, target in enumerate(self.targets):
                rows.append({
                    "domain_id": domain,
                    "target": target,
                    "estimate": self.point[d, k],
                    "mse": self.mse[d, k],
                    "rrmse_pct": rrmse[d, k],
                })
        return pd.DataFrame(rows, columns=["domain_id", "target", "estimate", "mse", "rrmse_pct"])


# Column roles of the per-domain estimate table: (direct, ebp).
ESTIMATE_COLUMNS = {
    "mean1": ("dir1", "ebp1"),
    "mean2": ("dir2", "ebp2"),
    "ratio_of_means": ("Rdir", "Rebp"),
    "mean_of_ratios": ("Addir", "Adebp"),
}


class DomainEstimates(BaseModel):
    """Per-domain direct and EBP estimates of the built-in targets."""

    model_config = ArrayConfig

    domain_ids: tuple[str, ...]
    n_d: np.ndarray
    N_d: np.ndarray
    direct: dict[str, np.ndarray]
    direct_mse: dict[str, np.ndarray]
    ebp: dict[str, np.ndarray]
    mse: Optional[dict[str, np.ndarray]] = None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "domain_id": list(self.domain_ids),
            "n_d": self.n_d,
            "N_d": self.N_d,
        })
        for target, (dir_col, ebp_col) in ESTIMATE_COLUMNS.items():
            if target not in self.ebp:
                continue
            frame[dir_col] = self.direct[target]
            frame[ebp_col] = self.ebp[target]
        for target, (dir_col, ebp_col) in ESTIMATE_COLUMNS.items():
            if target in self.direct_mse:
                frame[f"{dir_col}_mse"] = self.direct_mse[target]
            if self.mse is not None and target in self.mse:
                frame[f"{ebp_col}_mse"] = self.mse[target]
        return frame


# ---------------------------------------------------------------------
# API response models
# ---------------------------------------------------------------------


class ParameterRow(BaseModel):
    """One row of the fitted-parameter table."""

    parameter: str
    estimate: float
    std_error: Optional[float] = None
    z_value: Optional[float] = None
    p_value: Optional[float] = None
    lower_95: Optional[float] = None
    upper_95: Optional[float] = None


class FitResponse(BaseModel):
    """Summary of a REML fit."""

    converged: bool
    iterations: int
    reml_loglik: float
    boundary: list[str]
    parameters: list[ParameterRow]


class EstimateRow(BaseModel):
    """Per-domain estimates, named after the estimate table's columns."""

    domain_id: str
    n_d: int
    N_d: int
    values: dict[str, Optional[float]]


class PredictResponse(BaseModel):
    """Per-domain EBP and direct estimates."""

    transform: str
    L: int
    seed: int
    domains: list[EstimateRow]


class ErrorResponse(BaseModel):
    """Error response model."""

    detail: str
    error_type: Optional[str] = None


class TargetInfo(BaseModel):
    """A predictable domain parameter."""

    name: str
    kind: Literal["additive", "nonadditive"]
    description: str = ""


class TargetsResponse(BaseModel):
    """Built-in targets and response transforms."""

    targets: list[TargetInfo]
    transforms: list[str]
