"""
Design-based simulation harness.

The sim1 study measures the error of the EBPs of the mean of unit ratios and
the ratio of means over repeated populations drawn from a fixed covariate
design. The sim2 study measures the error of their bootstrap MSE estimators
against reference MSEs taken from a long sim1 run.
"""

import logging
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.bootstrap import bootstrap_deltas
from app.covariance import chol2
from app.ebp import ebp_table, law_from_alignment
from app.errors import BnerError
from app.models import (
    ArrayConfig,
    AuxCounts,
    BootstrapOptions,
    FitOptions,
    McOptions,
    ModelParams,
    RegressionCoefficients,
    SampleData,
    VarianceComponents,
)
from app.reml import fit_reml
from app.rng import BOOTSTRAP, DESIGN, DRAWS, SIM2_ITERATION, SIM_ITERATION, derive_seed, substream
from app.targets import MEAN_OF_RATIOS, RATIO_OF_MEANS
from app.transforms import LOG
from app.utils import map_ordered


logger = logging.getLogger(__name__)

SIM_TARGETS = (MEAN_OF_RATIOS, RATIO_OF_MEANS)

# The four covariate patterns: intercepts plus one Bernoulli dummy per response,
# indexed by 2 * x12 + x22.
PATTERN_X1 = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
PATTERN_X2 = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 0.0], [1.0, 1.0]])

DEFAULT_THETA = VarianceComponents(
    sigma2_u1=0.75, sigma2_u2=1.00, rho_u=-0.8,
    sigma2_e1=0.50, sigma2_e2=0.75, rho_e=0.8,
)

N_GRID = (10, 25, 50, 100)
B_GRID = (50, 100, 200, 300, 400)


class MetricsError(BnerError):
    """Metric inputs are inconsistent or a relative metric is undefined."""
    pass


class Sim1Config(BaseModel):
    """Population design and Monte Carlo sizes of the EBP accuracy study."""

    model_config = ConfigDict(frozen=True)

    D: int = Field(50, ge=1)
    N_d: int = Field(200, ge=1)
    n_d: int = Field(10, ge=1)
    I: int = Field(200, ge=1)
    L: int = Field(200, ge=1)
    beta: tuple[float, float, float, float] = (10.0, 10.0, 10.0, 10.0)
    theta: VarianceComponents = DEFAULT_THETA
    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=1)
    fit: FitOptions = FitOptions()

    @model_validator(mode="after")
    def _check_sizes(self):
        if self.n_d > self.N_d:
            raise ValueError(f"n_d ({self.n_d}) must not exceed N_d ({self.N_d})")
        return self

    @property
    def params(self) -> ModelParams:
        return ModelParams(
            beta=RegressionCoefficients(beta1=self.beta[:2], beta2=self.beta[2:]),
            theta=self.theta,
        )


class Sim2Config(Sim1Config):
    """EBP study design plus the bootstrap grid and the reference MSEs."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    B_grid: tuple[int, ...] = B_GRID
    refit: bool = True
    reference_I: Optional[int] = Field(None, ge=1)
    reference_mse: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check_reference(self):
        if not self.B_grid or min(self.B_grid) < 1:
            raise ValueError("B_grid must hold positive replicate counts")
        if self.reference_mse is not None and self.reference_mse.shape != (self.D, len(SIM_TARGETS)):
            raise ValueError(
                f"reference_mse must have shape ({self.D}, {len(SIM_TARGETS)}), "
                f"got {self.reference_mse.shape}"
            )
        return self


class Sim1Design(BaseModel):
    """Fixed covariate design: pattern of every population unit and the counts."""

    model_config = ArrayConfig

    aux: AuxCounts
    unit_pattern: np.ndarray

    def sample_counts(self, n_d: int) -> np.ndarray:
        """n_dt when the first n_d units of every domain are sampled."""
        T = self.aux.T
        return np.stack([np.bincount(row[:n_d], minlength=T) for row in self.unit_pattern])


class MetricsTable(BaseModel):
    """Per-domain and aggregate error metrics of one estimator."""

    model_config = ArrayConfig

    target: str = ""
    RE_d: np.ndarray
    B_d: np.ndarray
    eta_bar: np.ndarray
    RRE_d: np.ndarray
    RB_d: np.ndarray
    RE: float
    AB: float
    AB_mean: float
    RRE: float
    RAB: float

    def aggregates(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in ("RE", "AB", "AB_mean", "RRE", "RAB")}


class SimulationResult(BaseModel):
    """Metrics of every simulated target at one (D, n_d[, B]) setting."""

    model_config = ArrayConfig

    D: int
    n_d: int
    B: Optional[int] = None
    tables: dict[str, MetricsTable]
    iterations_used: int
    iterations_failed: int

    def reference_mse(self) -> np.ndarray:
        """MSE_d = RE_d^2 per target, shape (D, K)."""
        return np.column_stack([self.tables[t.name].RE_d ** 2 for t in SIM_TARGETS])


def compute_metrics(estimates: np.ndarray, truths: np.ndarray, target: str = "") -> MetricsTable:
    """
    RE_d, B_d, RRE_d, RB_d per domain and their aggregates from I x D arrays.

    AB is the sum of |B_d| over domains; AB_mean is their mean.

    Raises:
        MetricsError: on mismatched shapes, no iterations, or a zero mean truth.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if estimates.shape != truths.shape or estimates.ndim != 2:
        raise MetricsError(f"estimates {estimates.shape} and truths {truths.shape} must be matching I x D arrays")
    if estimates.shape[0] < 1:
        raise MetricsError("at least one iteration is required")
    diff = estimates - truths
    RE_d = np.sqrt(np.mean(diff**2, axis=0))
    B_d = np.mean(diff, axis=0)
    eta_bar = np.mean(truths, axis=0)
    if np.any(eta_bar == 0):
        zero = np.flatnonzero(eta_bar == 0).tolist()
        raise MetricsError(f"relative metrics undefined: zero mean truth in domains {zero}")
    RRE_d = 100.0 * RE_d / eta_bar
    RB_d = 100.0 * B_d / eta_bar
    return MetricsTable(
        target=target,
        RE_d=RE_d,
        B_d=B_d,
        eta_bar=eta_bar,
        RRE_d=RRE_d,
        RB_d=RB_d,
        RE=float(RE_d.mean()),
        AB=float(np.abs(B_d).sum()),
        AB_mean=float(np.abs(B_d).mean()),
        RRE=float(RRE_d.mean()),
        RAB=float(np.abs(RB_d).mean()),
    )


def generate_sim1_covariates(config: Sim1Config, rng: Optional[np.random.Generator] = None) -> Sim1Design:
    """
    Draw x12, x22 ~ Bin(1, 1/2) for every population unit and tabulate N_dt.

    The design depends only on (seed, D, N_d), so runs at different n_d share it.
    """
    rng = rng or substream(config.seed, DESIGN)
    x12 = rng.integers(0, 2, size=(config.D, config.N_d))
    x22 = rng.integers(0, 2, size=(config.D, config.N_d))
    unit_pattern = 2 * x12 + x22
    counts = np.stack([np.bincount(row, minlength=4) for row in unit_pattern])
    aux = AuxCounts(
        domain_ids=[str(d + 1) for d in range(config.D)],
        pattern_ids=["1", "2", "3", "4"],
        pattern_x1=PATTERN_X1,
        pattern_x2=PATTERN_X2,
        counts=counts,
    )
    return Sim1Design(aux=aux, unit_pattern=unit_pattern)


def _population(config: Sim1Config, design: Sim1Design, i: int, stream: int = SIM_ITERATION) -> np.ndarray:
    """Model-scale responses of iteration i of ``stream``, shape (D, N_d, 2)."""
    rng = substream(config.seed, stream, i)
    theta = config.theta
    u = rng.standard_normal((config.D, 2)) @ chol2(theta.v_u).T
    e = rng.standard_normal((config.D, config.N_d, 2)) @ chol2(theta.v_e).T
    fixed = design.aux.pattern_design @ config.params.beta.as_array()
    return fixed[design.unit_pattern] + u[:, None, :] + e


def _truths(y: np.ndarray) -> np.ndarray:
    z = LOG.inverse(y)
    return np.column_stack([
        MEAN_OF_RATIOS.h(z).mean(axis=1),
        RATIO_OF_MEANS.h(z),
    ])


def _sample(design: Sim1Design, y: np.ndarray, n_d: int) -> SampleData:
    D = y.shape[0]
    patterns = design.unit_pattern[:, :n_d].ravel()
    return SampleData(
        domain_ids=design.aux.domain_ids,
        domain_index=np.repeat(np.arange(D), n_d),
        x1=design.aux.pattern_x1[patterns],
        x2=design.aux.pattern_x2[patterns],
        y=y[:, :n_d].reshape(-1, 2),
    )


def _fit(config: Sim1Config, sample: SampleData, i: int, tag: str):
    try:
        fitted = fit_reml(sample, config.fit)
    except BnerError as exc:
        logger.warning("[%s] iteration %d: fit failed (%s); skipped", tag, i, exc)
        return None
    if not fitted.converged:
        logger.warning("[%s] iteration %d: fit did not converge; skipped", tag, i)
        return None
    return fitted


def run_sim1(config: Sim1Config, design: Optional[Sim1Design] = None) -> SimulationResult:
    """
    Repeat I times: draw a population, take the first n_d units of every
    domain, fit by REML and predict A_d and R_d; then score the EBPs against
    the population values.
    """
    design = design or generate_sim1_covariates(config)
    aux = design.aux

    def _iteration(i: int):
        y = _population(config, design, i)
        truth = _truths(y)
        sample = _sample(design, y, config.n_d)
        fitted = _fit(config, sample, i, "SIM1")
        if fitted is None:
            return None
        alignment = aux.match_sample(sample)
        law = law_from_alignment(fitted.params, alignment, aux)
        mc = McOptions(L=config.L, seed=derive_seed(config.seed, SIM_ITERATION, i, DRAWS))
        try:
            estimates = ebp_table(SIM_TARGETS, LOG, law, alignment, aux, mc)
        except BnerError as exc:
            logger.warning("[SIM1] iteration %d: prediction failed (%s); skipped", i, exc)
            return None
        return estimates, truth

    outcomes = map_ordered(_iteration, list(range(config.I)), config.threads)
    kept = [o for o in outcomes if o is not None]
    failed = config.I - len(kept)
    if not kept:
        raise MetricsError("every simulation iteration failed")
    estimates = np.stack([o[0] for o in kept])      # (I, D, K)
    truths = np.stack([o[1] for o in kept])
    tables = {
        t.name: compute_metrics(estimates[:, :, k], truths[:, :, k], t.name)
        for k, t in enumerate(SIM_TARGETS)
    }
    logger.info(
        "[SIM1] D=%d n_d=%d: %d iterations used, %d skipped; RE(A)=%.6f RE(R)=%.6f",
        config.D, config.n_d, len(kept), failed,
        tables[MEAN_OF_RATIOS.name].RE, tables[RATIO_OF_MEANS.name].RE,
    )
    return SimulationResult(
        D=config.D,
        n_d=config.n_d,
        tables=tables,
        iterations_used=len(kept),
        iterations_failed=failed,
    )


def run_sim1_grid(config: Sim1Config, n_values: Sequence[int] = N_GRID) -> list[SimulationResult]:
    """The EBP study at several sample sizes on one design and one set of populations."""
    fields = {name: getattr(config, name) for name in Sim1Config.model_fields}
    # validate every size before the first population is drawn
    configs = [Sim1Config(**{**fields, "n_d": int(n)}) for n in n_values]
    design = generate_sim1_covariates(config)
    return [run_sim1(c, design) for c in configs]


class Sim2Result(BaseModel):
    """Metrics of the bootstrap MSE estimators for every B of the grid."""

    model_config = ArrayConfig

    results: dict[int, SimulationResult]
    reference_mse: np.ndarray
    domain_ids: tuple[str, ...]


def _prefix_mse(deltas: np.ndarray, B: int) -> np.ndarray:
    head = deltas[:B]
    ok = ~np.any(np.isnan(head.reshape(head.shape[0], -1)), axis=1)
    if not ok.any():
        return np.full(head.shape[1:], np.nan)
    return np.mean(head[ok] ** 2, axis=0)


def run_sim2(config: Sim2Config) -> Sim2Result:
    """
    Repeat I times: draw a population and sample, fit, run one bootstrap of
    max(B_grid) replicates and read mse*_d at every B from its first B
    replicates; score mse*_d against MSE_d = RE_d^2 of the reference run.
    """
    design = generate_sim1_covariates(config)
    aux = design.aux
    reference = config.reference_mse
    if reference is None:
        base = Sim1Config(**{name: getattr(config, name) for name in Sim1Config.model_fields})
        if config.reference_I is not None:
            base = base.model_copy(update={"I": config.reference_I})
        logger.info("[SIM2] computing reference MSEs with sim1 (I=%d)", base.I)
        reference = run_sim1(base, design).reference_mse()

    grid = sorted(set(config.B_grid))
    B_max = grid[-1]

    def _iteration(i: int):
        y = _population(config, design, i, SIM2_ITERATION)
        sample = _sample(design, y, config.n_d)
        fitted = _fit(config, sample, i, "SIM2")
        if fitted is None:
            return None
        opts = BootstrapOptions(
            B=B_max,
            L=config.L,
            seed=derive_seed(config.seed, SIM2_ITERATION, i, BOOTSTRAP),
            refit=config.refit,
            fit=config.fit,
        )
        deltas = bootstrap_deltas(fitted, sample, aux, SIM_TARGETS, LOG, opts)
        mse = np.stack([_prefix_mse(deltas, B) for B in grid])     # (G, D, K)
        if np.any(np.isnan(mse)):
            logger.warning("[SIM2] iteration %d: no usable bootstrap replicates; skipped", i)
            return None
        logger.debug("[SIM2] iteration %d done", i)
        return mse

    outcomes = map_ordered(_iteration, list(range(config.I)), config.threads)
    kept = [o for o in outcomes if o is not None]
    failed = config.I - len(kept)
    if not kept:
        raise MetricsError("every simulation iteration failed")
    mse = np.stack(kept)                                           # (I, G, D, K)
    results = {}
    for g, B in enumerate(grid):
        tables = {}
        for k, t in enumerate(SIM_TARGETS):
            truth = np.broadcast_to(reference[:, k], mse[:, g, :, k].shape)
            tables[t.name] = compute_metrics(mse[:, g, :, k], truth, t.name)
        results[B] = SimulationResult(
            D=config.D,
            n_d=config.n_d,
            B=B,
            tables=tables,
            iterations_used=len(kept),
            iterations_failed=failed,
        )
        logger.info(
            "[SIM2] B=%d: RRE(A)=%.3f%% RAB(A)=%.3f%% RRE(R)=%.3f%% RAB(R)=%.3f%%",
            B,
            tables[MEAN_OF_RATIOS.name].RRE, tables[MEAN_OF_RATIOS.name].RAB,
            tables[RATIO_OF_MEANS.name].RRE, tables[RATIO_OF_MEANS.name].RAB,
        )
    return Sim2Result(results=results, reference_mse=reference, domain_ids=aux.domain_ids)


def metrics_frame(results: Sequence[SimulationResult]) -> pd.DataFrame:
    """Long table with columns D, n_d[, B], target, metric, value."""
    with_b = any(r.B is not None for r in results)
    rows = []
    for result in results:
        for name, table in result.tables.items():
            for metric, value in table.aggregates().items():
                row = {"D": result.D, "n_d": result.n_d}
                if with_b:
                    row["B"] = result.B
                row.update({"target": name, "metric": metric, "value": value})
                rows.append(row)
    columns = ["D", "n_d"] + (["B"] if with_b else []) + ["target", "metric", "value"]
    return pd.DataFrame(rows, columns=columns)


def boxplot_frame(sim2: Sim2Result) -> pd.DataFrame:
    """Per-domain RB_d and RRE_d of the MSE estimators, columns domain, B, target, RB_pct, RRE_pct."""
    rows = []
    for B, result in sim2.results.items():
        for name, table in result.tables.items():
            for d, domain in enumerate(sim2.domain_ids):
                rows.append({
                    "domain": domain,
                    "B": B,
                    "target": name,
                    "RB_pct": table.RB_d[d],
                    "RRE_pct": table.RRE_d[d],
                })
    return pd.DataFrame(rows, columns=["domain", "B", "target", "RB_pct", "RRE_pct"])
