"""
Parametric bootstrap MSE of empirical best predictors.

Every replicate b regenerates a population from the fitted model, takes the
sample at the same per-pattern positions, re-estimates the model and compares
the bootstrap EBPs with the bootstrap population's true parameters.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel

from app.covariance import chol2
from app.ebp import law_from_alignment, ebp_table
from app.errors import BnerError
from app.models import (
    ArrayConfig,
    AuxCounts,
    BootstrapOptions,
    FittedModel,
    McOptions,
    ModelParams,
    MseReport,
    SampleData,
)
from app.reml import fit_reml
from app.rng import BOOTSTRAP, DRAWS, derive_seed, substream
from app.targets import TargetSpec
from app.transforms import Transform, transform_inverse
from app.utils import map_ordered


logger = logging.getLogger(__name__)

# Share of failed replicates above which a report is marked unreliable.
MAX_FAILURE_RATE = 0.10


class BootstrapPopulation(BaseModel):
    """
    A synthetic population on the model scale.

    Units are ordered by domain, then pattern; the first n_dt units of every
    (domain, pattern) group form the bootstrap sample.
    """

    model_config = ArrayConfig

    aux: AuxCounts
    u: np.ndarray
    y: np.ndarray
    unit_domain: np.ndarray
    unit_pattern: np.ndarray
    sampled: np.ndarray

    @property
    def N_d(self) -> np.ndarray:
        return np.bincount(self.unit_domain, minlength=self.aux.D)

    def sample_data(self) -> SampleData:
        rows = self.sampled
        return SampleData(
            domain_ids=self.aux.domain_ids,
            domain_index=self.unit_domain[rows],
            x1=self.aux.pattern_x1[self.unit_pattern[rows]],
            x2=self.aux.pattern_x2[self.unit_pattern[rows]],
            y=self.y[rows],
        )

    def true_values(self, targets: Sequence[TargetSpec], transform: Transform) -> np.ndarray:
        """Population parameters of every target per domain, shape (D, K)."""
        z = transform_inverse(transform, self.y)
        bounds = np.concatenate([[0], np.cumsum(self.N_d)])
        out = np.full((self.aux.D, len(targets)), np.nan)
        for d in range(self.aux.D):
            z_d = z[bounds[d] : bounds[d + 1]]
            if z_d.shape[0] == 0:
                continue
            for k, target in enumerate(targets):
                out[d, k] = target.h(z_d).mean() if target.additive else target.h(z_d[None])[0]
        return out


def _generate(params: ModelParams, aux: AuxCounts, n_dt: np.ndarray, rng: np.random.Generator) -> BootstrapPopulation:
    D, T = aux.D, aux.T
    sizes = aux.counts.ravel()
    group = np.repeat(np.arange(D * T), sizes)
    unit_domain = group // T
    unit_pattern = group % T
    starts = np.concatenate([[0], np.cumsum(sizes)])[:-1]
    position = np.arange(group.shape[0]) - starts[group]
    sampled = position < n_dt.ravel()[group]

    u = rng.standard_normal((D, 2)) @ chol2(params.theta.v_u).T
    e = rng.standard_normal((group.shape[0], 2)) @ chol2(params.theta.v_e).T
    fixed = aux.pattern_design @ params.beta.as_array()
    y = fixed[unit_pattern] + u[unit_domain] + e
    return BootstrapPopulation(
        aux=aux,
        u=u,
        y=y,
        unit_domain=unit_domain,
        unit_pattern=unit_pattern,
        sampled=sampled,
    )


def generate_bootstrap_population(
    params: ModelParams,
    aux: AuxCounts,
    sample: SampleData,
    rng: np.random.Generator,
) -> BootstrapPopulation:
    """
    Draw u*_d ~ N2(0, V_u) for every domain, then e* ~ N2(0, V_e) and
    y* = X_0t beta + u*_d + e* for each of the N_dt units of every pattern.
    """
    return _generate(params, aux, aux.match_sample(sample).n_dt, rng)


def bootstrap_deltas(
    fitted: FittedModel,
    sample: SampleData,
    aux: AuxCounts,
    targets: Sequence[TargetSpec],
    transform: Transform,
    opts: BootstrapOptions,
) -> np.ndarray:
    """
    Per-replicate EBP errors, shape (B, D, K); rows of failed replicates are NaN.
    """
    n_dt = aux.match_sample(sample).n_dt
    fit_opts = opts.fit.model_copy(update={"init": fitted.params.theta})

    def _replicate(b: int) -> np.ndarray:
        population = _generate(fitted.params, aux, n_dt, substream(opts.seed, BOOTSTRAP, b))
        failed = np.full((aux.D, len(targets)), np.nan)
        params = fitted.params
        try:
            truth = population.true_values(targets, transform)
            boot_sample = population.sample_data()
            if opts.refit:
                refit = fit_reml(boot_sample, fit_opts)
                if not refit.converged:
                    logger.warning("[BOOT] replicate %d: refit did not converge; skipped", b)
                    return failed
                params = refit.params
            alignment = aux.match_sample(boot_sample)
            law = law_from_alignment(params, alignment, aux)
            mc = McOptions(L=opts.L, seed=derive_seed(opts.seed, BOOTSTRAP, b, DRAWS), antithetic=opts.antithetic)
            estimates = ebp_table(targets, transform, law, alignment, aux, mc)
        except BnerError as exc:
            logger.warning("[BOOT] replicate %d failed: %s", b, exc)
            return failed
        return estimates - truth

    deltas = map_ordered(_replicate, list(range(opts.B)), opts.threads)
    return np.stack(deltas)


def report_from_deltas(
    deltas: np.ndarray,
    point: np.ndarray,
    domain_ids: Sequence[str],
    targets: Sequence[TargetSpec],
) -> MseReport:
    """Average the replicate cross-products (delta delta') of the successful replicates."""
    B = deltas.shape[0]
    failed = np.any(np.isnan(deltas.reshape(B, -1)), axis=1)
    kept = deltas[~failed]
    n_failed = int(failed.sum())
    K = len(targets)
    if kept.shape[0]:
        cross = np.einsum("bdk,bdl->dkl", kept, kept) / kept.shape[0]
    else:
        cross = np.full((len(domain_ids), K, K), np.nan)
    reliable = kept.shape[0] > 0 and n_failed <= MAX_FAILURE_RATE * B
    if not reliable:
        logger.warning("[BOOT] %d of %d replicates failed; MSE report is unreliable", n_failed, B)
    return MseReport(
        domain_ids=tuple(domain_ids),
        targets=tuple(t.name for t in targets),
        point=point,
        mse=np.diagonal(cross, axis1=1, axis2=2).copy(),
        cross=cross,
        B_requested=B,
        B_used=int(kept.shape[0]),
        n_failed=n_failed,
        reliable=reliable,
    )


def bootstrap_mse(
    fitted: FittedModel,
    sample: SampleData,
    aux: AuxCounts,
    targets: Sequence[TargetSpec],
    transform: Transform,
    opts: BootstrapOptions = BootstrapOptions(),
    point: Optional[np.ndarray] = None,
) -> MseReport:
    """
    Parametric bootstrap MSE of the EBPs of ``targets``.

    Args:
        fitted: Fit on the original sample; its estimates drive the bootstrap world.
        point: EBPs on the original sample, shape (D, K). Computed with
            (opts.L, opts.seed) when omitted.

    Returns:
        MseReport with per-domain K x K cross-product matrices.
    """
    targets = list(targets)
    if not fitted.converged:
        logger.warning("[BOOT] bootstrapping a non-converged fit")
    if point is None:
        alignment = aux.match_sample(sample)
        law = law_from_alignment(fitted.params, alignment, aux)
        mc = McOptions(L=opts.L, seed=opts.seed, antithetic=opts.antithetic)
        point = ebp_table(targets, transform, law, alignment, aux, mc, opts.threads)
    logger.info("[BOOT] %d replicates (L=%d, refit=%s, threads=%d)", opts.B, opts.L, opts.refit, opts.threads)
    deltas = bootstrap_deltas(fitted, sample, aux, targets, transform, opts)
    return report_from_deltas(deltas, point, aux.domain_ids, targets)
