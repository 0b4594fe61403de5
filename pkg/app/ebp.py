"""
Empirical best prediction of domain parameters.

Non-sampled units of a domain are exchangeable within a covariate pattern
under the conditional law, so every replicate draws N_dt - n_dt pairs per
pattern instead of one draw per unit id. Draws for (domain, pattern) come from
their own substream and are consumed in replicate order, so neither chunking
nor the thread count changes a result.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel

from app.covariance import CovarianceError, chol2
from app.errors import BnerError
from app.models import (
    ArrayConfig,
    AuxCounts,
    DomainEstimates,
    FittedModel,
    McOptions,
    ModelParams,
    SampleAlignment,
    SampleData,
)
from app.reml import blup_random_effects
from app.rng import DRAWS, standard_normal_block, substream
from app.targets import BUILTIN_ORDER, MEAN_OF_RATIOS, RATIO_OF_MEANS, TargetSpec, get_target
from app.transforms import Transform, transform_inverse
from app.utils import map_ordered


logger = logging.getLogger(__name__)


class PredictionError(BnerError):
    """The conditional law or a predictor cannot be evaluated."""
    pass


class ConditionalLaw(BaseModel):
    """
    Law of a non-sampled unit given the sample: N2(cond_mean[d, t], cond_cov[d]).

    ``cond_factor`` holds the lower Cholesky factor of each ``cond_cov``.
    """

    model_config = ArrayConfig

    domain_ids: tuple[str, ...]
    pattern_ids: tuple[str, ...]
    cond_cov: np.ndarray
    cond_factor: np.ndarray
    cond_mean: np.ndarray


def law_from_alignment(params: ModelParams, alignment: SampleAlignment, aux: AuxCounts) -> ConditionalLaw:
    """conditional_moments for a sample already matched against ``aux``."""
    v_u, v_e = params.theta.v_u, params.theta.v_e
    n = alignment.sample.n_d.astype(np.float64)
    A_inv = np.linalg.inv(v_e + n[:, None, None] * v_u)
    # V_u + V_e - n V_u (V_e + n V_u)^{-1} V_u; reduces to V_u + V_e when n = 0
    cov = v_u + v_e - n[:, None, None] * (v_u @ A_inv @ v_u)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    factor = np.empty_like(cov)
    for d, domain in enumerate(aux.domain_ids):
        try:
            factor[d] = chol2(cov[d])
        except CovarianceError as exc:
            raise PredictionError(
                f"conditional covariance of domain '{domain}' is not positive definite: {exc}"
            ) from exc
    fixed = aux.pattern_design @ params.beta.as_array()           # (T, 2)
    shift = blup_random_effects(params, alignment.sample)         # (D, 2)
    return ConditionalLaw(
        domain_ids=aux.domain_ids,
        pattern_ids=aux.pattern_ids,
        cond_cov=cov,
        cond_factor=factor,
        cond_mean=fixed[None, :, :] + shift[:, None, :],
    )


def conditional_moments(params: ModelParams, sample: SampleData, aux: AuxCounts) -> ConditionalLaw:
    """
    Conditional mean per (domain, pattern) and covariance per domain of the
    non-sampled responses.

    Raises:
        DataError: if the sample is inconsistent with the auxiliary counts.
        PredictionError: if a conditional covariance is not positive definite.
    """
    return law_from_alignment(params, aux.match_sample(sample), aux)


def draw_nonsample(
    law: ConditionalLaw,
    d: int,
    t: int,
    m: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """``m`` draws of a non-sampled unit of pattern t in domain d, shape (m, 2)."""
    if m < 1:
        raise PredictionError(f"draw count must be at least 1, got {m}")
    z = rng.standard_normal((m, 2))
    return law.cond_mean[d, t] + z @ law.cond_factor[d].T


def _chunk_size(mc: McOptions, units: int) -> int:
    size = max(1, mc.chunk_elements // max(2 * units, 1))
    if mc.antithetic:
        size = max(2, size - size % 2)
    return min(size, mc.L)


def _domain_values(
    d: int,
    targets: Sequence[TargetSpec],
    transform: Transform,
    law: ConditionalLaw,
    z_sample: np.ndarray,
    remaining: np.ndarray,
    mc: McOptions,
) -> np.ndarray:
    """EBPs of every target for one domain, shape (K,)."""
    N_d = int(z_sample.shape[0] + remaining.sum())
    if N_d == 0:
        raise PredictionError(f"domain '{law.domain_ids[d]}' has no population units")
    sample_terms = [target.h(z_sample).sum() if target.additive else None for target in targets]

    if remaining.sum() == 0:
        return np.array([
            term / N_d if target.additive else target.h(z_sample[None])[0]
            for target, term in zip(targets, sample_terms)
        ])

    patterns = np.flatnonzero(remaining)
    streams = {t: substream(mc.seed, DRAWS, d, t) for t in patterns}
    values = np.empty((len(targets), mc.L))
    chunk = _chunk_size(mc, N_d)
    needs_full = any(not t.additive for t in targets)

    for start in range(0, mc.L, chunk):
        size = min(chunk, mc.L - start)
        blocks = []
        for t in patterns:
            z = standard_normal_block(streams[t], size, int(remaining[t]), mc.antithetic)
            blocks.append(law.cond_mean[d, t] + z @ law.cond_factor[d].T)
        z_out = transform_inverse(transform, np.concatenate(blocks, axis=1))   # (size, m_d, 2)
        full = None
        if needs_full:
            full = np.concatenate(
                [np.broadcast_to(z_sample, (size,) + z_sample.shape), z_out], axis=1
            )
        for k, target in enumerate(targets):
            if target.additive:
                unit_sums = np.ascontiguousarray(target.h(z_out)).sum(axis=1)
                values[k, start : start + size] = (sample_terms[k] + unit_sums) / N_d
            else:
                values[k, start : start + size] = target.h(full)
    return values.mean(axis=1)


def ebp_table(
    targets: Sequence[TargetSpec],
    transform: Transform,
    law: ConditionalLaw,
    alignment: SampleAlignment,
    aux: AuxCounts,
    mc: McOptions,
    threads: int = 1,
) -> np.ndarray:
    """Monte Carlo EBPs of several targets from shared draws, shape (D, K)."""
    sample = alignment.sample
    z_all = transform_inverse(transform, sample.y) if sample.n else np.empty((0, 2))

    def _one(d: int) -> np.ndarray:
        return _domain_values(
            d, targets, transform, law, z_all[sample.domain_rows(d)], alignment.remaining[d], mc
        )

    rows = map_ordered(_one, list(range(aux.D)), threads)
    return np.vstack(rows) if rows else np.empty((0, len(targets)))


def _predict(target: TargetSpec, params, transform, sample, aux, mc) -> np.ndarray:
    alignment = aux.match_sample(sample)
    law = law_from_alignment(params, alignment, aux)
    return ebp_table([target], transform, law, alignment, aux, mc)[:, 0]


def ebp_additive(
    target: TargetSpec,
    transform: Transform,
    params: ModelParams,
    sample: SampleData,
    aux: AuxCounts,
    mc: McOptions = McOptions(),
) -> np.ndarray:
    """
    EBP of an additive target for every domain of ``aux``.

    The sample term sum_s h(z) is computed once per domain and reused across
    replicates.
    """
    if not target.additive:
        raise PredictionError(f"target '{target.name}' is not additive")
    estimates = _predict(target, params, transform, sample, aux, mc)
    logger.debug("[EBP] %s over %d domains (L=%d)", target.name, aux.D, mc.L)
    return estimates


def ebp_nonadditive(
    target: TargetSpec,
    params: ModelParams,
    transform: Transform,
    sample: SampleData,
    aux: AuxCounts,
    mc: McOptions = McOptions(),
) -> np.ndarray:
    """
    EBP of a domain-level function: the mean over replicates of h applied to
    the observed sample joined with fresh draws for the non-sampled units.
    """
    return _predict(target, params, transform, sample, aux, mc)


def ebp_ratio(
    params: ModelParams,
    transform: Transform,
    sample: SampleData,
    aux: AuxCounts,
    mc: McOptions = McOptions(),
) -> np.ndarray:
    """EBP of the ratio of domain means sum z1 / sum (z1 + z2)."""
    return ebp_nonadditive(RATIO_OF_MEANS, params, transform, sample, aux, mc)


def direct_estimates(
    sample: SampleData,
    transform: Transform,
    targets: Optional[Sequence[TargetSpec]] = None,
    allow_empty: bool = False,
) -> dict[str, np.ndarray]:
    """
    Unweighted sample analogues of each target.

    Domains without sampled units raise unless ``allow_empty``, in which case
    they get NaN.
    """
    targets = targets or [get_target(name) for name in BUILTIN_ORDER]
    z_all = transform_inverse(transform, sample.y) if sample.n else np.empty((0, 2))
    out = {t.name: np.full(sample.D, np.nan) for t in targets}
    for d, domain in enumerate(sample.domain_ids):
        n_d = int(sample.n_d[d])
        if n_d == 0:
            if allow_empty:
                continue
            raise PredictionError(f"direct estimator undefined for domain '{domain}' with no sampled units")
        z = z_all[sample.domain_rows(d)]
        for t in targets:
            out[t.name][d] = t.h(z).sum() / n_d if t.additive else t.h(z[None])[0]
    return out


def direct_mse(
    sample: SampleData,
    transform: Transform,
    N_d: Optional[np.ndarray] = None,
) -> dict[str, np.ndarray]:
    """
    Naive variance of the direct estimators of the built-in targets:
    s^2 / n_d (1 - n_d / N_d), with the finite population correction only when
    N_d is given. The ratio of means uses the linearized residuals
    (z1 - R (z1 + z2)) / mean(z1 + z2). Domains with n_d < 2 get NaN.
    """
    z_all = transform_inverse(transform, sample.y) if sample.n else np.empty((0, 2))
    names = list(BUILTIN_ORDER)
    out = {name: np.full(sample.D, np.nan) for name in names}
    for d in range(sample.D):
        n_d = int(sample.n_d[d])
        if n_d < 2:
            continue
        z = z_all[sample.domain_rows(d)]
        fpc = 1.0 - n_d / float(N_d[d]) if N_d is not None and N_d[d] > 0 else 1.0
        total = z.sum(axis=1)
        ratio = z[:, 0].sum() / total.sum()
        scores = {
            "mean1": z[:, 0],
            "mean2": z[:, 1],
            "mean_of_ratios": MEAN_OF_RATIOS.h(z),
            "ratio_of_means": (z[:, 0] - ratio * total) / total.mean(),
        }
        for name in names:
            out[name][d] = scores[name].var(ddof=1) / n_d * fpc
    return out


SHARE_TARGETS = (MEAN_OF_RATIOS.name, RATIO_OF_MEANS.name)


def log_share_range(table: np.ndarray, targets: Sequence[TargetSpec], domain_ids: Sequence[str]) -> int:
    """
    Log share estimates outside (0, 1) at debug level.

    Both shares lie inside the interval whenever z1, z2 > 0. Returns the
    number of flagged cells.
    """
    flagged = 0
    for k, target in enumerate(targets):
        if target.name not in SHARE_TARGETS:
            continue
        values = table[:, k]
        outside = np.flatnonzero(np.isfinite(values) & ((values <= 0) | (values >= 1)))
        for d in outside:
            logger.debug("[EBP] %s for domain %s is %.6g, outside (0, 1)", target.name, domain_ids[d], values[d])
        flagged += len(outside)
    return flagged


def predict_domains(
    fitted: FittedModel,
    sample: SampleData,
    aux: AuxCounts,
    transform: Transform,
    mc: McOptions = McOptions(),
    targets: Optional[Sequence[TargetSpec]] = None,
    threads: int = 1,
) -> DomainEstimates:
    """Direct and EBP estimates of the requested targets for every domain of ``aux``."""
    targets = list(targets or [get_target(name) for name in BUILTIN_ORDER])
    if not fitted.converged:
        logger.warning("[EBP] predicting from a non-converged fit")
    alignment = aux.match_sample(sample)
    law = law_from_alignment(fitted.params, alignment, aux)
    table = ebp_table(targets, transform, law, alignment, aux, mc, threads)
    log_share_range(table, targets, aux.domain_ids)
    aligned = alignment.sample
    logger.info("[EBP] %d targets over %d domains (L=%d, seed=%d)", len(targets), aux.D, mc.L, mc.seed)
    return DomainEstimates(
        domain_ids=aux.domain_ids,
        n_d=aligned.n_d,
        N_d=aux.N_d,
        direct=direct_estimates(aligned, transform, targets, allow_empty=True),
        direct_mse=direct_mse(aligned, transform, aux.N_d),
        ebp={t.name: table[:, k] for k, t in enumerate(targets)},
    )
