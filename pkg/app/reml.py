"""
REML estimation of the bivariate nested error regression model.

The 2n_d x 2n_d covariance of a sampled domain is never formed. With
P = J_n / n and Q = I_n - P it splits as

    V_d = P (x) (V_e + n_d V_u) + Q (x) V_e,

and every operator the likelihood, score and Fisher information need is of
the same form P (x) M + Q (x) N. Such operators are carried as per-domain
pairs (M, N) of 2x2 matrices: products and inverses act pairwise, and the
quantities contracted against the design reduce to a handful of per-domain
sums (means, cross-products) accumulated once per sample.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from scipy import stats as sps_stats

from app.covariance import CovarianceError, build_cov2, cov2_derivatives
from app.errors import BnerError
from app.models import (
    THETA_NAMES,
    FitOptions,
    FittedModel,
    ModelParams,
    ParameterRow,
    RegressionCoefficients,
    SampleData,
    VarianceComponents,
)


logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
RANK_TOL = 1e-10
VARIANCE_FLOOR = 1e-10
RHO_BOUND = 1.0 - 1e-6
INIT_RHO_CLIP = 0.9
U_PARAMS = (0, 1, 2)


class FitError(BnerError):
    """The model cannot be fitted to the sample (too few observations, rank deficiency)."""
    pass


@dataclass(frozen=True)
class SufficientStats:
    """Per-domain sums over the sampled units of every domain with n_d >= 1."""

    domains: np.ndarray   # registry positions of the sampled domains
    n: np.ndarray         # (D,) sample sizes as floats
    Xbar: np.ndarray      # (D, 2, p) mean design
    K: np.ndarray         # (D, 2, 2, p, p) sum_j X_j[a]' X_j[b]
    Hy: np.ndarray        # (D, 2, 2, p) sum_j X_j[a]' y_jb
    ybar: np.ndarray      # (D, 2)
    Syy: np.ndarray       # (D, 2, 2) sum_j y_j y_j'
    n_obs: int
    p: int

    @classmethod
    def from_sample(cls, sample: SampleData) -> "SufficientStats":
        domains = np.flatnonzero(sample.n_d > 0)
        G = sample.indicator[domains]
        X, y, n, p = sample.design, sample.y, sample.n, sample.p
        counts = sample.n_d[domains].astype(np.float64)
        D = domains.shape[0]
        return cls(
            domains=domains,
            n=counts,
            Xbar=(G @ X.reshape(n, -1)).reshape(D, 2, p) / counts[:, None, None],
            K=(G @ np.einsum("jai,jbk->jabik", X, X).reshape(n, -1)).reshape(D, 2, 2, p, p),
            Hy=(G @ np.einsum("jai,jb->jabi", X, y).reshape(n, -1)).reshape(D, 2, 2, p),
            ybar=(G @ y) / counts[:, None],
            Syy=(G @ np.einsum("ja,jb->jab", y, y).reshape(n, -1)).reshape(D, 2, 2),
            n_obs=2 * n,
            p=p,
        )

    def residuals(self, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Domain mean residuals and residual cross-products at beta."""
        rbar = self.ybar - self.Xbar @ beta
        Hb = self.Hy @ beta                                   # (D, 2, 2)
        KbB = np.einsum("dabij,i,j->dab", self.K, beta, beta)
        Sr = self.Syy - Hb - np.swapaxes(Hb, 1, 2) + KbB
        return rbar, Sr


class RemlEvaluation(NamedTuple):
    loglik: float
    beta: np.ndarray
    beta_cov: np.ndarray
    score: Optional[np.ndarray] = None
    info: Optional[np.ndarray] = None


# ---------------------------------------------------------------------
# Pair algebra
# ---------------------------------------------------------------------


def _xt_pair_x(st: SufficientStats, M: np.ndarray, N: np.ndarray) -> np.ndarray:
    return (
        np.einsum("d,dai,dab,dbj->ij", st.n, st.Xbar, M - N, st.Xbar)
        + np.einsum("dab,dabij->ij", N, st.K)
    )


def _xt_pair_v(st: SufficientStats, M, N, vbar: np.ndarray, H: np.ndarray) -> np.ndarray:
    return (
        np.einsum("d,dai,dab,db->i", st.n, st.Xbar, M - N, vbar)
        + np.einsum("dab,dabi->i", N, H)
    )


def _quad(st: SufficientStats, M, N, vbar: np.ndarray, S: np.ndarray) -> float:
    return float(
        np.einsum("d,da,dab,db->", st.n, vbar, M - N, vbar)
        + np.einsum("dab,dab->", N, S)
    )


def _trace(st: SufficientStats, M, N) -> float:
    return float(np.einsum("daa->", M) + np.einsum("d,daa->", st.n - 1.0, N))


def _invert_normal(xvx: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvalsh(xvx)
    if eig[0] <= RANK_TOL * eig[-1]:
        raise FitError(
            f"design is rank deficient on the sampled units "
            f"(eigenvalue ratio {eig[0] / eig[-1]:.3e})"
        )
    C = np.linalg.inv(xvx)
    return 0.5 * (C + C.T)


def _derivative_pairs(theta: np.ndarray, st: SufficientStats) -> list[tuple[np.ndarray, np.ndarray]]:
    D = st.n.shape[0]
    zero = np.zeros((D, 2, 2))
    pairs = []
    for dU in cov2_derivatives(*theta[:3]):
        pairs.append((st.n[:, None, None] * dU, zero))
    for dE in cov2_derivatives(*theta[3:]):
        block = np.broadcast_to(dE, (D, 2, 2))
        pairs.append((block, block))
    return pairs


def _evaluate(theta: np.ndarray, st: SufficientStats, derivatives: bool = False) -> RemlEvaluation:
    """REML log-likelihood at theta, with score and Fisher information on request."""
    v_u = build_cov2(*theta[:3])
    v_e = build_cov2(*theta[3:])
    D = st.n.shape[0]
    A = v_e + st.n[:, None, None] * v_u
    sign_a, logdet_a = np.linalg.slogdet(A)
    sign_e, logdet_e = np.linalg.slogdet(v_e)
    if np.any(sign_a <= 0) or sign_e <= 0:
        raise CovarianceError("marginal covariance is not positive definite")
    A_inv = np.linalg.inv(A)
    E_inv = np.broadcast_to(np.linalg.inv(v_e), (D, 2, 2))

    xvx = _xt_pair_x(st, A_inv, E_inv)
    C = _invert_normal(xvx)
    beta = C @ _xt_pair_v(st, A_inv, E_inv, st.ybar, st.Hy)
    rbar, Sr = st.residuals(beta)
    quad = _quad(st, A_inv, E_inv, rbar, Sr)
    logdet_v = float(logdet_a.sum() + (st.n - 1.0).sum() * logdet_e)
    logdet_xvx = float(np.linalg.slogdet(xvx)[1])
    loglik = -0.5 * (logdet_v + logdet_xvx + quad) - 0.5 * (st.n_obs - st.p) * LOG_2PI
    if not derivatives:
        return RemlEvaluation(loglik, beta, C)

    # G_k = V^{-1} dV_k and W_k = G_k V^{-1}, pairwise.
    G = [(A_inv @ M, E_inv @ N) for M, N in _derivative_pairs(theta, st)]
    W = [(gM @ A_inv, gN @ E_inv) for gM, gN in G]
    Q = [_xt_pair_x(st, *w) for w in W]
    CQ = [C @ q for q in Q]

    k_dim = len(THETA_NAMES)
    score = np.empty(k_dim)
    info = np.empty((k_dim, k_dim))
    for k in range(k_dim):
        score[k] = -0.5 * (_trace(st, *G[k]) - np.trace(CQ[k]) - _quad(st, *W[k], rbar, Sr))
        for l in range(k, k_dim):
            gM = G[k][0] @ G[l][0]
            gN = G[k][1] @ G[l][1]
            t1 = _trace(st, gM, gN)
            t2 = np.trace(C @ _xt_pair_x(st, gM @ A_inv, gN @ E_inv))
            t3 = np.trace(CQ[k] @ CQ[l])
            info[k, l] = info[l, k] = 0.5 * (t1 - 2.0 * t2 + t3)
    return RemlEvaluation(loglik, beta, C, score, info)


def _check_sample(sample: SampleData) -> SufficientStats:
    if 2 * sample.n <= sample.p:
        raise FitError(f"need more than p={sample.p} observations, got {2 * sample.n}")
    return SufficientStats.from_sample(sample)


# ---------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------


def gls_beta(theta: VarianceComponents, sample: SampleData) -> tuple[RegressionCoefficients, np.ndarray]:
    """
    BLUE of beta at known theta and its covariance (X'V^{-1}X)^{-1}.

    Raises:
        FitError: if the normal matrix is singular within RANK_TOL.
    """
    ev = _evaluate(theta.as_array(), _check_sample(sample))
    return RegressionCoefficients.from_array(ev.beta, sample.p1), ev.beta_cov


def reml_loglik(theta: VarianceComponents, sample: SampleData) -> float:
    """REML log-likelihood (with the 2*pi constant) at theta."""
    return _evaluate(theta.as_array(), _check_sample(sample)).loglik


def reml_score_information(
    theta: VarianceComponents,
    sample: SampleData,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Log-likelihood, score vector and expected Fisher information at theta."""
    ev = _evaluate(theta.as_array(), _check_sample(sample), derivatives=True)
    return ev.loglik, ev.score, ev.info


def moment_init(sample: SampleData) -> VarianceComponents:
    """
    Starting values from per-response one-way ANOVA on OLS residuals.

    Correlations come from the domain-mean residuals (random effects) and the
    within-domain residuals (errors), clipped to [-0.9, 0.9].
    """
    resid = np.empty((sample.n, 2))
    for k, x in enumerate((sample.x1, sample.x2)):
        coef, *_ = np.linalg.lstsq(x, sample.y[:, k], rcond=None)
        resid[:, k] = sample.y[:, k] - x @ coef

    used = sample.n_d > 0
    n_d = sample.n_d[used].astype(np.float64)
    D_used = int(used.sum())
    n = float(sample.n)
    means = (sample.indicator[used] @ resid) / n_d[:, None]
    within = resid - means[np.searchsorted(np.flatnonzero(used), sample.domain_index)]
    grand = resid.mean(axis=0)

    ssw = (within**2).sum(axis=0)
    msw = ssw / (n - D_used) if n > D_used else resid.var(axis=0)
    msw = np.maximum(msw, VARIANCE_FLOOR * 1e4)
    if D_used > 1:
        ssb = (n_d[:, None] * (means - grand) ** 2).sum(axis=0)
        msb = ssb / (D_used - 1)
        n0 = (n - (n_d**2).sum() / n) / (D_used - 1)
        sigma_u = np.maximum((msb - msw) / n0, 0.01 * msw)
    else:
        sigma_u = 0.01 * msw

    def _corr(values: np.ndarray) -> float:
        if values.shape[0] < 3:
            return 0.0
        sd = values.std(axis=0)
        if np.any(sd <= 0):
            return 0.0
        r = float(np.corrcoef(values[:, 0], values[:, 1])[0, 1])
        return float(np.clip(r, -INIT_RHO_CLIP, INIT_RHO_CLIP)) if np.isfinite(r) else 0.0

    return VarianceComponents(
        sigma2_u1=float(sigma_u[0]),
        sigma2_u2=float(sigma_u[1]),
        rho_u=_corr(means),
        sigma2_e1=float(msw[0]),
        sigma2_e2=float(msw[1]),
        rho_e=_corr(within),
    )


def _project(theta: np.ndarray) -> tuple[np.ndarray, bool]:
    out = theta.copy()
    for k in (0, 1, 3, 4):
        out[k] = max(out[k], VARIANCE_FLOOR)
    for k in (2, 5):
        out[k] = min(max(out[k], -RHO_BOUND), RHO_BOUND)
    return out, bool(np.any(out != theta))


def _boundary(theta: np.ndarray) -> tuple[str, ...]:
    names = []
    for k, name in enumerate(THETA_NAMES):
        if k in (2, 5):
            if abs(theta[k]) >= RHO_BOUND:
                names.append(name)
        elif theta[k] <= VARIANCE_FLOOR:
            names.append(name)
    return tuple(names)


def fit_reml(sample: SampleData, opts: FitOptions = FitOptions()) -> FittedModel:
    """
    Fisher-scoring REML fit.

    Each step is projected back into the feasible region (variances >= 1e-10,
    |rho| <= 1 - 1e-6) and halved while the log-likelihood decreases. A fit is
    converged when the relative parameter change and the score norm both pass
    ``rel_tolerance``; fits ending on the feasibility boundary are flagged and
    never reported as converged.

    Raises:
        FitError: too few observations or a rank-deficient design.
    """
    st = _check_sample(sample)
    n_used = int(st.domains.shape[0])
    if n_used < 2:
        logger.warning("[REML] only %d sampled domain(s); variance components are poorly identified", n_used)

    theta0 = moment_init(sample) if opts.init == "moment" else opts.init
    theta, _ = _project(theta0.as_array())
    ev = _evaluate(theta, st, derivatives=True)
    tol = opts.rel_tolerance
    converged = False
    projections = 0
    iterations = 0

    for iterations in range(1, opts.max_iterations + 1):
        try:
            step = np.linalg.solve(ev.info, ev.score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(ev.info, ev.score, rcond=None)[0]

        accepted = None
        for halving in range(opts.step_halving_max + 1):
            candidate, projected = _project(theta + step / 2.0**halving)
            try:
                ll = _evaluate(candidate, st).loglik
            except (CovarianceError, FitError, np.linalg.LinAlgError):
                continue
            if ll >= ev.loglik - 1e-10 * (1.0 + abs(ev.loglik)):
                accepted = (candidate, projected)
                break
        if accepted is None:
            logger.warning("[REML] no ascent after %d step halvings at iteration %d", opts.step_halving_max, iterations)
            break

        candidate, projected = accepted
        projections += int(projected)
        change = np.max(np.abs(candidate - theta)) / (1.0 + np.max(np.abs(theta)))
        theta = candidate
        ev = _evaluate(theta, st, derivatives=True)
        if change <= tol and np.linalg.norm(ev.score) <= tol * (1.0 + abs(ev.loglik)):
            converged = True
            break

    boundary = _boundary(theta)
    if boundary:
        converged = False
        logger.warning("[REML] estimates on the feasibility boundary: %s", ", ".join(boundary))
    if projections:
        logger.warning("[REML] %d feasibility projection(s) during fitting", projections)
    if converged:
        logger.info("[REML] converged in %d iterations (loglik=%.6f)", iterations, ev.loglik)
    else:
        logger.warning("[REML] not converged after %d iterations (loglik=%.6f)", iterations, ev.loglik)

    params = ModelParams(
        beta=RegressionCoefficients.from_array(ev.beta, sample.p1),
        theta=VarianceComponents.from_array(theta),
    )
    return FittedModel(
        params=params,
        beta_cov=ev.beta_cov,
        theta_fisher_info=ev.info,
        reml_loglik=ev.loglik,
        converged=converged,
        iterations=iterations,
        domain_ids=sample.domain_ids,
        blups=blup_random_effects(params, sample),
        score=ev.score,
        projection_events=projections,
        boundary=boundary,
        n_domains_used=n_used,
    )


def blup_random_effects(params: ModelParams, sample: SampleData) -> np.ndarray:
    """
    BLUPs u_d = V_u Z_d' V_d^{-1} (y_d - X_d beta), shape (D, 2).

    The product collapses to n_d V_u (V_e + n_d V_u)^{-1} rbar_d; domains
    with no sampled units get zero.
    """
    out = np.zeros((sample.D, 2))
    if sample.n == 0:
        return out
    st = SufficientStats.from_sample(sample)
    v_u, v_e = params.theta.v_u, params.theta.v_e
    rbar, _ = st.residuals(params.beta.as_array())
    A = v_e + st.n[:, None, None] * v_u
    shift = st.n[:, None] * np.einsum("ab,dbc,dc->da", v_u, np.linalg.inv(A), rbar)
    out[st.domains] = shift
    return out


def parameter_table(fitted: FittedModel) -> list[ParameterRow]:
    """
    Estimates with Wald standard errors.

    Regression coefficients get z-values and two-sided p-values for H0: b = 0;
    every parameter gets a 95% interval estimate +- 1.96 se.
    """
    z975 = float(sps_stats.norm.ppf(0.975))
    rows = []
    beta = fitted.params.beta
    beta_se = np.sqrt(np.clip(np.diag(fitted.beta_cov), 0.0, None))
    names = [f"beta1_{i + 1}" for i in range(beta.p1)] + [f"beta2_{i + 1}" for i in range(beta.p2)]
    for name, est, se in zip(names, beta.as_array(), beta_se):
        z = est / se if se > 0 else np.nan
        rows.append(ParameterRow(
            parameter=name,
            estimate=float(est),
            std_error=float(se),
            z_value=float(z),
            p_value=float(2.0 * sps_stats.norm.sf(abs(z))),
            lower_95=float(est - z975 * se),
            upper_95=float(est + z975 * se),
        ))

    try:
        theta_cov = np.linalg.inv(fitted.theta_fisher_info)
        theta_se = np.sqrt(np.where(np.diag(theta_cov) > 0, np.diag(theta_cov), np.nan))
    except np.linalg.LinAlgError:
        theta_se = np.full(len(THETA_NAMES), np.nan)
    for name, est, se in zip(THETA_NAMES, fitted.params.theta.as_array(), theta_se):
        rows.append(ParameterRow(
            parameter=name,
            estimate=float(est),
            std_error=float(se),
            lower_95=float(est - z975 * se),
            upper_95=float(est + z975 * se),
        ))
    return rows


def _standardize(values: np.ndarray) -> np.ndarray:
    if values.shape[0] < 2:
        return np.zeros_like(values)
    sd = values.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    return (values - values.mean(axis=0)) / sd


def standardized_residuals(fitted: FittedModel, sample: SampleData) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Unit residuals y - X beta - u_d and domain BLUPs, each standardized per
    response (centered and scaled by the sample standard deviation).

    Returns:
        (unit residual frame, random effect frame); the second covers the
        sampled domains only.
    """
    sample = sample.reindexed(fitted.domain_ids)
    beta = fitted.params.beta.as_array()
    resid = sample.y - sample.design @ beta - fitted.blups[sample.domain_index]
    std = _standardize(resid)
    units = pd.DataFrame({
        "domain_id": [sample.domain_ids[d] for d in sample.domain_index],
        "e1": resid[:, 0],
        "e2": resid[:, 1],
        "std_e1": std[:, 0],
        "std_e2": std[:, 1],
    })

    used = np.flatnonzero(sample.n_d > 0)
    u = fitted.blups[used]
    std_u = _standardize(u)
    effects = pd.DataFrame({
        "domain_id": [sample.domain_ids[d] for d in used],
        "n_d": sample.n_d[used],
        "u1": u[:, 0],
        "u2": u[:, 1],
        "std_u1": std_u[:, 0],
        "std_u2": std_u[:, 1],
    })
    return units, effects
