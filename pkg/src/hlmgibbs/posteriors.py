"""Closed-form full conditionals for every unknown of the model.

Each function returns the parameters of an exact conditional distribution
given everything else (data completed by the current imputations).  They
are pure, accept plain arrays, and are shared by the sweep loop and the
test oracles.

Notation used in docstrings: for cluster j with n_j observations, the
regression mean is affine in any single continuous covariate c_k, so it
splits as ``mu1_ij + mu2_j * c_kj`` where mu2 collects the main effect of
c_k plus its retained interactions with the cluster's dummies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DomainError, NumericalError, RankDeficiencyError
from .model import (
    ModelSpec,
    PriorSpec,
    admissible_cells,
    build_design_row,
    decode_cell,
    dummy_code,
    interaction_coef_matrix,
    w_matrix,
)

__all__ = [
    "ConditionalMoments",
    "CSlopeSplit",
    "CPosterior",
    "CellPosterior",
    "conditional_c_moments",
    "split_mean_for_ck",
    "c_full_conditional",
    "d_cell_posterior",
    "u_full_conditional",
    "tau_full_conditional",
    "beta_full_conditional",
    "sigma2_full_conditional",
    "impute_y",
    "alpha_full_conditional",
    "t_full_conditional",
    "pi_full_conditional",
    "mvnormal_logpdf",
    "c_conditional_coeffs",
]


@dataclass
class ConditionalMoments:
    """Mean and variance of one continuous covariate given the others."""

    m_cond: float
    t_cond: float


@dataclass
class CSlopeSplit:
    """Regression mean split into the part excluding c_k and its slope.

    ``mu1`` is per observation (it carries the level-1 covariates and the
    random effect); ``mu2`` is constant within the cluster.
    """

    mu1: np.ndarray
    mu2: float


@dataclass
class CPosterior:
    """Normal full conditional of a missing continuous covariate."""

    mean: float
    precision: float

    @property
    def variance(self) -> float:
        return 1.0 / self.precision


@dataclass
class CellPosterior:
    """Cell probabilities of a cluster's missing categorical block."""

    cells: np.ndarray
    log_h: np.ndarray
    probs: np.ndarray


def _logsumexp(v: np.ndarray) -> float:
    m = np.max(v)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


def mvnormal_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log density of rows of ``x`` under N(mean, cov); mean may be a matrix."""
    x = np.atleast_2d(x)
    mean = np.atleast_2d(mean)
    try:
        factor = cho_factor(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance factorization failed") from exc
    dev = (x - mean).T
    solved = cho_solve(factor, dev)
    quad = np.sum(dev * solved, axis=0)
    logdet = 2.0 * np.log(np.diag(factor[0])).sum()
    dim = cov.shape[0]
    return -0.5 * (dim * np.log(2.0 * np.pi) + logdet + quad)


def c_conditional_coeffs(k: int, T: np.ndarray) -> tuple[np.ndarray, float]:
    """Schur pieces for component k of N(., T): regression weights on the
    remaining components and the conditional variance."""
    T = np.asarray(T, dtype=float)
    p = T.shape[0]
    if not 0 <= k < p:
        raise DomainError(f"component {k} out of range for a {p}-variate model")
    rest = [i for i in range(p) if i != k]
    if not rest:
        return np.zeros(0), float(T[k, k])
    sub = T[np.ix_(rest, rest)]
    try:
        factor = cho_factor(sub, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("sub-block of T is not positive definite") from exc
    g = cho_solve(factor, T[rest, k])
    t_cond = float(T[k, k] - T[rest, k] @ g)
    if t_cond <= 0:
        raise NumericalError("conditional variance is not positive")
    return g, t_cond


def conditional_c_moments(
    k: int,
    c_rest: np.ndarray,
    d_levels: np.ndarray,
    alpha: np.ndarray,
    T: np.ndarray,
    spec: ModelSpec,
) -> ConditionalMoments:
    """Gaussian conditional of continuous covariate k given the other p-1.

    The joint is N(W a, T) with W = I_p kron [1, dummies], so the
    conditional mean shifts the cell mean by the Schur regression of the
    observed deviations.
    """
    g, t_cond = c_conditional_coeffs(k, T)
    w = np.concatenate([[1.0], dummy_code(d_levels, spec)])
    means = np.asarray(alpha, dtype=float).reshape(spec.p, spec.w_dim) @ w
    rest = [i for i in range(spec.p) if i != k]
    c_rest = np.asarray(c_rest, dtype=float)
    if c_rest.shape != (spec.p - 1,):
        raise DomainError(f"expected {spec.p - 1} conditioning values, got {c_rest.shape}")
    m = float(means[k] + g @ (c_rest - means[rest]))
    return ConditionalMoments(m_cond=m, t_cond=t_cond)


def split_mean_for_ck(
    k: int,
    c: np.ndarray,
    d_levels: np.ndarray,
    x_rows: np.ndarray,
    beta: np.ndarray,
    u_j: float,
    spec: ModelSpec,
) -> CSlopeSplit:
    """Split the cluster's regression means into mu1 + mu2 * c_k.

    mu2 is the main-effect coefficient of c_k plus its interaction row
    applied to the cluster's dummies; mu1 is the full mean evaluated with
    c_k set to zero (it keeps the dummy main effects, the level-1 terms
    and the random intercept).
    """
    beta = np.asarray(beta, dtype=float)
    dum = dummy_code(d_levels, spec)
    b_int = interaction_coef_matrix(beta, spec)
    mu2 = float(beta[spec.slice_c][k] + b_int[k] @ dum)
    c0 = np.asarray(c, dtype=float).copy()
    c0[k] = 0.0
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=float))
    mu1 = np.array(
        [build_design_row(c0, d_levels, xr, spec) @ beta + u_j for xr in x_rows]
    )
    return CSlopeSplit(mu1=mu1, mu2=mu2)


def c_full_conditional(
    k: int,
    y_j: np.ndarray,
    c: np.ndarray,
    d_levels: np.ndarray,
    x_rows: np.ndarray,
    beta: np.ndarray,
    u_j: float,
    sigma2: float,
    alpha: np.ndarray,
    T: np.ndarray,
    spec: ModelSpec,
) -> CPosterior:
    """Exact posterior of one missing continuous covariate.

    Precision is the covariate-model conditional precision plus n_j times
    the squared slope over the residual variance; the mean shifts the
    conditional mean by the precision-weighted outcome evidence.
    """
    if not sigma2 > 0:
        raise DomainError("sigma2 must be positive")
    mom = conditional_c_moments(k, np.delete(np.asarray(c, float), k), d_levels, alpha, T, spec)
    split = split_mean_for_ck(k, c, d_levels, x_rows, beta, u_j, spec)
    y_j = np.asarray(y_j, dtype=float)
    n_j = y_j.size
    precision = 1.0 / mom.t_cond + n_j * split.mu2**2 / sigma2
    shift = (split.mu2 / sigma2) * np.sum(y_j - (split.mu1 + split.mu2 * mom.m_cond))
    mean = mom.m_cond + shift / precision
    return CPosterior(mean=float(mean), precision=float(precision))


def d_cell_posterior(
    y_j: np.ndarray,
    c_j: np.ndarray,
    d_partial: list,
    x_rows: np.ndarray,
    beta: np.ndarray,
    u_j: float,
    sigma2: float,
    alpha: np.ndarray,
    T: np.ndarray,
    pi: np.ndarray,
    spec: ModelSpec,
) -> CellPosterior:
    """Posterior over the admissible cells of a cluster's categorical block.

    Every admissible cell's unnormalized log mass combines the outcome
    likelihood, the covariate-model density of c_j given the cell, and the
    cell probability; normalization is done with log-sum-exp.
    """
    cells = admissible_cells(d_partial, spec)
    y_j = np.asarray(y_j, dtype=float)
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=float))
    log_h = np.empty(cells.size)
    a_mat = np.asarray(alpha, dtype=float).reshape(spec.p, spec.w_dim)
    for idx, cell in enumerate(cells):
        d_full = decode_cell(int(cell), spec)
        mean_y = np.array(
            [build_design_row(c_j, d_full, xr, spec) @ beta + u_j for xr in x_rows]
        )
        ll_y = -0.5 * np.sum((y_j - mean_y) ** 2) / sigma2 - 0.5 * y_j.size * np.log(
            2.0 * np.pi * sigma2
        )
        w = np.concatenate([[1.0], dummy_code(d_full, spec)])
        ll_c = float(mvnormal_logpdf(c_j, a_mat @ w, T)[0])
        with np.errstate(divide="ignore"):
            ll_d = np.log(pi[cell])
        log_h[idx] = ll_y + ll_c + ll_d
    norm = _logsumexp(log_h)
    if not np.isfinite(norm):
        raise NumericalError("all admissible cells have zero posterior mass")
    probs = np.exp(log_h - norm)
    probs /= probs.sum()
    return CellPosterior(cells=cells, log_h=log_h, probs=probs)


def u_full_conditional(resid_sum, n_j, sigma2: float, tau: float):
    """Random-intercept conditional: mean and variance (array friendly).

    ``resid_sum`` is the per-cluster sum of y - X beta.
    """
    prec = np.asarray(n_j, dtype=float) / sigma2 + 1.0 / tau
    var = 1.0 / prec
    mean = var * np.asarray(resid_sum, dtype=float) / sigma2
    return mean, var


def tau_full_conditional(u: np.ndarray, priors: PriorSpec) -> tuple[float, float]:
    """Inverse-gamma parameters (shape, scale-of-reciprocal) for tau."""
    u = np.asarray(u, dtype=float)
    shape = u.size / 2.0 + priors.ig_shape
    rate = np.sum(u**2) / 2.0 + 1.0 / priors.ig_scale
    return shape, 1.0 / rate


def sigma2_full_conditional(resid: np.ndarray, priors: PriorSpec) -> tuple[float, float]:
    """Inverse-gamma parameters for the level-1 variance given residuals."""
    resid = np.asarray(resid, dtype=float)
    shape = resid.size / 2.0 + priors.ig_shape
    rate = np.sum(resid**2) / 2.0 + 1.0 / priors.ig_scale
    return shape, 1.0 / rate


def beta_full_conditional(
    X: np.ndarray,
    y: np.ndarray,
    u_per_obs: np.ndarray,
    sigma2: float,
    names=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Flat-prior Gaussian conditional of the regression coefficients."""
    X = np.asarray(X, dtype=float)
    gram = X.T @ X
    rhs = X.T @ (np.asarray(y, float) - np.asarray(u_per_obs, float))
    try:
        factor = cho_factor(gram, lower=True)
    except np.linalg.LinAlgError:
        raise _rank_error(X, names)
    mean = cho_solve(factor, rhs)
    cov = sigma2 * cho_solve(factor, np.eye(gram.shape[0]))
    return mean, 0.5 * (cov + cov.T)


def _rank_error(X: np.ndarray, names) -> RankDeficiencyError:
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    tol = s.max() * max(X.shape) * np.finfo(float).eps if s.size else 0.0
    null = vt[s <= tol] if s.size else vt
    cols = sorted({int(i) for row in null for i in np.where(np.abs(row) > 1e-8)[0]})
    labels = [names[i] if names else f"col{i}" for i in cols]
    return RankDeficiencyError(
        f"design matrix is rank deficient; dependent columns: {', '.join(labels) or 'unknown'}",
        columns=labels,
    )


def impute_y(
    design_row: np.ndarray,
    beta: np.ndarray,
    u_j: float,
    sigma2: float,
    rng,
) -> float:
    """Draw one missing outcome: regression mean plus N(0, sigma2) noise."""
    from .rng import sample_normal

    mean = float(np.asarray(design_row, float) @ np.asarray(beta, float) + u_j)
    return sample_normal(mean, sigma2, rng)


def alpha_full_conditional(
    c_mat: np.ndarray,
    w_mat: np.ndarray,
    T: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Flat-prior GLS conditional of the covariate-model fixed effects.

    With the shared per-cluster design w_j = [1, dummies], the information
    matrix is kron(inv(T), sum w w') and the posterior mean reduces to
    per-component least squares, independent of T.
    """
    c_mat = np.atleast_2d(np.asarray(c_mat, dtype=float))
    w_mat = np.atleast_2d(np.asarray(w_mat, dtype=float))
    gram = w_mat.T @ w_mat
    try:
        factor = cho_factor(gram, lower=True)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(
            "covariate-model information matrix is singular "
            "(some dummy column is constant across clusters)"
        )
    gram_inv = cho_solve(factor, np.eye(gram.shape[0]))
    mean = cho_solve(factor, w_mat.T @ c_mat)  # (w_dim, p), column r per component
    cov = np.kron(np.asarray(T, dtype=float), gram_inv)
    return mean.T.reshape(-1), 0.5 * (cov + cov.T)


def t_full_conditional(
    c_mat: np.ndarray,
    w_mat: np.ndarray,
    alpha: np.ndarray,
    priors: PriorSpec,
) -> tuple[float, np.ndarray]:
    """Inverse-Wishart parameters (dof, inverse scale) for T."""
    c_mat = np.atleast_2d(np.asarray(c_mat, dtype=float))
    w_mat = np.atleast_2d(np.asarray(w_mat, dtype=float))
    p = c_mat.shape[1]
    a_mat = np.asarray(alpha, dtype=float).reshape(p, w_mat.shape[1])
    resid = c_mat - w_mat @ a_mat.T
    scale = np.asarray(priors.iw_scale, dtype=float) + resid.T @ resid
    try:
        scale_inv = np.linalg.inv(scale)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("accumulated scale matrix is singular") from exc
    return priors.iw_dof + c_mat.shape[0], 0.5 * (scale_inv + scale_inv.T)


def pi_full_conditional(cells: np.ndarray, prior_a: np.ndarray) -> np.ndarray:
    """Dirichlet parameters: prior counts plus observed cell counts."""
    prior_a = np.asarray(prior_a, dtype=float)
    counts = np.bincount(np.asarray(cells, dtype=int), minlength=prior_a.size)
    if counts.size > prior_a.size:
        raise DomainError("cell index exceeds the number of cells")
    return prior_a + counts
