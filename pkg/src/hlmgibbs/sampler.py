"""Gibbs sweep orchestration: initialization, sweeps, chains, storage.

One sweep cycles through the ten exact-conditional updates in a fixed
order: random intercepts, their variance, regression coefficients,
residual variance, missing outcomes, covariate-model fixed effects and
covariance, cell probabilities, then missing continuous covariates
(variable by variable, each conditioning on the freshest values) and
finally missing categorical blocks drawn cell-wise.  Missing-covariate
updates condition on the parameters just drawn in the same sweep; the
categorical state used by all earlier steps is the previous sweep's.

Within a sweep all cluster-level draws come from the chain's single
stream in a fixed order, so a run is a deterministic function of
(seed, stream).  Chains use distinct substreams and can run anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, InputError, NumericalError
from .model import (
    Dataset,
    ModelSpec,
    ParamState,
    PriorSpec,
    admissible_cells,
    build_design_matrix,
    decode_cell,
    dummy_matrix,
    interaction_coef_matrix,
    w_matrix,
)
from .posteriors import (
    alpha_full_conditional,
    beta_full_conditional,
    c_conditional_coeffs,
    mvnormal_logpdf,
    pi_full_conditional,
    sigma2_full_conditional,
    t_full_conditional,
    tau_full_conditional,
    u_full_conditional,
)
from .rng import (
    RngHandle,
    sample_dirichlet,
    sample_inverse_gamma,
    sample_inverse_wishart,
    sample_mvnormal,
)

__all__ = [
    "SamplerConfig",
    "ChainStore",
    "init_state",
    "sweep",
    "run",
    "theta_names",
    "pack_params",
]


@dataclass
class SamplerConfig:
    """Chain lengths, thinning, seeding and storage switches."""

    burn_in: int = 2500
    post_burn: int = 2500
    n_chains: int = 2
    thin: int = 1
    seed: int = 0
    store_u: bool = False
    store_imputations: bool = False
    # diagnostic hook: freeze the random-intercept variance instead of
    # drawing it (used by stationarity checks on degenerate designs)
    fix_tau: Optional[float] = None

    def validate(self) -> None:
        if min(self.burn_in, self.post_burn, self.n_chains, self.thin) < 1:
            raise DomainError("burn_in, post_burn, n_chains and thin must all be >= 1")
        if self.post_burn % self.thin != 0:
            raise DomainError("post_burn must be a multiple of thin")


@dataclass
class ChainStore:
    """Post-burn-in draws for every chain.

    ``draws`` has shape (n_chains, kept, n_params) with scalar parameters
    ordered as in ``names``.  Optional blocks hold random intercepts and
    the imputed values of each missing slot (slot descriptors in
    ``c_slots``/``d_slots`` are (cluster, variable) pairs).
    """

    names: list
    draws: np.ndarray
    u_draws: Optional[np.ndarray] = None
    y_slots: Optional[np.ndarray] = None
    c_slots: Optional[np.ndarray] = None
    d_slots: Optional[np.ndarray] = None
    y_imp_draws: Optional[np.ndarray] = None
    c_imp_draws: Optional[np.ndarray] = None
    d_imp_draws: Optional[np.ndarray] = None

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def kept(self) -> int:
        return self.draws.shape[1]

    def pooled(self) -> np.ndarray:
        """All chains concatenated: (n_chains * kept, n_params)."""
        return self.draws.reshape(-1, self.draws.shape[2])

    def param(self, name: str) -> np.ndarray:
        """Per-chain series of one scalar parameter: (n_chains, kept)."""
        return self.draws[:, :, self.names.index(name)]


def theta_names(spec: ModelSpec) -> list:
    names = list(spec.design_names) + ["tau", "sigma2"] + list(spec.alpha_names)
    for r in range(spec.p):
        for s in range(r, spec.p):
            names.append(f"T_{spec.c_names[r]}_{spec.c_names[s]}")
    names += [f"pi_{d}" for d in range(spec.n_cells)]
    return names


def pack_params(state: ParamState, spec: ModelSpec) -> np.ndarray:
    t_upper = state.T[np.triu_indices(spec.p)]
    return np.concatenate(
        [state.beta, [state.tau, state.sigma2], state.alpha, t_upper, state.pi]
    )


def init_state(dataset: Dataset, spec: ModelSpec, rng: RngHandle) -> ParamState:
    """Deterministic-given-seed starting state.

    Missing continuous covariates start at the observed per-variable mean
    (zero when a variable is never observed), missing categorical entries
    are sampled from the observed marginal level frequencies (uniform when
    never observed), missing outcomes start at the observed grand mean.
    Coefficients start at zero apart from the intercept; both variance
    components start at half the observed outcome variance; the cell
    probabilities start at the prior-smoothed frequencies of the
    initialized cells.
    """
    dataset.validate_against(spec)
    gen = rng.generator
    y_obs = dataset.y[~dataset.y_missing]
    if y_obs.size == 0:
        raise InputError("cannot initialize: no observed outcome values")
    ybar = float(y_obs.mean())
    yvar = float(y_obs.var()) if y_obs.size > 1 else 1.0
    yvar = max(yvar, 1e-8)

    c_imp = dataset.c.copy()
    for r in range(spec.p):
        observed = ~dataset.c_missing[:, r]
        fill = float(dataset.c[observed, r].mean()) if observed.any() else 0.0
        c_imp[dataset.c_missing[:, r], r] = fill

    d_imp = dataset.d.copy()
    for k in range(spec.q):
        observed = ~dataset.d_missing[:, k]
        counts = np.bincount(dataset.d[observed, k], minlength=spec.levels[k]).astype(float)
        if counts.sum() == 0:
            counts[:] = 1.0
        probs = counts / counts.sum()
        missing_rows = np.where(dataset.d_missing[:, k])[0]
        if missing_rows.size:
            d_imp[missing_rows, k] = gen.choice(spec.levels[k], size=missing_rows.size, p=probs)

    y_imp = dataset.y.copy()
    y_imp[dataset.y_missing] = ybar

    beta = np.zeros(spec.n_coef)
    beta[0] = ybar

    priors = spec.priors.resolved(spec, dataset)
    complete = ~dataset.c_missing.any(axis=1) & ~dataset.d_missing.any(axis=1)
    alpha = np.zeros(spec.alpha_dim)
    for r in range(spec.p):
        source = dataset.c[complete, r] if complete.any() else c_imp[:, r]
        alpha[r * spec.w_dim] = float(source.mean()) if source.size else 0.0
    T = np.asarray(priors.iw_scale, dtype=float).copy()

    cells = (d_imp * spec._strides).sum(axis=1)
    a_post = pi_full_conditional(cells, priors.dirichlet_a)
    pi = a_post / a_post.sum()

    return ParamState(
        beta=beta,
        tau=yvar / 2.0,
        sigma2=yvar / 2.0,
        alpha=alpha,
        T=T,
        pi=pi,
        u=np.zeros(dataset.J),
        y_imp=y_imp,
        c_imp=c_imp,
        d_imp=d_imp,
    )


def _jitter_state(state: ParamState, rng: RngHandle) -> ParamState:
    """Overdisperse a starting state: coefficients and log-variances +/-50%."""
    gen = rng.generator
    state.beta = state.beta * (1.0 + gen.uniform(-0.5, 0.5, size=state.beta.size))
    state.tau = float(state.tau * np.exp(gen.uniform(-0.5, 0.5)))
    state.sigma2 = float(state.sigma2 * np.exp(gen.uniform(-0.5, 0.5)))
    return state


class _Workspace:
    """Static per-dataset structures reused across sweeps."""

    def __init__(self, dataset: Dataset, spec: ModelSpec):
        self.X = np.empty((dataset.N, spec.n_coef))
        self.starts = dataset.starts[:-1]
        # per continuous variable: clusters missing it and their observation rows
        self.c_updates = []
        for k in range(spec.p):
            js = np.where(dataset.c_missing[:, k])[0]
            if js.size == 0:
                self.c_updates.append(None)
                continue
            obs_pos = np.concatenate(
                [np.arange(dataset.starts[j], dataset.starts[j + 1]) for j in js]
            )
            rep_index = np.repeat(np.arange(js.size), dataset.n_j[js])
            self.c_updates.append((js, obs_pos, rep_index))
        # clusters with missing categorical entries, grouped by identical
        # admissible-cell sets (same observed pattern)
        self.d_groups = []
        patterns = {}
        for j in range(dataset.J):
            if not dataset.d_missing[j].any():
                continue
            key = tuple(dataset.d_partial(j))
            patterns.setdefault(key, []).append(j)
        for key, js in patterns.items():
            js = np.asarray(js, dtype=int)
            cells = admissible_cells(list(key), spec)
            levels = np.stack([decode_cell(int(cell), spec) for cell in cells])
            dums = dummy_matrix(levels, spec)
            obs_pos = np.concatenate(
                [np.arange(dataset.starts[j], dataset.starts[j + 1]) for j in js]
            )
            rep_index = np.repeat(np.arange(js.size), dataset.n_j[js])
            self.d_groups.append(
                {
                    "js": js,
                    "cells": cells,
                    "levels": levels,
                    "dums": dums,
                    "obs_pos": obs_pos,
                    "rep_index": rep_index,
                }
            )


def sweep(
    state: ParamState,
    dataset: Dataset,
    spec: ModelSpec,
    rng: RngHandle,
    priors: Optional[PriorSpec] = None,
    workspace: Optional[_Workspace] = None,
    fix_tau: Optional[float] = None,
) -> ParamState:
    """Advance the state by one full cycle (mutates and returns ``state``)."""
    if priors is None:
        priors = spec.priors.resolved(spec, dataset)
    if workspace is None:
        workspace = _Workspace(dataset, spec)
    gen = rng.generator
    starts = workspace.starts
    n_j = dataset.n_j.astype(float)

    X = build_design_matrix(
        state.c_imp, state.d_imp, dataset.x, dataset.obs_cluster, spec, out=workspace.X
    )

    # random intercepts
    resid = state.y_imp - X @ state.beta
    rsum = np.add.reduceat(resid, starts)
    u_mean, u_var = u_full_conditional(rsum, n_j, state.sigma2, state.tau)
    state.u = u_mean + np.sqrt(u_var) * gen.standard_normal(dataset.J)

    # intercept variance
    if fix_tau is None:
        sh, sc = tau_full_conditional(state.u, priors)
        state.tau = sample_inverse_gamma(sh, sc, rng)
    else:
        state.tau = float(fix_tau)

    # regression coefficients
    u_obs = state.u[dataset.obs_cluster]
    b_mean, b_cov = beta_full_conditional(
        X, state.y_imp, u_obs, state.sigma2, spec.design_names
    )
    state.beta = sample_mvnormal(b_mean, b_cov, rng)

    # residual variance
    fitted = X @ state.beta + u_obs
    errs = state.y_imp - fitted
    sh, sc = sigma2_full_conditional(errs, priors)
    state.sigma2 = sample_inverse_gamma(sh, sc, rng)

    # missing outcomes
    miss_y = dataset.y_missing
    if miss_y.any():
        state.y_imp[miss_y] = fitted[miss_y] + np.sqrt(state.sigma2) * gen.standard_normal(
            int(miss_y.sum())
        )

    # covariate-model fixed effects and covariance
    w = w_matrix(state.d_imp, spec)
    a_mean, a_cov = alpha_full_conditional(state.c_imp, w, state.T)
    state.alpha = sample_mvnormal(a_mean, a_cov, rng)
    dof, scale_inv = t_full_conditional(state.c_imp, w, state.alpha, priors)
    state.T = sample_inverse_wishart(dof, scale_inv, rng)

    # cell probabilities
    cells_now = (state.d_imp * spec._strides).sum(axis=1)
    state.pi = sample_dirichlet(pi_full_conditional(cells_now, priors.dirichlet_a), rng)

    # missing continuous covariates, then missing categorical blocks;
    # both need the residuals y - u - mean, maintained incrementally
    has_c = any(upd is not None for upd in workspace.c_updates)
    has_d = bool(workspace.d_groups)
    if has_c or has_d:
        resid = state.y_imp - u_obs - X @ state.beta
        rsum = np.add.reduceat(resid, starts)

    if has_c:
        a_mat = state.alpha.reshape(spec.p, spec.w_dim)
        wa = w @ a_mat.T
        dums = w[:, 1:]
        b_int = interaction_coef_matrix(state.beta, spec)
        beta_c = state.beta[spec.slice_c]
        for k in range(spec.p):
            upd = workspace.c_updates[k]
            if upd is None:
                continue
            js, obs_pos, rep_index = upd
            g, t_cond = c_conditional_coeffs(k, state.T)
            rest = [i for i in range(spec.p) if i != k]
            dev = state.c_imp[np.ix_(js, rest)] - wa[np.ix_(js, rest)]
            m_cond = wa[js, k] + dev @ g
            mu2 = beta_c[k] + dums[js] @ b_int[k]
            nj = n_j[js]
            prec = 1.0 / t_cond + nj * mu2**2 / state.sigma2
            c_old = state.c_imp[js, k]
            s1 = rsum[js] + nj * mu2 * c_old  # sum of y - u - mu1
            mean = m_cond + (mu2 / state.sigma2) * (s1 - nj * mu2 * m_cond) / prec
            c_new = mean + np.sqrt(1.0 / prec) * gen.standard_normal(js.size)
            state.c_imp[js, k] = c_new
            delta = mu2 * (c_new - c_old)
            rsum[js] -= nj * delta
            resid[obs_pos] -= delta[rep_index]

    if has_d:
        rsq = np.add.reduceat(resid * resid, starts)
        b_int = interaction_coef_matrix(state.beta, spec)
        beta_d = state.beta[spec.slice_d]
        a_mat = state.alpha.reshape(spec.p, spec.w_dim)
        dum_cur = dummy_matrix(state.d_imp, spec)
        log_pi = np.full(spec.n_cells, -np.inf)
        np.log(state.pi, out=log_pi, where=state.pi > 0)
        for group in workspace.d_groups:
            js = group["js"]
            cells = group["cells"]
            dums_cells = group["dums"]
            # cluster-level dummy contribution for each candidate cell
            v = beta_d[None, :] + state.c_imp[js] @ b_int  # (Jg, n_dummies)
            delta_cells = v @ dums_cells.T  # (Jg, n_cells_in_group)
            delta_cur = np.sum(v * dum_cur[js], axis=1)
            s1 = rsum[js] + n_j[js] * delta_cur
            s2 = rsq[js] + 2.0 * delta_cur * rsum[js] + n_j[js] * delta_cur**2
            ll_y = -0.5 * (
                s2[:, None] - 2.0 * delta_cells * s1[:, None] + n_j[js][:, None] * delta_cells**2
            ) / state.sigma2
            ll_c = np.empty_like(ll_y)
            for m in range(cells.size):
                w_cell = np.concatenate([[1.0], dums_cells[m]])
                ll_c[:, m] = mvnormal_logpdf(state.c_imp[js], a_mat @ w_cell, state.T)
            log_h = ll_y + ll_c + log_pi[cells][None, :]
            peak = log_h.max(axis=1, keepdims=True)
            if not np.all(np.isfinite(peak)):
                bad = js[~np.isfinite(peak[:, 0])][0]
                raise NumericalError(
                    f"all admissible cells of cluster {bad} have zero posterior mass"
                )
            probs = np.exp(log_h - peak)
            cum = np.cumsum(probs, axis=1)
            draws_u = gen.random(js.size) * cum[:, -1]
            picks = (draws_u[:, None] > cum).sum(axis=1).clip(0, cells.size - 1)
            state.d_imp[js] = group["levels"][picks]
            # keep residuals consistent for any later consumer in this sweep
            delta_new = np.take_along_axis(delta_cells, picks[:, None], axis=1)[:, 0]
            shift = delta_new - delta_cur
            rsum[js] -= n_j[js] * shift
            resid[group["obs_pos"]] -= shift[group["rep_index"]]

    return state


def run(
    dataset: Dataset,
    spec: ModelSpec,
    config: SamplerConfig,
    rng: Optional[RngHandle] = None,
) -> ChainStore:
    """Run ``config.n_chains`` independent chains and collect kept draws."""
    config.validate()
    dataset.validate_against(spec)
    if rng is None:
        rng = RngHandle(config.seed)
    priors = spec.priors.resolved(spec, dataset)
    workspace = _Workspace(dataset, spec)
    names = theta_names(spec)
    kept = config.post_burn // config.thin
    draws = np.empty((config.n_chains, kept, len(names)))
    u_draws = np.empty((config.n_chains, kept, dataset.J)) if config.store_u else None

    y_slots = np.where(dataset.y_missing)[0]
    c_slots = np.argwhere(dataset.c_missing)
    d_slots = np.argwhere(dataset.d_missing)
    store_imp = config.store_imputations
    y_imp_draws = np.empty((config.n_chains, kept, y_slots.size)) if store_imp else None
    c_imp_draws = np.empty((config.n_chains, kept, len(c_slots))) if store_imp else None
    d_imp_draws = (
        np.empty((config.n_chains, kept, len(d_slots)), dtype=int) if store_imp else None
    )

    for chain in range(config.n_chains):
        chain_rng = rng.substream(chain)
        state = init_state(dataset, spec, chain_rng)
        if chain > 0:
            state = _jitter_state(state, chain_rng)
        it = 0
        try:
            for it in range(config.burn_in):
                sweep(state, dataset, spec, chain_rng, priors, workspace, config.fix_tau)
            keep = 0
            for it in range(config.post_burn):
                sweep(state, dataset, spec, chain_rng, priors, workspace, config.fix_tau)
                if (it + 1) % config.thin == 0:
                    draws[chain, keep] = pack_params(state, spec)
                    if config.store_u:
                        u_draws[chain, keep] = state.u
                    if store_imp:
                        y_imp_draws[chain, keep] = state.y_imp[y_slots]
                        c_imp_draws[chain, keep] = state.c_imp[c_slots[:, 0], c_slots[:, 1]]
                        d_imp_draws[chain, keep] = state.d_imp[d_slots[:, 0], d_slots[:, 1]]
                    keep += 1
        except (NumericalError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"chain {chain} failed at iteration {it}: {exc}") from exc

    return ChainStore(
        names=names,
        draws=draws,
        u_draws=u_draws,
        y_slots=y_slots,
        c_slots=c_slots,
        d_slots=d_slots,
        y_imp_draws=y_imp_draws,
        c_imp_draws=c_imp_draws,
        d_imp_draws=d_imp_draws,
    )
