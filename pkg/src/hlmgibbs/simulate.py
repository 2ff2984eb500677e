"""Data generation, MAR amputation and the Monte Carlo study loop.

Two generators produce complete datasets with the same regression truth
(every coefficient 1, intercept variance 4, residual variance 16; one
partially observable continuous covariate, one always-observed continuous
covariate, one binary covariate, interaction between the binary and the
first continuous):

* ``general-location``: the binary variable is Bernoulli(0.3) and both
  continuous covariates are normal given it, which matches the fitted
  covariate model exactly.
* ``latent-normal``: the binary variable is a thresholded latent normal
  correlated with the first continuous covariate given the second, so the
  fitted covariate model is deliberately misspecified.

Missingness is imposed per cluster from a logistic-normal probability
driven by the always-observed covariate: outcomes are amputed
observation-wise, covariates cluster-wise; the driver itself is never
amputed.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .diagnostics import summarize
from .errors import DomainError, HlmError, InputError
from .mlfit import fit_ml
from .model import Dataset, ModelSpec
from .rng import RngHandle
from .sampler import SamplerConfig, run

__all__ = [
    "SimScenario",
    "MetricsTable",
    "DEFAULT_MAR",
    "TRUE_VALUES",
    "scenario_spec",
    "gen_general_location",
    "gen_latent_normal",
    "ampute_mar",
    "run_study",
    "compute_metrics",
    "latent_normal_covariates",
]

log = logging.getLogger(__name__)

TRUE_TAU = 4.0
TRUE_SIGMA2 = 16.0
BINARY_RATE = 0.3
LATENT_THRESHOLD = 2.2

# per-variable (intercept, slope on the driver, logit-scale variance)
DEFAULT_MAR = {
    "y": (-1.9, 0.1, 1.0),
    "c1": (-2.2, -1.5, 0.0),
    "d1": (-2.0, 1.5, 0.0),
}

TRUE_VALUES = {
    "intercept": 1.0,
    "c1": 1.0,
    "c2": 1.0,
    "d1_1": 1.0,
    "c1:d1_1": 1.0,
    "tau": TRUE_TAU,
    "sigma2": TRUE_SIGMA2,
}


def scenario_spec() -> ModelSpec:
    """Model layout shared by both generators: p=2, binary d, c1 x d only."""
    return ModelSpec(
        p=2,
        q=1,
        levels=(2,),
        x_dim=0,
        interaction_mask=np.array([[True], [False]]),
    )


@dataclass
class SimScenario:
    """One Monte Carlo experiment: mechanism, sizes, missingness, runs."""

    mechanism: str = "general-location"
    J: int = 200
    n_j: int = 4
    replications: int = 200
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mar: Optional[dict] = None
    seed: int = 0

    def __post_init__(self):
        if self.mechanism not in ("general-location", "latent-normal"):
            raise DomainError(f"unknown mechanism {self.mechanism!r}")
        if self.J < 2:
            raise DomainError("a scenario needs at least 2 clusters")
        if self.n_j < 1 or self.replications < 1:
            raise DomainError("n_j and replications must be positive")
        if self.mar is None:
            self.mar = {k: tuple(v) for k, v in DEFAULT_MAR.items()}


@dataclass
class MetricsTable:
    """Per-parameter Monte Carlo metrics plus the raw estimates behind them."""

    estimator: str
    names: list
    truth: np.ndarray
    pct_bias: np.ndarray
    ase: np.ndarray
    ese: np.ndarray
    coverage: np.ndarray
    n_used: int
    n_failed: int
    estimates: np.ndarray  # (n_used, n_params)
    ses: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    psrf_ok_fraction: Optional[np.ndarray] = None  # per replication, sampler only


def _assemble(c1, c2, d, u, e, n_j) -> Dataset:
    J = d.size
    obs_cluster = np.repeat(np.arange(J), n_j)
    mean = (
        1.0
        + c1[obs_cluster]
        + d[obs_cluster]
        + c2[obs_cluster]
        + c1[obs_cluster] * d[obs_cluster]
    )
    y = mean + u[obs_cluster] + e
    zeros_c = np.zeros((J, 2), dtype=bool)
    zeros_d = np.zeros((J, 1), dtype=bool)
    return Dataset(
        y=y,
        y_missing=np.zeros(y.size, dtype=bool),
        c=np.column_stack([c1, c2]),
        c_missing=zeros_c,
        d=d.reshape(-1, 1).astype(int),
        d_missing=zeros_d,
        x=None,
        n_j=np.full(J, n_j, dtype=int),
    )


def gen_general_location(J: int, n_j: int, rng: RngHandle) -> Dataset:
    """Complete data with normal covariates given the binary variable."""
    gen = rng.generator
    d = (gen.random(J) < BINARY_RATE).astype(float)
    c2 = -0.5 + d + gen.standard_normal(J)
    c1 = 0.5 - 0.5 * c2 + 1.2 * d + gen.standard_normal(J)
    u = np.sqrt(TRUE_TAU) * gen.standard_normal(J)
    e = np.sqrt(TRUE_SIGMA2) * gen.standard_normal(J * n_j)
    return _assemble(c1, c2, d, u, e, n_j)


def latent_normal_covariates(J: int, rng: RngHandle):
    """Draw (c2, c1, latent) for the threshold generator; exposed for tests."""
    gen = rng.generator
    c2 = 2.0 + gen.standard_normal(J)
    mean = np.column_stack([0.75 + 0.7 * c2, -0.5 + c2])
    cov = np.array([[1.25, -0.5], [-0.5, 1.0]])
    chol = np.linalg.cholesky(cov)
    z = gen.standard_normal((J, 2))
    draws = mean + z @ chol.T
    return c2, draws[:, 0], draws[:, 1]


def gen_latent_normal(
    J: int, n_j: int, rng: RngHandle, threshold: float = LATENT_THRESHOLD
) -> Dataset:
    """Complete data where the binary variable thresholds a latent normal."""
    c2, c1, latent = latent_normal_covariates(J, rng)
    d = (latent > threshold).astype(float)
    gen = rng.generator
    u = np.sqrt(TRUE_TAU) * gen.standard_normal(J)
    e = np.sqrt(TRUE_SIGMA2) * gen.standard_normal(J * n_j)
    return _assemble(c1, c2, d, u, e, n_j)


def ampute_mar(
    dataset: Dataset,
    mar: Optional[dict] = None,
    rng: Optional[RngHandle] = None,
    driver: str = "c2",
) -> Dataset:
    """Set missingness flags from cluster-level logistic-normal probabilities.

    ``mar`` maps variable names ('y', continuous names, categorical names)
    to (intercept, slope, logit-variance).  One logit draw is made per
    cluster and variable; outcomes then flip a coin per observation while
    covariates flip one per cluster.  The driver covariate is untouched.
    """
    if mar is None:
        mar = DEFAULT_MAR
    if rng is None:
        raise DomainError("ampute_mar needs an RngHandle")
    spec = scenario_spec()
    c_names = spec.c_names
    d_names = spec.d_names
    if driver in mar:
        raise DomainError(f"the driver covariate {driver!r} cannot be amputed")
    driver_idx = c_names.index(driver)
    if dataset.c_missing[:, driver_idx].any():
        raise InputError(f"driver covariate {driver!r} must be fully observed")
    driver_vals = dataset.c[:, driver_idx]
    gen = rng.generator

    y = dataset.y.copy()
    y_missing = dataset.y_missing.copy()
    c = dataset.c.copy()
    c_missing = dataset.c_missing.copy()
    d = dataset.d.copy()
    d_missing = dataset.d_missing.copy()

    for name, (c0, c1, delta) in mar.items():
        if delta < 0:
            raise DomainError("the logit-scale variance must be non-negative")
        logits = c0 + c1 * driver_vals
        if delta > 0:
            logits = logits + np.sqrt(delta) * gen.standard_normal(dataset.J)
        probs = expit(logits)
        if name == "y":
            flips = gen.random(dataset.N) < probs[dataset.obs_cluster]
            y_missing |= flips
            y[y_missing] = np.nan
        elif name in c_names:
            col = c_names.index(name)
            flips = gen.random(dataset.J) < probs
            c_missing[:, col] |= flips
            c[c_missing[:, col], col] = np.nan
        elif name in d_names:
            col = d_names.index(name)
            flips = gen.random(dataset.J) < probs
            d_missing[:, col] |= flips
            d[d_missing[:, col], col] = 0
        else:
            raise DomainError(f"unknown variable {name!r} in the MAR settings")

    if not np.any(~y_missing):
        raise InputError("amputation removed every outcome value")
    return Dataset(
        y=y,
        y_missing=y_missing,
        c=c,
        c_missing=c_missing,
        d=d,
        d_missing=d_missing,
        x=dataset.x.copy() if dataset.x.size else None,
        n_j=dataset.n_j.copy(),
        cluster_ids=list(dataset.cluster_ids),
    )


_REPORT_PARAMS = list(TRUE_VALUES.keys())


def _generate(scenario: SimScenario, rng: RngHandle) -> Dataset:
    if scenario.mechanism == "general-location":
        return gen_general_location(scenario.J, scenario.n_j, rng)
    return gen_latent_normal(scenario.J, scenario.n_j, rng)


def _run_one_rep(scenario: SimScenario, rep: int, estimators: tuple) -> dict:
    """One replication; returns {estimator: {param: (est, se, lo, hi)}, ...}."""
    spec = scenario_spec()
    base = RngHandle(scenario.seed, (rep,))
    complete = _generate(scenario, base.substream(0))
    out: dict = {"rep": rep}

    if "cdml" in estimators:
        fit = fit_ml(complete, spec)
        z = norm.ppf(0.975)
        rows = {}
        for i, name in enumerate(fit.names):
            est, se = float(fit.beta_hat[i]), float(fit.se_beta[i])
            rows[name] = (est, se, est - z * se, est + z * se)
        rows["tau"] = (float(fit.tau_hat), np.nan, np.nan, np.nan)
        rows["sigma2"] = (float(fit.sigma2_hat), np.nan, np.nan, np.nan)
        out["cdml"] = rows

    if "gibbs" in estimators:
        amputed = ampute_mar(complete, scenario.mar, base.substream(1))
        store = run(amputed, spec, scenario.sampler, rng=base.substream(2))
        rows = {}
        psrf_vals = []
        for row in summarize(store):
            psrf_vals.append(row.psrf)
            if row.name in TRUE_VALUES:
                rows[row.name] = (
                    row.posterior_mean,
                    row.posterior_sd,
                    row.ci_lo,
                    row.ci_hi,
                )
        psrf_vals = np.asarray(psrf_vals)
        out["gibbs"] = rows
        out["psrf_ok"] = float(np.mean(psrf_vals <= 1.1))
    return out


def compute_metrics(
    estimator: str,
    names: list,
    truth: np.ndarray,
    estimates: np.ndarray,
    ses: np.ndarray,
    ci_lo: np.ndarray,
    ci_hi: np.ndarray,
    n_failed: int = 0,
    psrf_ok: Optional[np.ndarray] = None,
) -> MetricsTable:
    """Bias/ASE/ESE/coverage from raw per-replication estimates.

    Order of the replication rows does not matter.
    """
    est_mean = estimates.mean(axis=0)
    pct_bias = 100.0 * (est_mean - truth) / truth
    with np.errstate(invalid="ignore"):
        ase = np.nanmean(ses, axis=0)
        covered = (ci_lo <= truth[None, :]) & (truth[None, :] <= ci_hi)
        has_ci = ~np.isnan(ci_lo)
        coverage = np.where(
            has_ci.any(axis=0),
            np.nansum(covered & has_ci, axis=0) / np.maximum(has_ci.sum(axis=0), 1),
            np.nan,
        )
    ese = estimates.std(axis=0, ddof=1)
    return MetricsTable(
        estimator=estimator,
        names=list(names),
        truth=truth,
        pct_bias=pct_bias,
        ase=ase,
        ese=ese,
        coverage=coverage,
        n_used=estimates.shape[0],
        n_failed=n_failed,
        estimates=estimates,
        ses=ses,
        ci_lo=ci_lo,
        ci_hi=ci_hi,
        psrf_ok_fraction=psrf_ok,
    )


def run_study(
    scenario: SimScenario,
    estimators: tuple = ("cdml", "gibbs"),
    threads: int = 1,
    checkpoint_dir: Optional[str] = None,
    max_failure_rate: float = 0.02,
) -> dict:
    """Full Monte Carlo loop; returns {estimator: MetricsTable}.

    Replications use independent substreams keyed by their index, so
    results are identical whatever the execution order or parallelism,
    and a checkpointed run resumes without redoing finished replications.
    """
    results: dict[int, dict] = {}
    todo = []
    for rep in range(scenario.replications):
        cached = _load_checkpoint(checkpoint_dir, rep)
        if cached is not None and set(estimators) <= set(cached):
            results[rep] = cached
        else:
            todo.append(rep)

    failures = 0
    if threads > 1 and todo:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {
                rep: pool.submit(_run_one_rep, scenario, rep, tuple(estimators))
                for rep in todo
            }
            for rep in todo:
                try:
                    results[rep] = futures[rep].result()
                    _save_checkpoint(checkpoint_dir, rep, results[rep])
                except HlmError as exc:
                    failures += 1
                    log.warning("replication %d failed: %s", rep, exc)
    else:
        for rep in todo:
            try:
                results[rep] = _run_one_rep(scenario, rep, tuple(estimators))
                _save_checkpoint(checkpoint_dir, rep, results[rep])
            except HlmError as exc:
                failures += 1
                log.warning("replication %d failed: %s", rep, exc)

    if failures > max_failure_rate * scenario.replications:
        raise HlmError(
            f"{failures} of {scenario.replications} replications failed "
            f"(limit {max_failure_rate:.0%})"
        )

    names = _REPORT_PARAMS
    truth = np.array([TRUE_VALUES[n] for n in names])
    out = {}
    ordered = [results[r] for r in sorted(results)]
    for estimator in estimators:
        rows = [r[estimator] for r in ordered if estimator in r]
        est = np.array([[row[n][0] for n in names] for row in rows])
        ses = np.array([[row[n][1] for n in names] for row in rows])
        lo = np.array([[row[n][2] for n in names] for row in rows])
        hi = np.array([[row[n][3] for n in names] for row in rows])
        psrf_ok = (
            np.array([r["psrf_ok"] for r in ordered if "psrf_ok" in r])
            if estimator == "gibbs"
            else None
        )
        out[estimator] = compute_metrics(
            estimator, names, truth, est, ses, lo, hi, failures, psrf_ok
        )
    return out


def _checkpoint_path(checkpoint_dir: str, rep: int) -> str:
    return os.path.join(checkpoint_dir, f"rep_{rep:05d}.json")


def _load_checkpoint(checkpoint_dir: Optional[str], rep: int) -> Optional[dict]:
    if not checkpoint_dir:
        return None
    path = _checkpoint_path(checkpoint_dir, rep)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        raw = json.load(fh)
    out = {"rep": rep}
    for key, value in raw.items():
        if key == "psrf_ok":
            out[key] = value
        elif key != "rep":
            out[key] = {
                name: tuple(np.nan if v is None else v for v in tup)
                for name, tup in value.items()
            }
    return out


def _save_checkpoint(checkpoint_dir: Optional[str], rep: int, result: dict) -> None:
    if not checkpoint_dir:
        return
    os.makedirs(checkpoint_dir, exist_ok=True)
    payload = {}
    for key, value in result.items():
        if key == "psrf_ok":
            payload[key] = value
        elif key != "rep":
            payload[key] = {
                name: [None if (isinstance(v, float) and np.isnan(v)) else v for v in tup]
                for name, tup in value.items()
            }
    path = _checkpoint_path(checkpoint_dir, rep)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)
