"""Convergence checks and posterior summaries.

PSRF follows Gelman & Rubin (1992): with m chains of length n, within
variance W (mean of per-chain sample variances) and between variance B
(n times the sample variance of chain means), the factor is
sqrt((((n - 1) / n) W + B / n) / W).  Chains are used unsplit.

Summaries pool all post-burn-in draws across chains.  The reported "se"
is the posterior standard deviation and the interval endpoints are the
2.5th/97.5th percentiles with linear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DiagnosticUnavailableError

__all__ = ["SummaryRow", "psrf", "summarize"]


@dataclass
class SummaryRow:
    name: str
    posterior_mean: float
    posterior_sd: float
    ci_lo: float
    ci_hi: float
    psrf: float


def psrf(chains: np.ndarray) -> float:
    """Potential scale reduction factor of one scalar across chains.

    ``chains`` is (n_chains, n_draws).  Returns ``inf`` when the chains
    are internally constant but disagree.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise DiagnosticUnavailableError("psrf needs at least two chains")
    m, n = chains.shape
    if n < 10:
        raise DiagnosticUnavailableError("psrf needs chains of length >= 10")
    means = chains.mean(axis=1)
    b = n * means.var(ddof=1)
    w = chains.var(axis=1, ddof=1).mean()
    if w == 0.0:
        if b == 0.0:
            return float(np.sqrt((n - 1) / n))
        return float(np.inf)
    v_hat = (n - 1) / n * w + b / n
    return float(np.sqrt(v_hat / w))


def summarize(store) -> list[SummaryRow]:
    """One row per scalar parameter from a ChainStore."""
    if store.draws.size == 0:
        raise DiagnosticUnavailableError("empty chain store")
    rows = []
    pooled = store.pooled()
    for idx, name in enumerate(store.names):
        series = pooled[:, idx]
        lo, hi = np.percentile(series, [2.5, 97.5])
        rows.append(
            SummaryRow(
                name=name,
                posterior_mean=float(series.mean()),
                posterior_sd=float(series.std(ddof=1)) if series.size > 1 else 0.0,
                ci_lo=float(lo),
                ci_hi=float(hi),
                psrf=psrf(store.draws[:, :, idx]) if store.n_chains >= 2 else float("nan"),
            )
        )
    return rows
