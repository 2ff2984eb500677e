"""Seeded random numbers and the distribution draws used by the sampler.

All randomness flows through :class:`RngHandle`, a thin wrapper around
numpy's PCG64 generator seeded through ``SeedSequence``.  Substreams are
derived from integer keys (replication, chain, ...) so that concurrent
workers get independent, reproducible streams.

Parameterization conventions, fixed once and used everywhere:

* ``sample_inverse_gamma(a, s)`` returns ``X`` with ``1/X ~ Gamma(shape=a,
  scale=s)``.  The second argument is the *scale of the reciprocal*, i.e.
  the inverse of the usual rate.  Callers that hold a conventional rate
  ``b`` pass ``1/b``.
* ``sample_inverse_wishart(dof, scale_inverse)`` takes the *inverse* of
  the inverse-Wishart scale matrix; the draw has mean
  ``inv(scale_inverse) / (dof - dim - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError

__all__ = [
    "RngHandle",
    "check_spd",
    "sample_normal",
    "sample_mvnormal",
    "sample_inverse_gamma",
    "sample_inverse_wishart",
    "sample_dirichlet",
    "sample_categorical",
]


@dataclass
class RngHandle:
    """A seeded random stream.

    Identical ``(seed, stream)`` pairs reproduce identical draw sequences.
    Distinct streams are independent PCG64 instances derived via
    ``SeedSequence`` spawn keys, so they do not overlap for any practical
    number of draws.  A handle is owned by one worker at a time.
    """

    seed: int
    stream: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, default=None)

    def __post_init__(self):
        if self.seed < 0:
            raise DomainError("seed must be a non-negative integer")
        self.stream = tuple(int(s) for s in self.stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def substream(self, *keys: int) -> "RngHandle":
        """Derive an independent handle keyed by extra integers."""
        return RngHandle(self.seed, self.stream + tuple(int(k) for k in keys))


def check_spd(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate symmetry and positive definiteness; return the Cholesky factor."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DomainError(f"{name} must be square, got shape {mat.shape}")
    scale = max(np.abs(mat).max(), 1.0)
    if np.abs(mat - mat.T).max() > 1e-12 * scale:
        raise DomainError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"{name} is not positive definite") from exc


def sample_normal(mean: float, variance: float, rng: RngHandle) -> float:
    if not variance > 0:
        raise DomainError(f"variance must be positive, got {variance}")
    return mean + np.sqrt(variance) * rng.generator.standard_normal()


def sample_mvnormal(mean: np.ndarray, cov: np.ndarray, rng: RngHandle) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    chol = check_spd(cov, "covariance")
    if mean.shape != (cov.shape[0],):
        raise DomainError(
            f"mean has length {mean.shape}, covariance is {cov.shape[0]}x{cov.shape[0]}"
        )
    z = rng.generator.standard_normal(mean.size)
    return mean + chol @ z


def sample_inverse_gamma(shape: float, scale_of_reciprocal: float, rng: RngHandle) -> float:
    if not shape > 0:
        raise DomainError(f"shape must be positive, got {shape}")
    if not scale_of_reciprocal > 0:
        raise DomainError(f"scale must be positive, got {scale_of_reciprocal}")
    g = rng.generator.gamma(shape, scale=scale_of_reciprocal)
    if g == 0.0:
        raise NumericalError("gamma draw underflowed to zero")
    return 1.0 / g


def sample_inverse_wishart(dof: float, scale_inverse: np.ndarray, rng: RngHandle) -> np.ndarray:
    """Draw an SPD matrix with mean ``inv(scale_inverse)/(dof - dim - 1)``.

    Uses the Bartlett decomposition of a Wishart(dof, scale_inverse) draw
    and inverts it, which keeps every draw exactly symmetric.
    """
    chol_v = check_spd(scale_inverse, "scale_inverse")
    dim = scale_inverse.shape[0]
    if not dof > dim + 1:
        raise DomainError(f"dof must exceed dim + 1 = {dim + 1}, got {dof}")
    gen = rng.generator
    a = np.zeros((dim, dim))
    for i in range(dim):
        a[i, i] = np.sqrt(gen.chisquare(dof - i))
        for j in range(i):
            a[i, j] = gen.standard_normal()
    # wishart draw W = (LA)(LA)^T with L = chol(scale_inverse)
    la = chol_v @ a
    w = la @ la.T
    try:
        draw = np.linalg.inv(w)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Wishart draw was singular") from exc
    return 0.5 * (draw + draw.T)


def sample_dirichlet(alphas: np.ndarray, rng: RngHandle) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim != 1 or alphas.size == 0:
        raise DomainError("alphas must be a non-empty vector")
    if not np.all(alphas > 0):
        raise DomainError("all Dirichlet parameters must be positive")
    draw = rng.generator.dirichlet(alphas)
    return draw / draw.sum()


def sample_categorical(probs: np.ndarray, rng: RngHandle) -> int:
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or probs.size == 0:
        raise DomainError("probs must be a non-empty vector")
    if np.any(probs < 0):
        raise DomainError("probabilities must be non-negative")
    total = probs.sum()
    if abs(total - 1.0) > 1e-9:
        raise DomainError(f"probabilities sum to {total}, not 1")
    cum = np.cumsum(probs)
    u = rng.generator.random() * cum[-1]
    return int(np.searchsorted(cum, u, side="right").clip(0, probs.size - 1))
