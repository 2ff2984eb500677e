"""Data model: model layout, datasets with missingness, parameter state.

The regression mean for observation ``i`` in cluster ``j`` is

    y_ij = b0 + b_c' c_j + b_d' dummy(d_j) + b_x' x_ij
           + sum over retained (continuous, dummy) pairs of interaction terms
           + u_j + e_ij

Categorical variables enter as reference-coded dummies (level 0 dropped).
The interaction block pairs every retained dummy of categorical variable k
with continuous variable r whenever ``interaction_mask[r, k]`` is set;
masked pairs are removed from the design entirely, so the coefficient
vector only ever contains free parameters.

Categorical level combinations are flattened to cells of a contingency
table with the last variable varying fastest; ``encode_cell`` /
``decode_cell`` implement the bijection and ``admissible_cells`` lists the
cells consistent with a partially observed level vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, InputError

__all__ = [
    "ModelSpec",
    "PriorSpec",
    "Dataset",
    "ParamState",
    "encode_cell",
    "decode_cell",
    "admissible_cells",
    "build_design_row",
    "build_design_matrix",
    "dummy_code",
    "dummy_matrix",
    "w_matrix",
    "interaction_coef_matrix",
]


@dataclass
class PriorSpec:
    """Prior hyperparameters; unset matrix pieces are resolved from data.

    ``ig_shape``/``ig_scale`` are shared by both variance components.  The
    inverse-Wishart prior on the covariance of the continuous covariates
    uses ``iw_dof`` (default p + 2) and scale ``iw_scale`` (default: the
    complete-case covariance estimate, identity fallback).  Cell
    probabilities get a flat Dirichlet (all ones).
    """

    ig_shape: float = 1.0
    ig_scale: float = 0.5
    iw_dof: Optional[float] = None
    iw_scale: Optional[np.ndarray] = None
    dirichlet_a: Optional[np.ndarray] = None

    def resolved(self, spec: "ModelSpec", dataset: "Dataset") -> "PriorSpec":
        """Fill data-dependent defaults for a concrete model and dataset."""
        iw_dof = self.iw_dof if self.iw_dof is not None else spec.p + 2.0
        if self.iw_scale is not None:
            iw_scale = np.asarray(self.iw_scale, dtype=float)
        else:
            iw_scale = _complete_case_cov(spec, dataset)
        a = (
            np.asarray(self.dirichlet_a, dtype=float)
            if self.dirichlet_a is not None
            else np.ones(spec.n_cells)
        )
        if a.shape != (spec.n_cells,) or not np.all(a > 0):
            raise DomainError("dirichlet_a must be positive with one entry per cell")
        if not iw_dof > spec.p + 1:
            raise DomainError(f"iw_dof must exceed p + 1 = {spec.p + 1}")
        return PriorSpec(self.ig_shape, self.ig_scale, iw_dof, iw_scale, a)


def _complete_case_cov(spec: "ModelSpec", dataset: "Dataset") -> np.ndarray:
    complete = ~dataset.c_missing.any(axis=1) & ~dataset.d_missing.any(axis=1)
    if complete.sum() >= spec.p + 2:
        cov = np.cov(dataset.c[complete], rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        # guard against degenerate complete-case spread
        if np.all(np.isfinite(cov)) and np.all(np.linalg.eigvalsh(cov) > 1e-10):
            return cov
    return np.eye(spec.p)


class ModelSpec:
    """Dimensions, dummy/interaction layout and priors of the model."""

    def __init__(
        self,
        p: int,
        q: int,
        levels: Sequence[int],
        x_dim: int = 0,
        interaction_mask: Optional[np.ndarray] = None,
        priors: Optional[PriorSpec] = None,
        c_names: Optional[Sequence[str]] = None,
        d_names: Optional[Sequence[str]] = None,
        x_names: Optional[Sequence[str]] = None,
    ):
        if p < 1:
            raise DomainError("at least one continuous covariate is required")
        if q < 1:
            raise DomainError("at least one categorical covariate is required")
        levels = tuple(int(L) for L in levels)
        if len(levels) != q or any(L < 2 for L in levels):
            raise DomainError("levels must list one count >= 2 per categorical variable")
        if x_dim < 0:
            raise DomainError("x_dim must be non-negative")
        if interaction_mask is None:
            interaction_mask = np.ones((p, q), dtype=bool)
        interaction_mask = np.asarray(interaction_mask, dtype=bool)
        if interaction_mask.shape != (p, q):
            raise DomainError(f"interaction_mask must be {p}x{q}")

        self.p = p
        self.q = q
        self.levels = levels
        self.x_dim = x_dim
        self.interaction_mask = interaction_mask
        self.priors = priors if priors is not None else PriorSpec()

        self.n_cells = int(np.prod(levels))
        if self.n_cells < 2:
            raise DomainError("the contingency table must have at least 2 cells")
        # mixed-radix strides, last variable fastest
        self._strides = np.ones(q, dtype=int)
        for k in range(q - 2, -1, -1):
            self._strides[k] = self._strides[k + 1] * levels[k + 1]

        self.c_names = list(c_names) if c_names else [f"c{r + 1}" for r in range(p)]
        self.d_names = list(d_names) if d_names else [f"d{k + 1}" for k in range(q)]
        self.x_names = list(x_names) if x_names else [f"x{m + 1}" for m in range(x_dim)]
        if len(self.c_names) != p or len(self.d_names) != q or len(self.x_names) != x_dim:
            raise DomainError("covariate name lists do not match dimensions")

        # dummy layout: (variable, level) per retained dummy column
        self.dummy_index: list[tuple[int, int]] = [
            (k, lvl) for k in range(q) for lvl in range(1, levels[k])
        ]
        self.n_dummies = len(self.dummy_index)
        # interaction layout: (continuous r, dummy position h) per retained column
        self.interaction_index: list[tuple[int, int]] = [
            (r, h)
            for h, (k, _lvl) in enumerate(self.dummy_index)
            for r in range(p)
            if interaction_mask[r, k]
        ]

        names = ["intercept"]
        names += self.c_names
        names += [f"{self.d_names[k]}_{lvl}" for k, lvl in self.dummy_index]
        names += self.x_names
        for r, h in self.interaction_index:
            k, lvl = self.dummy_index[h]
            names.append(f"{self.c_names[r]}:{self.d_names[k]}_{lvl}")
        self.design_names = names
        self.n_coef = len(names)

        self.slice_c = slice(1, 1 + p)
        self.slice_d = slice(1 + p, 1 + p + self.n_dummies)
        self.slice_x = slice(1 + p + self.n_dummies, 1 + p + self.n_dummies + x_dim)
        self.slice_interaction = slice(1 + p + self.n_dummies + x_dim, self.n_coef)

        # covariate-model design [1, dummies] has this many columns per component
        self.w_dim = 1 + self.n_dummies
        self.alpha_dim = p * self.w_dim
        self.alpha_names = [
            f"alpha_{cn}_{wn}"
            for cn in self.c_names
            for wn in ["const"] + [f"{self.d_names[k]}_{lvl}" for k, lvl in self.dummy_index]
        ]

    def validate_levels(self, d_levels: Sequence[int]) -> np.ndarray:
        d_levels = np.asarray(d_levels, dtype=int)
        if d_levels.shape != (self.q,):
            raise DomainError(f"expected {self.q} categorical levels, got {d_levels.shape}")
        if np.any(d_levels < 0) or np.any(d_levels >= np.asarray(self.levels)):
            raise DomainError(f"level vector {d_levels.tolist()} out of range {self.levels}")
        return d_levels


def encode_cell(d_levels: Sequence[int], spec: ModelSpec) -> int:
    """Flat contingency-table index of a complete level vector."""
    d_levels = spec.validate_levels(d_levels)
    return int(d_levels @ spec._strides)


def decode_cell(flat: int, spec: ModelSpec) -> np.ndarray:
    """Inverse of :func:`encode_cell`."""
    if not 0 <= flat < spec.n_cells:
        raise DomainError(f"cell index {flat} out of range [0, {spec.n_cells})")
    out = np.empty(spec.q, dtype=int)
    rem = int(flat)
    for k in range(spec.q):
        out[k], rem = divmod(rem, spec._strides[k])
    return out


def admissible_cells(d_obs: Sequence[Optional[int]], spec: ModelSpec) -> np.ndarray:
    """Flat indices of every cell consistent with the observed entries.

    ``d_obs`` holds a level per observed variable and ``None`` where the
    variable is missing.  Output is sorted increasing and has one entry per
    combination of the missing variables' levels.
    """
    if len(d_obs) != spec.q:
        raise DomainError(f"expected {spec.q} entries, got {len(d_obs)}")
    choices = []
    for k, v in enumerate(d_obs):
        if v is None:
            choices.append(range(spec.levels[k]))
        else:
            v = int(v)
            if not 0 <= v < spec.levels[k]:
                raise DomainError(f"level {v} out of range for variable {k}")
            choices.append((v,))
    cells = np.fromiter(
        (int(np.dot(combo, spec._strides)) for combo in product(*choices)),
        dtype=int,
    )
    cells.sort()
    return cells


def dummy_code(d_levels: Sequence[int], spec: ModelSpec) -> np.ndarray:
    """Reference-coded dummy vector for one cluster."""
    d_levels = spec.validate_levels(d_levels)
    out = np.zeros(spec.n_dummies)
    for h, (k, lvl) in enumerate(spec.dummy_index):
        out[h] = 1.0 if d_levels[k] == lvl else 0.0
    return out


def dummy_matrix(d_mat: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Dummy rows for all clusters at once; ``d_mat`` is (J, q) of levels."""
    d_mat = np.asarray(d_mat, dtype=int)
    out = np.zeros((d_mat.shape[0], spec.n_dummies))
    for h, (k, lvl) in enumerate(spec.dummy_index):
        out[:, h] = d_mat[:, k] == lvl
    return out


def w_matrix(d_mat: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Covariate-model design rows [1, dummies], shape (J, 1 + n_dummies)."""
    dm = dummy_matrix(d_mat, spec)
    return np.hstack([np.ones((dm.shape[0], 1)), dm])


def interaction_coef_matrix(beta: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Interaction coefficients as a dense (p, n_dummies) matrix.

    Masked pairs, which carry no coefficient in ``beta``, appear as exact
    zeros, so the matrix can be used to evaluate the regression mean for
    any level combination.
    """
    out = np.zeros((spec.p, spec.n_dummies))
    coefs = np.asarray(beta)[spec.slice_interaction]
    for (r, h), b in zip(spec.interaction_index, coefs):
        out[r, h] = b
    return out


def build_design_row(
    c: Sequence[float],
    d_levels: Sequence[int],
    x: Sequence[float],
    spec: ModelSpec,
) -> np.ndarray:
    """Regression design row for one observation with complete covariates."""
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    if c.shape != (spec.p,):
        raise DomainError(f"expected {spec.p} continuous values, got {c.shape}")
    if x.shape != (spec.x_dim,):
        raise DomainError(f"expected {spec.x_dim} level-1 values, got {x.shape}")
    dum = dummy_code(d_levels, spec)
    inter = np.array([c[r] * dum[h] for r, h in spec.interaction_index])
    return np.concatenate([[1.0], c, dum, x, inter])


def build_design_matrix(
    c_mat: np.ndarray,
    d_mat: np.ndarray,
    x: np.ndarray,
    obs_cluster: np.ndarray,
    spec: ModelSpec,
    out: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Design matrix for every observation; cluster covariates are expanded
    to observation rows through ``obs_cluster``."""
    n = obs_cluster.size
    if out is None:
        out = np.empty((n, spec.n_coef))
    out[:, 0] = 1.0
    out[:, spec.slice_c] = c_mat[obs_cluster]
    dum = dummy_matrix(d_mat, spec)
    out[:, spec.slice_d] = dum[obs_cluster]
    if spec.x_dim:
        out[:, spec.slice_x] = x
    if spec.interaction_index:
        c_obs = c_mat[obs_cluster]
        dum_obs = dum[obs_cluster]
        cols = np.empty((n, len(spec.interaction_index)))
        for idx, (r, h) in enumerate(spec.interaction_index):
            cols[:, idx] = c_obs[:, r] * dum_obs[:, h]
        out[:, spec.slice_interaction] = cols
    return out


class Dataset:
    """Two-level data with explicit missingness masks.

    Observations are stored flat, sorted by cluster; ``starts`` gives the
    offset of each cluster's block (length J + 1).  Cluster-level arrays
    hold a placeholder (nan / 0) at missing slots, which is only ever read
    through the imputation state.
    """

    def __init__(
        self,
        y: np.ndarray,
        y_missing: np.ndarray,
        c: np.ndarray,
        c_missing: np.ndarray,
        d: np.ndarray,
        d_missing: np.ndarray,
        x: Optional[np.ndarray],
        n_j: np.ndarray,
        spec: Optional[ModelSpec] = None,
        cluster_ids: Optional[Sequence] = None,
    ):
        self.y = np.asarray(y, dtype=float)
        self.y_missing = np.asarray(y_missing, dtype=bool)
        self.c = np.asarray(c, dtype=float)
        self.c_missing = np.asarray(c_missing, dtype=bool)
        self.d = np.asarray(d, dtype=int)
        self.d_missing = np.asarray(d_missing, dtype=bool)
        self.n_j = np.asarray(n_j, dtype=int)
        self.J = self.n_j.size
        self.N = int(self.n_j.sum())
        if x is None:
            x = np.zeros((self.N, 0))
        self.x = np.asarray(x, dtype=float)
        self.cluster_ids = (
            list(cluster_ids) if cluster_ids is not None else list(range(self.J))
        )

        if self.y.shape != (self.N,) or self.y_missing.shape != (self.N,):
            raise InputError("y arrays must have one entry per observation")
        if self.c.shape != self.c_missing.shape or self.c.shape[0] != self.J:
            raise InputError("c arrays must be (J, p)")
        if self.d.shape != self.d_missing.shape or self.d.shape[0] != self.J:
            raise InputError("d arrays must be (J, q)")
        if self.x.shape[0] != self.N:
            raise InputError("x must have one row per observation")
        if np.any(self.n_j < 1):
            raise InputError("every cluster needs at least one observation")
        if not np.any(~self.y_missing):
            raise InputError("dataset contains no observed outcome values")
        if np.isnan(self.x).any():
            raise InputError("level-1 covariates x must be fully observed")
        if np.isnan(self.y[~self.y_missing]).any():
            raise InputError("observed y entries must be finite")

        self.starts = np.zeros(self.J + 1, dtype=int)
        np.cumsum(self.n_j, out=self.starts[1:])
        self.obs_cluster = np.repeat(np.arange(self.J), self.n_j)

        if spec is not None:
            self.validate_against(spec)

    @property
    def p(self) -> int:
        return self.c.shape[1]

    @property
    def q(self) -> int:
        return self.d.shape[1]

    def validate_against(self, spec: ModelSpec) -> None:
        if self.p != spec.p or self.q != spec.q:
            raise InputError(
                f"dataset has p={self.p}, q={self.q}; model expects p={spec.p}, q={spec.q}"
            )
        if self.x.shape[1] != spec.x_dim:
            raise InputError(f"dataset has {self.x.shape[1]} x columns, model expects {spec.x_dim}")
        levels = np.asarray(spec.levels)
        observed = ~self.d_missing
        if np.any((self.d < 0) & observed) or np.any((self.d >= levels) & observed):
            raise InputError("observed categorical levels out of range")

    def cluster_slice(self, j: int) -> slice:
        return slice(self.starts[j], self.starts[j + 1])

    def d_partial(self, j: int) -> list:
        """Observed levels of cluster j with None at missing positions."""
        return [
            None if self.d_missing[j, k] else int(self.d[j, k]) for k in range(self.q)
        ]


@dataclass
class ParamState:
    """One Gibbs state: parameters, random effects and current imputations.

    ``y_imp``/``c_imp``/``d_imp`` are fully completed copies of the data
    arrays; entries at observed positions always equal the data.
    """

    beta: np.ndarray
    tau: float
    sigma2: float
    alpha: np.ndarray
    T: np.ndarray
    pi: np.ndarray
    u: np.ndarray
    y_imp: np.ndarray
    c_imp: np.ndarray
    d_imp: np.ndarray

    def copy(self) -> "ParamState":
        return ParamState(
            beta=self.beta.copy(),
            tau=float(self.tau),
            sigma2=float(self.sigma2),
            alpha=self.alpha.copy(),
            T=self.T.copy(),
            pi=self.pi.copy(),
            u=self.u.copy(),
            y_imp=self.y_imp.copy(),
            c_imp=self.c_imp.copy(),
            d_imp=self.d_imp.copy(),
        )

    def check(self, spec: ModelSpec) -> None:
        if not (self.tau > 0 and self.sigma2 > 0):
            raise DomainError("variance components must be positive")
        if abs(self.pi.sum() - 1.0) > 1e-9 or np.any(self.pi < 0):
            raise DomainError("pi must lie on the probability simplex")
        if self.beta.shape != (spec.n_coef,):
            raise DomainError("beta has the wrong length for the model layout")
