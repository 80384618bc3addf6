"""Graded response decoder: ordered-category probabilities, conditional and
joint log-likelihoods, and the constrained trainable parameterization.

Two evaluation paths exist on purpose.  The tape-based builders
(`conditional_loglik`, `joint_logprob`) are used inside training so gradients
flow to the raw parameters.  The plain-array twins (`*_values` functions plus
`category_probs`/`category_logprob`) back data generation, quadrature oracles
and heldout evaluation, where no tape is needed.  A parity test keeps the two
paths identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import diffkernel as dk
from .diffkernel import Tape, Tensor2
from .rngutil import substream

MISSING = -1

_LOG_2PI = float(np.log(2.0 * np.pi))
_PROB_FLOOR = 1e-300
_GAP = 1e-6  # strict minimum spacing between consecutive intercepts


class DataError(ValueError):
    """Invalid response data."""


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def softplus_inv(y):
    """Inverse of softplus for strictly positive y."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0):
        raise ValueError("softplus_inv requires strictly positive input")
    # log(e^y - 1), stable for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


class ResponseMatrix:
    """N x M ordinal responses; entry in {0..C_j-1} or MISSING."""

    def __init__(self, data, categories):
        arr = np.asarray(data, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"response matrix must be 2-D and nonempty, got shape {arr.shape}")
        cats = np.asarray(categories, dtype=np.int64)
        if cats.ndim == 0:
            cats = np.full(arr.shape[1], int(cats))
        if cats.shape != (arr.shape[1],):
            raise DataError(f"need one category count per item, got {cats.shape}")
        if np.any(cats < 2):
            raise DataError("every item needs at least 2 categories")
        valid = (arr == MISSING) | ((arr >= 0) & (arr < cats[None, :]))
        if not valid.all():
            i, j = np.argwhere(~valid)[0]
            raise DataError(
                f"response {arr[i, j]} at ({i}, {j}) outside 0..{cats[j] - 1}")
        self.data = arr
        self.categories = cats

    @property
    def n_respondents(self) -> int:
        return self.data.shape[0]

    @property
    def n_items(self) -> int:
        return self.data.shape[1]

    @property
    def max_categories(self) -> int:
        return int(self.categories.max())

    def has_missing(self) -> bool:
        return bool((self.data == MISSING).any())

    def subset(self, rows) -> "ResponseMatrix":
        return ResponseMatrix(self.data[rows], self.categories)


@dataclass
class GrmValues:
    """Effective (reconstructed) decoder values, plain arrays."""

    loadings: np.ndarray            # (M, P)
    intercepts: list[np.ndarray]    # per item, (C_j - 1,) strictly increasing
    factor_corr: np.ndarray         # (P, P) correlation matrix

    @property
    def n_items(self) -> int:
        return self.loadings.shape[0]

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    def intercept_matrix(self, max_categories: int | None = None) -> np.ndarray:
        """Padded (M, maxC-1) matrix; entries past C_j-1 hold -inf so the
        corresponding boundary probability is exactly zero."""
        maxc = max_categories or (max(len(a) for a in self.intercepts) + 1)
        out = np.full((self.n_items, maxc - 1), -np.inf)
        for j, a in enumerate(self.intercepts):
            out[j, : len(a)] = a
        return out


class GrmParams:
    """Trainable decoder parameters with structural constraints built in.

    The boundary model is P(x >= k) = sigmoid(beta^T z + alpha_k), so the
    intercepts must be strictly decreasing in k for every category
    probability to stay positive.  That ordering is enforced by
    construction:
        alpha_{j,1} = base_j
        alpha_{j,k} = alpha_{j,k-1} - softplus(raw increment) - 1e-6
    Loadings are masked by the confirmatory pattern and, when positivity is
    requested, passed through softplus.  The factor correlation is
    Sigma = L L^T with L a row-normalized lower-triangular Cholesky factor
    whose diagonal is softplus-positive, so Sigma always has a unit diagonal.
    """

    def __init__(self, loadings_raw: Tensor2, intercept_base: Tensor2,
                 intercept_incr_raw: list[Tensor2], chol_raw: Tensor2,
                 loading_mask: np.ndarray, categories: np.ndarray,
                 loading_positivity: bool):
        self.loadings_raw = loadings_raw
        self.intercept_base = intercept_base
        self.intercept_incr_raw = intercept_incr_raw
        self.chol_raw = chol_raw
        self.loading_mask = np.asarray(loading_mask, dtype=np.float64)
        self.categories = np.asarray(categories, dtype=np.int64)
        self.loading_positivity = bool(loading_positivity)

    @property
    def n_items(self) -> int:
        return self.loadings_raw.rows

    @property
    def n_factors(self) -> int:
        return self.loadings_raw.cols

    @property
    def max_categories(self) -> int:
        return int(self.categories.max())

    def parameters(self) -> list[Tensor2]:
        return [self.loadings_raw, self.intercept_base, *self.intercept_incr_raw, self.chol_raw]

    # -- effective values, array path ------------------------------------

    def values(self) -> GrmValues:
        raw = self.loadings_raw.data
        beta = softplus(raw) if self.loading_positivity else raw.copy()
        beta = beta * self.loading_mask
        base = self.intercept_base.data[:, 0]
        cols = [base.copy()]
        for t in self.intercept_incr_raw:
            cols.append(cols[-1] - softplus(t.data[:, 0]) - _GAP)
        intercepts = [np.array([cols[k][j] for k in range(self.categories[j] - 1)])
                      for j in range(self.n_items)]
        chol = chol_values(self.chol_raw.data)
        return GrmValues(loadings=beta, intercepts=intercepts, factor_corr=chol @ chol.T)

    # -- effective values, tape path -------------------------------------

    def effective(self, tape: Tape | None, frozen: bool = False) -> dict:
        """Build effective tensors on the tape.

        frozen=True evaluates from detached copies of the raw leaves, so a
        graph can use the decoder without routing gradients into it.
        """
        def leaf(t: Tensor2) -> Tensor2:
            return dk.const(t.data) if frozen else t

        raw = leaf(self.loadings_raw)
        mask = dk.const(self.loading_mask)
        if self.loading_positivity:
            beta = dk.mul(tape, dk.log1p_exp(tape, raw), mask)
        else:
            beta = dk.mul(tape, raw, mask)

        alpha_cols = [leaf(self.intercept_base)]
        for t in self.intercept_incr_raw:
            gap = dk.add(tape, dk.log1p_exp(tape, leaf(t)), _GAP)
            alpha_cols.append(dk.sub(tape, alpha_cols[-1], gap))

        P = self.n_factors
        raw_l = leaf(self.chol_raw)
        eye = np.eye(P)
        diag_part = dk.mul(tape, dk.log1p_exp(tape, raw_l), dk.const(eye))
        off_part = dk.mul(tape, raw_l, dk.const(np.tril(np.ones((P, P)), -1)))
        unnorm = dk.add(tape, diag_part, off_part)
        norm2 = dk.sum_rows(tape, dk.square(tape, unnorm))
        chol = dk.mul_colvec(tape, unnorm, dk.pow_const(tape, norm2, -0.5))
        diag_vec = dk.sum_rows(tape, dk.mul(tape, chol, dk.const(eye)))
        logdet = dk.mul(tape, dk.tsum(tape, dk.log(tape, diag_vec)), 2.0)
        return {"beta": beta, "alpha_cols": alpha_cols, "chol": chol, "logdet": logdet}

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        vals = self.values()
        return {
            "loadings": vals.loadings.tolist(),
            "intercepts": [a.tolist() for a in vals.intercepts],
            "factor_corr": vals.factor_corr.tolist(),
            "raw": {
                "loadings_raw": self.loadings_raw.data.tolist(),
                "intercept_base": self.intercept_base.data.tolist(),
                "intercept_incr_raw": [t.data.tolist() for t in self.intercept_incr_raw],
                "chol_raw": self.chol_raw.data.tolist(),
                "loading_mask": self.loading_mask.tolist(),
                "categories": self.categories.tolist(),
                "loading_positivity": self.loading_positivity,
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GrmParams":
        raw = doc["raw"]
        return cls(
            loadings_raw=dk.parameter(raw["loadings_raw"], name="loadings_raw"),
            intercept_base=dk.parameter(raw["intercept_base"], name="intercept_base"),
            intercept_incr_raw=[dk.parameter(t, name=f"intercept_incr_raw_{k}")
                                for k, t in enumerate(raw["intercept_incr_raw"])],
            chol_raw=dk.parameter(raw["chol_raw"], name="chol_raw"),
            loading_mask=np.asarray(raw["loading_mask"]),
            categories=np.asarray(raw["categories"]),
            loading_positivity=raw["loading_positivity"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GrmParams":
        return cls.from_dict(json.loads(text))


def chol_values(chol_raw: np.ndarray) -> np.ndarray:
    """Row-normalized lower-triangular factor from raw entries."""
    P = chol_raw.shape[0]
    unnorm = np.tril(chol_raw, -1) + np.diag(softplus(np.diag(chol_raw)))
    norms = np.sqrt((unnorm * unnorm).sum(axis=1, keepdims=True))
    return unnorm / norms


def init_params(n_items: int, n_factors: int, categories, seed: int,
                loading_mask: np.ndarray | None = None,
                loading_positivity: bool = False) -> GrmParams:
    """Uniform initialization with bound sqrt(2 / (P + M)) for loadings and
    intercepts; increments chosen so reconstructed intercepts are strictly
    increasing; factor correlation starts at the identity."""
    cats = np.asarray(categories, dtype=np.int64)
    if cats.ndim == 0:
        cats = np.full(n_items, int(cats))
    rng = substream(seed, "grm-init")
    bound = np.sqrt(2.0 / (n_factors + n_items))
    if loading_mask is None:
        loading_mask = np.ones((n_items, n_factors))
    loading_mask = np.asarray(loading_mask, dtype=np.float64)

    draws = rng.uniform(-bound, bound, size=(n_items, n_factors))
    if loading_positivity:
        loadings_raw = softplus_inv(np.clip(np.abs(draws), 1e-3, None))
    else:
        loadings_raw = draws

    maxc = int(cats.max())
    alpha_draws = rng.uniform(-bound, bound, size=(n_items, maxc - 1))
    alpha_sorted = -np.sort(-alpha_draws, axis=1)  # strictly decreasing
    base = alpha_sorted[:, :1].copy()
    incr_cols = []
    for k in range(maxc - 2):
        gaps = np.clip(alpha_sorted[:, k] - alpha_sorted[:, k + 1], 1e-4, None)
        incr_cols.append(softplus_inv(gaps).reshape(-1, 1))

    chol_raw = np.diag(np.full(n_factors, float(softplus_inv(1.0))))

    return GrmParams(
        loadings_raw=dk.parameter(loadings_raw, name="loadings_raw"),
        intercept_base=dk.parameter(base, name="intercept_base"),
        intercept_incr_raw=[dk.parameter(c, name=f"intercept_incr_raw_{k}")
                            for k, c in enumerate(incr_cols)],
        chol_raw=dk.parameter(chol_raw, name="chol_raw"),
        loading_mask=loading_mask,
        categories=cats,
        loading_positivity=loading_positivity,
    )


def simple_structure_mask(n_items: int, n_factors: int) -> np.ndarray:
    """Each factor loads on a contiguous block of M/P items."""
    if n_items % n_factors != 0:
        raise ValueError(f"simple structure needs P | M, got M={n_items}, P={n_factors}")
    per = n_items // n_factors
    mask = np.zeros((n_items, n_factors))
    for p in range(n_factors):
        mask[p * per:(p + 1) * per, p] = 1.0
    return mask


# ---------------------------------------------------------------------------
# plain-array evaluation


def boundary_prob(z: np.ndarray, values: GrmValues, item: int, level: int) -> np.ndarray:
    """P(x_ij >= level | z) for one item; level 0 -> 1, level C_j -> 0."""
    cj = len(values.intercepts[item]) + 1
    if level < 0 or level > cj:
        raise IndexError(f"level {level} outside 0..{cj} for item {item}")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if level == 0:
        return np.ones(z.shape[0])
    if level == cj:
        return np.zeros(z.shape[0])
    t = z @ values.loadings[item] + values.intercepts[item][level - 1]
    e = np.exp(-np.abs(t))
    return np.where(t >= 0.0, 1.0, e) / (1.0 + e)


def category_probs(z: np.ndarray, values: GrmValues) -> np.ndarray:
    """(n, M, maxC) category probabilities; padded categories get 0."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = z.shape[0]
    M = values.n_items
    maxc = max(len(a) for a in values.intercepts) + 1
    logits = z @ values.loadings.T  # (n, M)
    alpha = values.intercept_matrix(maxc)  # (M, maxC-1), inf padding
    # boundary k (1..maxC-1): sigma(logit + alpha_k); padded alphas give 1.0,
    # then the valid mask zeroes boundaries past C_j - 1
    t = logits[:, :, None] + alpha[None, :, :]  # -inf padding maps to boundary 0
    e = np.exp(-np.abs(t))
    bnd = np.where(t >= 0, 1.0, e) / (1.0 + e)
    valid = (np.arange(1, maxc)[None, :] <= (np.asarray([len(a) for a in values.intercepts])[:, None]))
    bnd = bnd * valid[None, :, :]
    full = np.concatenate([np.ones((n, M, 1)), bnd, np.zeros((n, M, 1))], axis=2)
    probs = full[:, :, :maxc] - full[:, :, 1:maxc + 1]
    return probs


def category_logprob(z: np.ndarray, values: GrmValues) -> np.ndarray:
    """(n, M, maxC) log category probabilities, clamped before the log."""
    probs = category_probs(z, values)
    return np.log(np.maximum(probs, _PROB_FLOOR))


def conditional_loglik_values(x: np.ndarray, z: np.ndarray, values: GrmValues) -> np.ndarray:
    """Sum over items of log p_{i,j,x_ij}; MISSING entries contribute 0."""
    x = np.asarray(x, dtype=np.int64)
    logp = category_logprob(z, values)
    mask = x != MISSING
    sel = np.take_along_axis(logp, np.maximum(x, 0)[:, :, None], axis=2)[:, :, 0]
    return (sel * mask).sum(axis=1)


def prior_logpdf_values(z: np.ndarray, values: GrmValues) -> np.ndarray:
    """log N(z; 0, Sigma) per row."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    P = values.n_factors
    chol = np.linalg.cholesky(values.factor_corr)
    w = solve_triangular(chol, z.T, lower=True).T
    quad = (w * w).sum(axis=1)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * quad - 0.5 * logdet - 0.5 * P * _LOG_2PI


def joint_logprob_values(x: np.ndarray, z: np.ndarray, values: GrmValues) -> np.ndarray:
    return conditional_loglik_values(x, z, values) + prior_logpdf_values(z, values)


# ---------------------------------------------------------------------------
# tape-based evaluation (training path)


def response_selectors(x: np.ndarray, categories: np.ndarray) -> dict:
    """One-hot selection masks per category plus the missingness indicator.

    Returns arrays keyed by category level; each is (n, M) float64.  These
    are constants of the graph, computed once per batch.
    """
    x = np.asarray(x, dtype=np.int64)
    maxc = int(categories.max())
    onehots = [(x == k).astype(np.float64) for k in range(maxc)]
    miss = (x == MISSING).astype(np.float64)
    # valid_rows[k-1, j] = 1 iff boundary k exists for item j
    valid_rows = (np.arange(1, maxc)[:, None] <= (categories - 1)[None, :]).astype(np.float64)
    return {"onehots": onehots, "missing": miss, "valid_rows": valid_rows, "maxc": maxc}


def conditional_loglik(tape: Tape | None, eff: dict, z: Tensor2,
                       selectors: dict, tile: int = 1) -> Tensor2:
    """Per-row conditional log-likelihood (n, 1) on the tape.

    `selectors` comes from response_selectors on the batch; when z holds
    `tile` rows per respondent (importance/MC samples, respondent-major),
    the selection constants are repeated to match.
    """
    maxc = selectors["maxc"]
    beta = eff["beta"]
    alpha_cols = eff["alpha_cols"]

    def tiled(a: np.ndarray) -> np.ndarray:
        return np.repeat(a, tile, axis=0) if tile > 1 else a

    n = z.rows
    M = beta.rows
    logits = dk.matmul(tape, z, dk.transpose(tape, beta))  # (n, M)

    boundaries: list = [dk.const(np.ones((n, M)))]
    for k in range(1, maxc):
        row = dk.transpose(tape, alpha_cols[k - 1])  # (1, M)
        bk = dk.sigmoid(tape, dk.broadcast_add_rowvec(tape, logits, row))
        vmask = selectors["valid_rows"][k - 1][None, :]
        if not np.all(vmask == 1.0):
            bk = dk.mul(tape, bk, dk.const(np.broadcast_to(vmask, (n, M))))
        boundaries.append(bk)
    boundaries.append(dk.const(np.zeros((n, M))))

    picked = None
    for k in range(maxc):
        sel = tiled(selectors["onehots"][k])
        if not sel.any():
            continue
        pk = dk.sub(tape, boundaries[k], boundaries[k + 1])
        term = dk.mul(tape, pk, dk.const(sel))
        picked = term if picked is None else dk.add(tape, picked, term)

    miss = tiled(selectors["missing"])
    if miss.any():
        picked = dk.add(tape, picked, dk.const(miss))  # log 1 = 0 for missing
    logp = dk.log(tape, dk.clamp_min(tape, picked, _PROB_FLOOR))
    return dk.sum_rows(tape, logp)


def prior_logpdf(tape: Tape | None, eff: dict, z: Tensor2) -> Tensor2:
    """log N(z; 0, Sigma) per row, (n, 1) on the tape."""
    P = z.cols
    kinv = dk.tril_inverse(tape, eff["chol"])
    w = dk.matmul(tape, z, dk.transpose(tape, kinv))
    quad = dk.sum_rows(tape, dk.square(tape, w))
    out = dk.mul(tape, quad, -0.5)
    out = dk.sub(tape, out, dk.mul(tape, eff["logdet"], 0.5))
    return dk.add(tape, out, -0.5 * P * _LOG_2PI)


def joint_logprob(tape: Tape | None, eff: dict, z: Tensor2,
                  selectors: dict, tile: int = 1) -> Tensor2:
    cond = conditional_loglik(tape, eff, z, selectors, tile=tile)
    return dk.add(tape, cond, prior_logpdf(tape, eff, z))
