"""Covariate-aware allocation: sequential D_A-optimal design and stratified rules.

The regression model has a treatment effect, an intercept and ``m``
covariates (``q = m + 1`` nuisance parameters). Internally the treatment
part of the design matrix uses one indicator column per arm; for two arms
this spans the same space as the +-1 allocation column plus intercept, so
every leverage below is identical to the textbook parametrisation.

All state arrays carry a leading replicate axis so one object can advance
many independent trials at once; ``batch=None`` gives a single trial whose
accessors return unbatched arrays.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import softmax

from .errors import ParameterError, StateError
from .rules import prob_adjustable, prob_efron

__all__ = [
    "DesignState",
    "StratumState",
    "SingularDesign",
    "derivative_values",
    "derivative_function",
    "variance_loss",
    "pseudo_difference",
    "prob_rule_A",
    "prob_rule_B_cov",
    "prob_rule_E_gen",
    "prob_rule_J_cov",
    "prob_rule_D_cov",
    "minimization_score",
    "prob_rule_M_ME",
    "prob_rule_C_family",
    "update_design",
    "discretize",
    "RCOND_MIN",
    "PSEUDO_EPS",
]

RCOND_MIN = 1e-10
PSEUDO_EPS = 1e-9
DRIFT_CHECK_EVERY = 1000
TIE_RTOL = 1e-12


class SingularDesign(StateError):
    """The information matrix is not yet invertible (start-up phase)."""


def _rcond(mats: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(mats)
    return np.where(np.isfinite(cond), 1.0 / cond, 0.0)


class DesignState:
    """Sufficient statistics of the sequential regression design.

    Attributes (each with a leading replicate axis when batched):
      ``inv_info_full`` inverse of G'G, dimension ``t + m``;
      ``inv_info_nuisance`` inverse of F'F, dimension ``q``;
      ``balance`` the vector ``b = F'a`` (two arms only);
      ``counts`` per-arm totals.
    Inverses are NaN until the matching information matrix has a
    reciprocal condition number above ``RCOND_MIN``.
    """

    def __init__(self, m: int, t: int = 2, batch: int | None = None):
        if m < 0 or t < 2:
            raise ParameterError("need m >= 0 covariates and t >= 2 arms")
        self.m, self.t, self.q = m, t, m + 1
        self.batched = batch is not None
        R = batch if self.batched else 1
        pg = t + m
        self.n = 0
        self._counts = np.zeros((R, t), dtype=np.int64)
        self._gtg = np.zeros((R, pg, pg))
        self._ftf = np.zeros((R, self.q, self.q))
        self._ginv = np.full((R, pg, pg), np.nan)
        self._finv = np.full((R, self.q, self.q), np.nan)
        self._ready_full = np.zeros(R, dtype=bool)
        self._ready_nuisance = np.zeros(R, dtype=bool)
        self._balance = np.zeros((R, self.q))

    def _view(self, arr):
        return arr if self.batched else arr[0]

    counts = property(lambda self: self._view(self._counts))
    inv_info_full = property(lambda self: self._view(self._ginv))
    inv_info_nuisance = property(lambda self: self._view(self._finv))
    balance = property(lambda self: self._view(self._balance))
    ready_full = property(lambda self: self._view(self._ready_full))
    ready_nuisance = property(lambda self: self._view(self._ready_nuisance))
    info_full = property(lambda self: self._view(self._gtg))
    info_nuisance = property(lambda self: self._view(self._ftf))

    def _rows(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if not self.batched:
            if z.size != self.m:
                raise ParameterError(f"covariate vector has length {z.size}, expected {self.m}")
            return z.reshape(1, self.m)
        if z.ndim != 2 or z.shape[1] != self.m:
            raise ParameterError(f"batched covariates must have shape (batch, {self.m})")
        return z

    def copy(self) -> "DesignState":
        new = DesignState.__new__(DesignState)
        new.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return new


def _nuisance_row(z: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ones(z.shape[:-1] + (1,)), z], axis=-1)


def derivative_values(state: DesignState, z) -> np.ndarray:
    """``d(j, n, z)`` for every arm; NaN for replicates still in start-up.

    ``d(j) = g_j' (G'G)^{-1} g_j - f' (F'F)^{-1} f`` where ``g_j`` is the row
    the new patient adds under arm ``j`` and ``f`` its covariate row.
    """
    z = state._rows(z)
    t = state.t
    M = state._ginv
    diag = M[:, np.arange(t), np.arange(t)]
    if state.m:
        zMz = np.einsum("ri,rij,rj->r", z, M[:, t:, t:], z)
        cross = np.einsum("rji,ri->rj", M[:, :t, t:], z)
    else:
        zMz = np.zeros(z.shape[0])
        cross = np.zeros((z.shape[0], t))
    f = _nuisance_row(z)
    lev_f = np.einsum("ri,rij,rj->r", f, state._finv, f)
    d = diag + 2.0 * cross + zMz[:, None] - lev_f[:, None]
    d[~state._ready_full] = np.nan
    return state._view(d)


def derivative_function(state: DesignState, z, j: int):
    """``d(j, n, z)`` for arm ``j`` (1-based); raises during start-up."""
    if not 1 <= j <= state.t:
        raise ParameterError(f"arm {j} outside 1..{state.t}")
    if not np.all(state._ready_full):
        raise SingularDesign("information matrix still singular; allocate at random")
    return state_value(derivative_values(state, z)[..., j - 1])


def state_value(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def variance_loss(state: DesignState):
    """Loss ``b' (F'F)^{-1} b``; NaN while F'F is singular."""
    if state.t != 2:
        raise ParameterError("the balance-vector loss is defined for two arms")
    b = state._balance
    loss = np.einsum("ri,rij,rj->r", b, state._finv, b)
    loss = np.where(state._ready_nuisance, loss, np.nan)
    return state_value(state._view(loss))


def update_design(state: DesignState, z, arm) -> DesignState:
    """Add one patient with covariates ``z`` on ``arm`` (1-based), in place.

    Ready inverses get a rank-one update; start-up replicates are inverted
    directly once their information matrix is well conditioned. Every
    ``DRIFT_CHECK_EVERY`` patients the updated inverses are replaced by
    fresh ones.
    """
    z = state._rows(z)
    arm = np.asarray(arm).reshape(-1)
    if np.any((arm < 1) | (arm > state.t)):
        raise ParameterError("arm outside 1..t")
    R, t = z.shape[0], state.t
    g = np.zeros((R, t + state.m))
    g[np.arange(R), arm - 1] = 1.0
    g[:, t:] = z
    f = _nuisance_row(z)

    state._gtg += g[:, :, None] * g[:, None, :]
    state._ftf += f[:, :, None] * f[:, None, :]
    state._counts[np.arange(R), arm - 1] += 1
    if t == 2:
        state._balance += np.where(arm == 1, 1.0, -1.0)[:, None] * f
    state.n += 1

    _rank_one(state._ginv, state._gtg, g, state._ready_full, state.n)
    _rank_one(state._finv, state._ftf, f, state._ready_nuisance, state.n)
    if state.n % DRIFT_CHECK_EVERY == 0:
        for inv, info, ready in ((state._ginv, state._gtg, state._ready_full),
                                 (state._finv, state._ftf, state._ready_nuisance)):
            inv[ready] = np.linalg.inv(info[ready])
    return state


def _rank_one(inv, info, row, ready, n):
    """Sherman-Morrison update for ready rows, direct inversion for new ones."""
    if ready.any():
        idx = np.flatnonzero(ready)
        Mi = inv[idx]
        u = np.einsum("rij,rj->ri", Mi, row[idx])
        denom = 1.0 + np.einsum("ri,ri->r", row[idx], u)
        Mi -= u[:, :, None] * u[:, None, :] / denom[:, None, None]
        diag = np.diagonal(Mi, axis1=1, axis2=2)
        bad = (diag <= 0).any(axis=1) | ~np.isfinite(denom)
        if bad.any():
            Mi[bad] = np.linalg.inv(info[idx[bad]])
        inv[idx] = _refine(Mi, info[idx])
    pending = np.flatnonzero(~ready)
    if pending.size and n >= info.shape[-1]:
        ok = _rcond(info[pending]) > RCOND_MIN
        if ok.any():
            fresh = pending[ok]
            inv[fresh] = _refine(np.linalg.inv(info[fresh]), info[fresh])
            ready[fresh] = True


def _refine(M, A):
    """One Newton-Schulz step ``M (2I - A M)``; squares the residual ``I - A M``.

    An inverse taken just after start-up, when A is barely invertible, is
    otherwise off by ~1e-7 relative and the updates carry that error along.
    """
    return 2.0 * M - M @ A @ M


# --------------------------------------------------------------------------
# optimum-design rules
# --------------------------------------------------------------------------


def pseudo_difference(d1, d2, n):
    """Imbalance implied by two derivative values.

    ``(2 - n (d1 + d2)) / (d1 - d2)``, which is exactly ``n1 - n2`` without
    covariates. Values with ``|d1 - d2| < eps (d1 + d2 + 1/n)`` are treated
    as balanced and give 0.
    """
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    n = np.asarray(n, dtype=float)
    diff = d1 - d2
    with np.errstate(divide="ignore", invalid="ignore"):
        near = np.abs(diff) < PSEUDO_EPS * (d1 + d2 + 1.0 / n)
        D = (2.0 - n * (d1 + d2)) / diff
    return state_value(np.where(near, 0.0, D))


def prob_rule_A(d_values):
    """Atkinson's rule: probabilities proportional to the derivative values."""
    d = np.asarray(d_values, dtype=float)
    total = d.sum(axis=-1, keepdims=True)
    t = d.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        prob = np.where(total > 0, d / total, 1.0 / t)
    return prob


def prob_rule_B_cov(gamma: float, d_values):
    """Bayesian rule: probabilities proportional to ``(1 + d_j)^(1/gamma)``."""
    if not 0 < gamma <= 1:
        raise ParameterError(f"gamma={gamma} outside (0, 1]")
    d = np.asarray(d_values, dtype=float)
    return softmax(np.log1p(d) / gamma, axis=-1)


def _ties(d: np.ndarray, i: int, j: int) -> bool:
    return abs(d[i] - d[j]) <= TIE_RTOL * max(abs(d[i]), abs(d[j]), 1e-300)


def _rank_schedule(row: np.ndarray, schedule: np.ndarray) -> np.ndarray:
    order = np.argsort(-row, kind="stable")
    out = np.empty_like(row)
    k = 0
    while k < len(order):
        end = k + 1
        while end < len(order) and _ties(row, order[k], order[end]):
            end += 1
        out[order[k:end]] = schedule[k:end].mean()
        k = end
    return out


def prob_rule_E_gen(d_values, p: float | Sequence[float] | None = None):
    """Generalised Efron coin on the derivative values.

    Two arms: the arm with the larger ``d`` gets ``p`` (default 2/3), a tie
    gives 1/2 each. More arms: ranked by ``d`` from largest, arm ``[j]`` gets
    ``2(t+1-j)/(t(t+1))`` unless an explicit schedule ``p`` is given, and
    tied arms share the average of their scheduled probabilities.
    """
    d = np.asarray(d_values, dtype=float)
    t = d.shape[-1]
    if t == 2 and (p is None or np.ndim(p) == 0):
        p = 2.0 / 3.0 if p is None else float(p)
        d1, d2 = d[..., 0], d[..., 1]
        tie = np.abs(d1 - d2) <= TIE_RTOL * np.maximum(np.maximum(np.abs(d1), np.abs(d2)), 1e-300)
        # arm 1 is "under-represented" when it has the larger derivative
        pi1 = np.asarray(prob_efron(p, np.where(tie, 0, np.where(d1 > d2, -1, 1))))
        return np.stack([pi1, 1.0 - pi1], axis=-1)
    if p is None:
        j = np.arange(1, t + 1)
        schedule = 2.0 * (t + 1 - j) / (t * (t + 1))
    else:
        schedule = np.asarray(p, dtype=float)
        if schedule.shape != (t,) or not np.isclose(schedule.sum(), 1.0):
            raise ParameterError("probability schedule must have one entry per arm and sum to 1")
    flat = d.reshape(-1, t)
    out = np.array([_rank_schedule(row, schedule) for row in flat])
    return out.reshape(d.shape)


def prob_rule_D_cov(d_values):
    """Deterministic allocation of the arm with the largest derivative."""
    return prob_rule_E_gen(d_values, 1.0)


def prob_rule_J_cov(a: float, d1, d2, n):
    """Adjustable coin applied to the pseudo-difference; P(treatment 1)."""
    return prob_adjustable(a, pseudo_difference(d1, d2, n))


# --------------------------------------------------------------------------
# stratified and marginal rules
# --------------------------------------------------------------------------


def discretize(x) -> np.ndarray:
    """Dichotomise continuous covariates at zero (category 1 when positive)."""
    return (np.asarray(x) > 0).astype(np.int64)


class StratumState:
    """Arm counts per covariate cell and per covariate margin (two arms).

    ``cell_counts[..., cell, arm]`` and ``margin_counts[..., i, level, arm]``.
    """

    def __init__(self, m: int, levels: int = 2, batch: int | None = None):
        if m < 1:
            raise ParameterError("stratified rules need at least one covariate")
        self.m, self.levels = m, levels
        self.batched = batch is not None
        R = batch if self.batched else 1
        self.n = 0
        self._cells = np.zeros((R, levels**m, 2), dtype=np.int64)
        self._margins = np.zeros((R, m, levels, 2), dtype=np.int64)
        self._weights = levels ** np.arange(m)

    cell_counts = property(lambda self: self._cells if self.batched else self._cells[0])
    margin_counts = property(lambda self: self._margins if self.batched else self._margins[0])

    def _categories(self, categories) -> np.ndarray:
        c = np.asarray(categories, dtype=np.int64).reshape(-1, self.m)
        if np.any((c < 0) | (c >= self.levels)):
            raise ParameterError("covariate category out of range")
        return c

    def cell_of(self, categories) -> np.ndarray:
        return self._categories(categories) @ self._weights

    def cell_arm_counts(self, categories) -> np.ndarray:
        c = self._categories(categories)
        out = self._cells[np.arange(c.shape[0]), c @ self._weights]
        return out if self.batched else out[0]

    def update(self, categories, arm) -> "StratumState":
        c = self._categories(categories)
        arm = np.asarray(arm).reshape(-1) - 1
        rows = np.arange(c.shape[0])
        self._cells[rows, c @ self._weights, arm] += 1
        for i in range(self.m):
            self._margins[rows, i, c[:, i], arm] += 1
        self.n += 1
        return self


def minimization_score(state: StratumState, categories, j: int):
    """Total marginal imbalance after hypothetically giving arm ``j`` (1 or 2).

    Sum over covariates of ``|count_1 - count_2|`` within the patient's own
    category of each covariate, equal weights.
    """
    if j not in (1, 2):
        raise ParameterError("minimization is implemented for two arms")
    c = state._categories(categories)
    rows = np.arange(c.shape[0])[:, None]
    cnt = state._margins[rows, np.arange(state.m)[None, :], c]  # (R, m, 2)
    diff = cnt[..., 0] - cnt[..., 1] + (1 if j == 1 else -1)
    score = np.abs(diff).sum(axis=-1)
    return state_value(score if state.batched else score[0])


def prob_rule_M_ME(scores, randomized: bool = False, p: float = 2.0 / 3.0):
    """P(treatment 1) from the two minimization scores ``(C(1), C(2))``.

    The arm with the smaller score is favoured: with probability 1 (Rule M)
    or ``p`` (Rule ME); equal scores give a fair coin.
    """
    s = np.asarray(scores, dtype=float)
    # favour arm 1 when its score is smaller, i.e. treat C(1) - C(2) as an imbalance
    return prob_efron(p if randomized else 1.0, s[..., 0] - s[..., 1])


def prob_rule_C_family(cell_counts, variant: str = "C", param: float | None = None):
    """P(treatment 1) from the arm counts of the patient's cell.

    ``variant`` is ``C`` (deterministic), ``CE`` (Efron coin, ``param = p``)
    or ``CJ`` (adjustable coin, ``param = a``).
    """
    c = np.asarray(cell_counts)
    d = c[..., 0] - c[..., 1]
    v = variant.upper()
    if v == "C":
        return prob_efron(1.0, d)
    if v == "CE":
        return prob_efron(2.0 / 3.0 if param is None else param, d)
    if v == "CJ":
        if param is None:
            raise ParameterError("Rule CJ needs the exponent a")
        return prob_adjustable(param, d)
    raise ParameterError(f"unknown stratified variant {variant!r}")
