"""Exact analysis of the imbalance process ``D_n`` for rules that depend on d only.

``D_n`` is a period-2 Markov chain on the integers, so its limiting
behaviour is a pair of distributions: one over even states (reached at even
``n``) and one over odd states. Loss at ``n`` uses the distribution of
``D_n`` and selection bias at ``n`` uses that of ``D_{n-1}``, everywhere in
this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConfigError, ConvergenceError, ParameterError
from .rules import MARKOV_FAMILIES, RuleSpec, parse_rule, prob_treatment1

__all__ = [
    "ImbalanceChain",
    "StationaryCycle",
    "SteadyState",
    "EfronSteadyState",
    "AdjustableApprox",
    "SmithAsymptotics",
    "build_chain",
    "stationary_cycle",
    "chain_steady_state",
    "finite_n_metrics",
    "efron_steady_state",
    "adjustable_approx",
    "smith_asymptotics",
    "t_treatment_variance",
    "DEFAULT_K",
]

DEFAULT_K = 60
MAX_K = 1920


@dataclass(frozen=True)
class ImbalanceChain:
    """Chain on ``-K..K``; ``transition[i, j] = P(D_{n+1} = support[j] | D_n = support[i])``."""

    support: np.ndarray
    transition: np.ndarray
    prob1: np.ndarray  # P(treatment 1) in each state, barriers included
    K: int
    rule: RuleSpec | None = None

    def index(self, d: int) -> int:
        if abs(d) > self.K:
            raise ParameterError(f"state {d} outside the truncated support -{self.K}..{self.K}")
        return int(d) + self.K

    @property
    def bias_increment(self) -> np.ndarray:
        """Expected guessing score for the next allocation from each state."""
        return np.abs(2.0 * self.prob1 - 1.0)


def build_chain(rule, K: int | None = None) -> ImbalanceChain:
    """Transition matrix of ``D_n`` truncated with reflecting barriers at ``+-K``.

    For the barrier rules (``imbtol``, ``bigstick``) ``K`` defaults to the
    rule's own barrier and is capped by it.
    """
    rule = parse_rule(rule)
    if rule.family not in MARKOV_FAMILIES:
        raise ConfigError(f"no exact Markov analysis for rule {rule}: its state is not the imbalance alone")
    if rule.family in ("imbtol", "bigstick"):
        b = int(rule.get("b"))
        K = b if K is None else min(int(K), b)
    elif K is None:
        K = DEFAULT_K
    K = int(K)
    if K < 1:
        raise ParameterError("truncation bound K must be >= 1")
    support = np.arange(-K, K + 1)
    prob1 = np.empty(support.size)
    inner = support[1:-1]
    prob1[1:-1] = prob_treatment1(rule, np.maximum(inner, 0), np.maximum(-inner, 0))
    prob1[0], prob1[-1] = 1.0, 0.0
    size = support.size
    T = np.zeros((size, size))
    idx = np.arange(size)
    T[idx[:-1], idx[:-1] + 1] = prob1[:-1]
    T[idx[1:], idx[1:] - 1] = 1.0 - prob1[1:]
    return ImbalanceChain(support, T, prob1, K, rule)


@dataclass(frozen=True)
class StationaryCycle:
    """Limiting distributions of ``D_n`` for even and odd ``n``."""

    support: np.ndarray
    pi_even: np.ndarray
    pi_odd: np.ndarray

    def distribution(self, n: int) -> np.ndarray:
        return self.pi_even if n % 2 == 0 else self.pi_odd

    def prob(self, d: int) -> float:
        K = (self.support.size - 1) // 2
        if abs(d) > K:
            return 0.0
        pi = self.pi_even if d % 2 == 0 else self.pi_odd
        return float(pi[d + K])


def stationary_cycle(chain: ImbalanceChain, tol: float = 1e-13, max_iter: int = 10**6) -> StationaryCycle:
    """Fixed point of the two-step transition matrix, started from ``D = 0``.

    Power iteration with repeated squaring: after ``k`` rounds the iterate is
    ``e0 P^(2^k - 1)`` with ``P = T @ T``, so ``max_iter`` two-step
    transitions cost only ``log2(max_iter)`` matrix products.
    """
    T = chain.transition
    P = T @ T
    v = np.zeros(T.shape[0])
    v[chain.index(0)] = 1.0
    rounds, power = 0, P
    while True:
        nxt = v @ power
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - v)) <= tol:
            v = nxt
            break
        v = nxt
        rounds += 1
        if 2**rounds - 1 > max_iter:
            raise ConvergenceError(f"stationary cycle did not converge within {max_iter} two-step iterations")
        power = power @ power
    # polish with plain two-step iterations and confirm the fixed point
    for _ in range(4):
        v = v @ P
        v /= v.sum()
    if np.max(np.abs(v @ P - v)) > 100 * tol:
        raise ConvergenceError("two-step iteration did not reach a fixed point")
    even = chain.support % 2 == 0
    pi_even = np.where(even, v, 0.0)
    pi_even /= pi_even.sum()
    pi_odd = pi_even @ T
    pi_odd = np.where(~even, pi_odd, 0.0)
    pi_odd /= pi_odd.sum()
    return StationaryCycle(chain.support, pi_even, pi_odd)


@dataclass(frozen=True)
class SteadyState:
    """Steady-state loss and bias by parity of ``n`` from a stationary cycle."""

    rule: str
    K: int
    p0_even: float
    var_even: float  # E D^2 for even n, i.e. n * loss
    var_odd: float
    bias_even: float  # bias at even n (uses D_{n-1}, odd)
    bias_odd: float

    def loss(self, n: int) -> float:
        return (self.var_even if n % 2 == 0 else self.var_odd) / n

    def bias(self, n: int) -> float:
        return self.bias_even if n % 2 == 0 else self.bias_odd


def _steady_from_chain(chain: ImbalanceChain) -> SteadyState:
    cyc = stationary_cycle(chain)
    s2 = chain.support.astype(float) ** 2
    inc = chain.bias_increment
    return SteadyState(
        rule=str(chain.rule),
        K=chain.K,
        p0_even=float(cyc.pi_even[chain.index(0)]),
        var_even=float(cyc.pi_even @ s2),
        var_odd=float(cyc.pi_odd @ s2),
        bias_even=float(cyc.pi_odd @ inc),
        bias_odd=float(cyc.pi_even @ inc),
    )


def chain_steady_state(rule, K: int | None = None, check_doubling: bool = True, atol: float = 1e-9) -> SteadyState:
    """Steady state from the truncated chain.

    For rules without their own barrier the result must not change (within
    ``atol``, relative for the variances) when ``K`` is doubled; ``K`` keeps
    doubling up to ``MAX_K`` before giving up.
    """
    rule = parse_rule(rule)
    if rule.family == "random":
        raise ConfigError("random allocation has no stationary imbalance distribution (loss 1, bias 0)")
    state = _steady_from_chain(build_chain(rule, K))
    if not check_doubling or rule.family in ("imbtol", "bigstick", "deterministic"):
        return state
    while True:
        if 2 * state.K > MAX_K:
            raise ConvergenceError(f"steady state of {rule} still depends on the truncation at K={state.K}")
        bigger = _steady_from_chain(build_chain(rule, 2 * state.K))
        close = (
            abs(bigger.p0_even - state.p0_even) <= atol
            and abs(bigger.bias_even - state.bias_even) <= atol
            and abs(bigger.bias_odd - state.bias_odd) <= atol
            and abs(bigger.var_even - state.var_even) <= atol * max(1.0, bigger.var_even)
            and abs(bigger.var_odd - state.var_odd) <= atol * max(1.0, bigger.var_odd)
        )
        if close:
            return state
        state = bigger


def finite_n_metrics(rule, n_max: int, K: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact expected loss and bias for ``n = 1..n_max`` starting from ``D_0 = 0``.

    With ``K >= n_max`` (the default for rules without a barrier) no path
    reaches the truncation and the values are exact.
    """
    rule = parse_rule(rule)
    if K is None and rule.family not in ("imbtol", "bigstick"):
        K = max(n_max, 1)
    chain = build_chain(rule, K)
    s2 = chain.support.astype(float) ** 2
    inc = chain.bias_increment
    v = np.zeros(chain.support.size)
    v[chain.index(0)] = 1.0
    loss = np.empty(n_max)
    bias = np.empty(n_max)
    for i in range(n_max):
        bias[i] = v @ inc
        v = v @ chain.transition
        loss[i] = (v @ s2) / (i + 1)
    return loss, bias


# --------------------------------------------------------------------------
# closed forms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EfronSteadyState:
    p: float
    r: float
    p0_even: float
    bias_even: float
    bias_odd: float
    var_even: float
    var_odd: float

    def loss_even(self, n: int) -> float:
        return self.var_even / n

    def loss_odd(self, n: int) -> float:
        return self.var_odd / n

    def loss(self, n: int) -> float:
        return self.loss_even(n) if n % 2 == 0 else self.loss_odd(n)

    def bias(self, n: int) -> float:
        return self.bias_even if n % 2 == 0 else self.bias_odd


def efron_steady_state(p: float) -> EfronSteadyState:
    """Steady-state zero probability, bias and loss of Efron's coin.

    With ``r = p/(1-p)``: ``n L`` is ``4r(r^2+1)/(r^2-1)^2`` for even ``n``
    and ``8r^2/(r^2-1)^2 + 1`` for odd ``n``.
    """
    if not 0.5 < p <= 1.0:
        raise ParameterError(f"p={p}: the steady state needs 0.5 < p <= 1 (p = 0.5 is random allocation)")
    if p == 1.0:
        # deterministic allocation: the r -> infinity limits
        return EfronSteadyState(p, math.inf, 1.0, 1.0, 0.0, 0.0, 1.0)
    r = p / (1.0 - p)
    r2 = r * r
    return EfronSteadyState(
        p=p,
        r=r,
        p0_even=(2 * p - 1) / p,
        bias_even=2 * p - 1,
        bias_odd=(2 * p - 1) * (1 - p) / p,
        var_even=4 * r * (r2 + 1) / (r2 - 1) ** 2,
        var_odd=8 * r2 / (r2 - 1) ** 2 + 1,
    )


@dataclass(frozen=True)
class AdjustableApprox:
    """The adjustable coin approximated by a chain truncated at ``+-3``.

    Inside ``|d| <= 1`` allocation is random, at ``|d| = 2`` the lagging arm
    gets ``p_eff = 2^a/(1+2^a)`` and at ``|d| = 3`` it is forced.
    """

    a: float
    p_eff: float
    dist_even: dict
    dist_odd: dict

    def _increment(self, d: int) -> float:
        return {0: 0.0, 1: 0.0, 2: 2 * self.p_eff - 1, 3: 1.0}[abs(d)]

    def loss(self, n: int) -> float:
        dist = self.dist_even if n % 2 == 0 else self.dist_odd
        return sum(w * d * d for d, w in dist.items()) / n

    def bias(self, n: int) -> float:
        prev = self.dist_odd if n % 2 == 0 else self.dist_even
        return sum(w * self._increment(d) for d, w in prev.items())

    def closed_form(self, n: int) -> tuple[float, float]:
        """``(loss, bias)`` at ``n`` from the algebraic expectations."""
        p = self.p_eff
        if n % 2:
            return (9 - 7 * p) / (n * (1 + p)), (2 * p - 1) / (1 + p)
        return 4 / (n * (1 + p)), (1 - p) / (1 + p)


def adjustable_approx(a: float) -> AdjustableApprox:
    if a < 0:
        raise ParameterError(f"exponent a={a} must be >= 0")
    p = 2.0**a / (1.0 + 2.0**a)
    odd = {-3: (1 - p) / (2 * (1 + p)), -1: p / (1 + p), 1: p / (1 + p), 3: (1 - p) / (2 * (1 + p))}
    even = {-2: 1 / (2 * (1 + p)), 0: p / (1 + p), 2: 1 / (2 * (1 + p))}
    return AdjustableApprox(a, p, even, odd)


@dataclass(frozen=True)
class SmithAsymptotics:
    rho: float
    n: int
    q: int
    loss_inf: float
    bias_n: float
    ni_mean: float  # limit of the allocation proportion N_i / n
    ni_var: float  # variance of sqrt(n) (N_i / n - 1/2)

    def loss_distribution(self):
        """Limiting distribution of the loss: chi-square on ``q`` df scaled by ``1/(1+2 rho)``."""
        return stats.chi2(df=self.q, scale=1.0 / (1.0 + 2.0 * self.rho))


def smith_asymptotics(rho: float, n: int, q: int = 1) -> SmithAsymptotics:
    """Large-sample loss and bias of Smith's rule (``q`` nuisance parameters)."""
    if rho < 0:
        raise ParameterError("rho must be >= 0")
    if n < 1 or q < 1:
        raise ParameterError("need n >= 1 and q >= 1")
    scale = 1.0 / (1.0 + 2.0 * rho)
    return SmithAsymptotics(
        rho=rho,
        n=n,
        q=q,
        loss_inf=q * scale,
        bias_n=rho * math.sqrt(2.0 / (n * math.pi * (1.0 + 2.0 * rho))),
        ni_mean=0.5,
        ni_var=scale / 4.0,
    )


def t_treatment_variance(rho: float, t: int, n: int) -> float:
    """Asymptotic variance of an arm's excess over ``n/t`` under Smith-type allocation."""
    if t < 2 or rho < 0:
        raise ParameterError("need t >= 2 and rho >= 0")
    return n * (t - 1) / (t * t * (1.0 + 2.0 * rho))
