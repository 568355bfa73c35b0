"""Reproducible Monte Carlo estimates of loss and selection bias.

Replicate ``r`` of a study with master seed ``s`` draws all of its random
numbers from a Philox counter-based stream keyed by ``(s, r)``: first the
``n_max`` allocation uniforms, then the covariates, then the block
permutation uniforms. A replicate's trial therefore never depends on how
replicates are grouped or which worker runs them. Replicates are simulated
in fixed-size chunks whose sums are merged in chunk order, so the averages
are bit-identical for any number of workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .covariates import (
    DesignState,
    StratumState,
    derivative_values,
    discretize,
    minimization_score,
    prob_rule_A,
    prob_rule_B_cov,
    prob_rule_C_family,
    prob_rule_E_gen,
    prob_rule_J_cov,
    prob_rule_M_ME,
    update_design,
    variance_loss,
)
from .errors import ConfigError
from .metrics import MomentSums, PerNMetrics, adjacent_average, expected_bias_increment, guess_outcome
from .rules import DESIGN_FAMILIES, RuleSpec, parse_rule, prob_treatment1

__all__ = [
    "CovariateModel",
    "StudyConfig",
    "StudyResult",
    "ReplicateTrace",
    "TrajectoryPoint",
    "replicate_generator",
    "run_replicate",
    "run_study",
    "admissibility_trajectory",
    "DEFAULT_MARKS",
    "CHUNK_SIZE",
]

DEFAULT_MARKS = (15, 25, 50, 200)
CHUNK_SIZE = 2000
_SEED_LIMIT = 2**64


@dataclass(frozen=True)
class CovariateModel:
    """``none`` or ``normal:m=<k>`` (independent standard normal covariates)."""

    kind: str = "none"
    m: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "normal"):
            raise ConfigError(f"unknown covariate model {self.kind!r}")
        if self.kind == "none" and self.m:
            raise ConfigError("covariate model 'none' cannot have m > 0")
        if self.kind == "normal" and self.m < 1:
            raise ConfigError("normal covariates need m >= 1")

    @classmethod
    def parse(cls, text) -> "CovariateModel":
        if isinstance(text, CovariateModel):
            return text
        if text is None:
            return cls()
        text = str(text).strip().lower()
        if text in ("", "none"):
            return cls()
        kind, _, body = text.partition(":")
        m = 4
        if body:
            key, eq, value = body.partition("=")
            if key.strip() != "m" or not eq:
                raise ConfigError(f"malformed covariate spec {text!r}; expected normal:m=<k>")
            try:
                m = int(value)
            except ValueError:
                raise ConfigError(f"bad covariate count in {text!r}") from None
        return cls(kind.strip(), m)

    def __str__(self):
        return "none" if self.kind == "none" else f"normal:m={self.m}"


@dataclass(frozen=True)
class StudyConfig:
    rule: RuleSpec
    n_max: int = 200
    n_sim: int = 100_000
    seed: int = 20140201
    covariates: CovariateModel = field(default_factory=CovariateModel)
    t: int = 2
    bias_estimator: str = "expectation"

    def __post_init__(self):
        object.__setattr__(self, "rule", parse_rule(self.rule))
        object.__setattr__(self, "covariates", CovariateModel.parse(self.covariates))
        if self.n_max < 2:
            raise ConfigError("n_max must be at least 2")
        if self.n_sim < 1:
            raise ConfigError("n_sim must be at least 1")
        if not 0 <= self.seed < _SEED_LIMIT:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.t != 2:
            raise ConfigError("simulation is implemented for two treatment arms")
        if self.bias_estimator not in ("expectation", "counting"):
            raise ConfigError("bias_estimator must be 'expectation' or 'counting'")
        if self.rule.needs_strata and self.covariates.m == 0:
            raise ConfigError(f"rule {self.rule} needs covariates (e.g. --covariates normal:m=4)")

    @property
    def m(self) -> int:
        return self.covariates.m

    def to_dict(self) -> dict:
        return {
            "rule": str(self.rule),
            "n_max": self.n_max,
            "n_sim": self.n_sim,
            "seed": self.seed,
            "covariates": str(self.covariates),
            "t": self.t,
            "bias_estimator": self.bias_estimator,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        known = {"rule", "n_max", "n_sim", "seed", "covariates", "t", "bias_estimator"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown study config field {sorted(extra)[0]!r}")
        return cls(**data)


@dataclass(frozen=True)
class ReplicateTrace:
    """One simulated trial: loss after and bias before each allocation."""

    loss: np.ndarray
    bias: np.ndarray
    arms: np.ndarray


@dataclass(frozen=True)
class TrajectoryPoint:
    n: int
    bias_adj: float
    loss_adj: float
    bias_adj_se: float
    loss_adj_se: float


@dataclass
class StudyResult:
    config: StudyConfig
    loss_mean: np.ndarray
    loss_se: np.ndarray
    bias_mean: np.ndarray
    bias_se: np.ndarray
    loss_adj: np.ndarray
    loss_adj_se: np.ndarray
    bias_adj: np.ndarray
    bias_adj_se: np.ndarray
    metadata: dict = field(default_factory=dict)
    trajectory: tuple = ()

    @property
    def n(self) -> np.ndarray:
        return np.arange(1, self.config.n_max + 1)

    @property
    def per_n(self) -> list[PerNMetrics]:
        return [
            PerNMetrics(int(k), float(lm), float(bm), float(ls), float(bs))
            for k, lm, bm, ls, bs in zip(self.n, self.loss_mean, self.bias_mean, self.loss_se, self.bias_se)
        ]

    def at(self, n: int) -> dict:
        i = n - 1
        if not 0 <= i < self.config.n_max:
            raise ConfigError(f"n={n} outside 1..{self.config.n_max}")
        return {
            "loss_mean": float(self.loss_mean[i]),
            "loss_se": float(self.loss_se[i]),
            "bias_mean": float(self.bias_mean[i]),
            "bias_se": float(self.bias_se[i]),
            "loss_adj": float(self.loss_adj[i]),
            "loss_adj_se": float(self.loss_adj_se[i]),
            "bias_adj": float(self.bias_adj[i]),
            "bias_adj_se": float(self.bias_adj_se[i]),
        }


# --------------------------------------------------------------------------
# random numbers
# --------------------------------------------------------------------------


def replicate_generator(seed: int, replicate_id: int) -> np.random.Generator:
    key = np.array([seed, replicate_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _draws(config: StudyConfig, start: int, stop: int):
    R, n_max, m = stop - start, config.n_max, config.m
    rule = config.rule
    random_blocks = rule.family == "block" and rule.get("seq") is None
    n_block_draws = 0
    if random_blocks:
        L = rule.block_length
        n_block_draws = L * math.ceil(n_max / L)
    U = np.empty((R, n_max))
    X = np.empty((R, n_max, m)) if m else None
    V = np.empty((R, n_block_draws)) if random_blocks else None
    for k, rep in enumerate(range(start, stop)):
        gen = replicate_generator(config.seed, rep)
        U[k] = gen.random(n_max)
        if m:
            X[k] = gen.standard_normal((n_max, m))
        if random_blocks:
            V[k] = gen.random(n_block_draws)
    return U, X, V


# --------------------------------------------------------------------------
# engine
# --------------------------------------------------------------------------


def _design_probability(rule: RuleSpec, design: DesignState, x: np.ndarray) -> np.ndarray:
    d = derivative_values(design, x)
    ready = design.ready_full
    dd = np.where(ready[:, None], d, 1.0)
    f = rule.family
    if f == "atkinson":
        pi1 = prob_rule_A(dd)[:, 0]
    elif f == "bayes-cov":
        pi1 = prob_rule_B_cov(rule.get("gamma"), dd)[:, 0]
    elif f == "efron-cov":
        pi1 = prob_rule_E_gen(dd, rule.get("p"))[:, 0]
    elif f == "deterministic-cov":
        pi1 = prob_rule_E_gen(dd, 1.0)[:, 0]
    else:  # adjustable-cov
        pi1 = np.asarray(prob_rule_J_cov(rule.get("a"), dd[:, 0], dd[:, 1], design.n))
    return np.where(ready, pi1, 0.5)


def _stratum_probability(rule: RuleSpec, strata: StratumState, cats: np.ndarray) -> np.ndarray:
    f = rule.family
    if f in ("mini", "mini-e"):
        scores = np.stack(
            [minimization_score(strata, cats, 1), minimization_score(strata, cats, 2)], axis=-1
        )
        return np.asarray(prob_rule_M_ME(scores, f == "mini-e", rule.get("p", 1.0)))
    counts = strata.cell_arm_counts(cats)
    if f == "strat-c":
        return np.asarray(prob_rule_C_family(counts, "C"))
    if f == "strat-ce":
        return np.asarray(prob_rule_C_family(counts, "CE", rule.get("p")))
    return np.asarray(prob_rule_C_family(counts, "CJ", rule.get("a")))


def _simulate(config: StudyConfig, U: np.ndarray, X, V) -> ReplicateTrace:
    rule = config.rule
    fam = rule.family
    R, n_max = U.shape
    m = config.m
    counting = config.bias_estimator == "counting"

    n1 = np.zeros(R, dtype=np.int64)
    n2 = np.zeros(R, dtype=np.int64)
    design = DesignState(m, batch=R) if (fam in DESIGN_FAMILIES or m) else None
    strata = StratumState(m, batch=R) if rule.needs_strata else None
    if fam == "block":
        L = rule.block_length
        half = L // 2
        fixed = rule.get("seq")
        if fixed is not None:
            blocks = np.array([1 if ch == "A" else 2 for ch in fixed])
        w1 = np.zeros(R, dtype=np.int64)
        w2 = np.zeros(R, dtype=np.int64)

    loss = np.empty((R, n_max))
    bias = np.empty((R, n_max))
    arms = np.empty((R, n_max), dtype=np.int8)
    for i in range(n_max):
        u = U[:, i]
        x = X[:, i] if m else None
        guess_score = None
        if fam == "block":
            pos = i % L
            if pos == 0:
                w1[:] = 0
                w2[:] = 0
                if fixed is None:
                    block_u = V[:, i : i + L]
                    ranks = np.argsort(np.argsort(block_u, axis=1, kind="stable"), axis=1, kind="stable")
                    blocks = np.where(ranks < half, 1, 2)
            current = blocks[:, pos] if fixed is None else np.full(R, blocks[pos])
            pi1 = (current == 1).astype(float)
            rem1, rem2 = half - w1, half - w2
            if fixed is not None or counting:
                # guess the arm with more places left in the block
                guess1 = rem1 > rem2
                guess_score = np.where(rem1 == rem2, 0.0, np.where(guess1 == (current == 1), 1.0, -1.0))
            else:
                guess_score = np.abs(rem1 - rem2) / (rem1 + rem2)
        elif fam in DESIGN_FAMILIES:
            pi1 = _design_probability(rule, design, x if m else np.zeros((R, 0)))
        elif strata is not None:
            cats = discretize(x)
            pi1 = _stratum_probability(rule, strata, cats)
        else:
            pi1 = np.asarray(prob_treatment1(rule, n1, n2), dtype=float)
            if pi1.ndim == 0:
                pi1 = np.full(R, float(pi1))

        is1 = u < pi1
        if guess_score is not None:
            bias[:, i] = guess_score
        elif counting:
            bias[:, i] = guess_outcome(pi1, is1)
        else:
            bias[:, i] = expected_bias_increment(pi1)

        arm = np.where(is1, 1, 2)
        arms[:, i] = arm
        n1 += is1
        n2 += ~is1
        if fam == "block":
            w1 += is1
            w2 += ~is1
        if design is not None:
            update_design(design, x if m else np.zeros((R, 0)), arm)
        if strata is not None:
            strata.update(cats, arm)
        if m:
            loss[:, i] = variance_loss(design)
        else:
            d = (n1 - n2).astype(float)
            loss[:, i] = d * d / (i + 1)
    return ReplicateTrace(loss, bias, arms)


def run_replicate(config: StudyConfig, replicate_id: int) -> ReplicateTrace:
    """Simulate one trial; a pure function of ``(config, replicate_id)``."""
    U, X, V = _draws(config, replicate_id, replicate_id + 1)
    tr = _simulate(config, U, X, V)
    return ReplicateTrace(tr.loss[0], tr.bias[0], tr.arms[0])


@dataclass
class _ChunkSums:
    loss: MomentSums
    bias: MomentSums
    loss_adj: MomentSums
    bias_adj: MomentSums

    def merge(self, other: "_ChunkSums") -> "_ChunkSums":
        return _ChunkSums(
            self.loss.merge(other.loss),
            self.bias.merge(other.bias),
            self.loss_adj.merge(other.loss_adj),
            self.bias_adj.merge(other.bias_adj),
        )


def _adjacent_traces(traces: np.ndarray) -> np.ndarray:
    out = np.full_like(traces, np.nan)
    out[:, 1:] = 0.5 * (traces[:, :-1] + traces[:, 1:])
    return out


def _chunk_job(args) -> _ChunkSums:
    config_dict, start, stop = args
    config = StudyConfig.from_dict(config_dict)
    tr = _simulate(config, *_draws(config, start, stop))
    return _ChunkSums(
        MomentSums.from_traces(tr.loss),
        MomentSums.from_traces(tr.bias),
        MomentSums.from_traces(_adjacent_traces(tr.loss)),
        MomentSums.from_traces(_adjacent_traces(tr.bias)),
    )


def run_study(config: StudyConfig, workers: int = 1, chunk_size: int = CHUNK_SIZE) -> StudyResult:
    """Average ``n_sim`` replicates into per-n loss and bias with standard errors.

    ``chunk_size`` fixes the summation order; results are identical for any
    ``workers`` at a given chunk size.
    """
    bounds = [(s, min(s + chunk_size, config.n_sim)) for s in range(0, config.n_sim, chunk_size)]
    jobs = [(config.to_dict(), s, e) for s, e in bounds]
    if workers <= 1 or len(jobs) == 1:
        parts = map(_chunk_job, jobs)
        total = _merge(parts)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            total = _merge(pool.map(_chunk_job, jobs))
    metadata = {
        "version": __version__,
        "config": config.to_dict(),
        "chunk_size": chunk_size,
        "rng": "numpy Philox keyed by (seed, replicate_id)",
        "covariate_draws": "fresh per replicate" if config.m else "none",
    }
    result = StudyResult(
        config=config,
        loss_mean=total.loss.mean(),
        loss_se=total.loss.se(),
        bias_mean=total.bias.mean(),
        bias_se=total.bias.se(),
        loss_adj=total.loss_adj.mean(),
        loss_adj_se=total.loss_adj.se(),
        bias_adj=total.bias_adj.mean(),
        bias_adj_se=total.bias_adj.se(),
        metadata=metadata,
    )
    marks = tuple(k for k in DEFAULT_MARKS if k <= config.n_max)
    result.trajectory = tuple(admissibility_trajectory(result, marks))
    return result


def _merge(parts) -> _ChunkSums:
    total = None
    for part in parts:
        total = part if total is None else total.merge(part)
    return total


def admissibility_trajectory(result: StudyResult, marks=DEFAULT_MARKS) -> list[TrajectoryPoint]:
    """Adjacent-averaged ``(bias, loss)`` at the marked sample sizes."""
    points = []
    for k in marks:
        k = int(k)
        if not 2 <= k <= result.config.n_max:
            raise ConfigError(f"mark n={k} outside 2..{result.config.n_max}")
        i = k - 1
        points.append(
            TrajectoryPoint(
                k,
                float(result.bias_adj[i]),
                float(result.loss_adj[i]),
                float(result.bias_adj_se[i]),
                float(result.loss_adj_se[i]),
            )
        )
    return points


def adjacent_from_means(result: StudyResult) -> tuple[np.ndarray, np.ndarray]:
    """Adjacent averages computed from the per-n means (equal to the stored ones)."""
    return adjacent_average(result.loss_mean), adjacent_average(result.bias_mean)
