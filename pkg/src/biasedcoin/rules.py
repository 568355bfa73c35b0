"""Allocation-probability functions for the covariate-free biased-coin rules.

Every probability is that of allocating treatment 1 to the next patient.
The functions accept scalars or numpy arrays of states so the same code
serves single-trial use and the vectorised simulator; scalar input gives a
plain ``float`` back.

Treatments are numbered 1 and 2 and the imbalance is ``d = n1 - n2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ParameterError, StateError

__all__ = [
    "TrialCounts",
    "RuleSpec",
    "BlockContext",
    "parse_rule",
    "prob_efron",
    "prob_adjustable",
    "prob_imbalance_tolerance",
    "prob_smith",
    "prob_wei",
    "prob_bayes",
    "prob_deterministic",
    "prob_treatment1",
    "next_block_probability",
    "draw_block",
    "allocation_probability",
    "allocate",
]


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialCounts:
    """Per-arm allocation counts after ``n`` patients."""

    counts: tuple[int, ...] = (0, 0)

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) < 2:
            raise ParameterError("at least two treatment arms are required")
        if any(c < 0 for c in counts):
            raise ParameterError(f"negative allocation count in {counts}")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_pair(cls, n1: int, n2: int) -> "TrialCounts":
        return cls((n1, n2))

    @property
    def t(self) -> int:
        return len(self.counts)

    @property
    def n(self) -> int:
        return sum(self.counts)

    @property
    def n1(self) -> int:
        return self.counts[0]

    @property
    def n2(self) -> int:
        return self.counts[1]

    @property
    def d(self) -> int:
        if self.t != 2:
            raise StateError("the imbalance d is defined for two arms only")
        return self.counts[0] - self.counts[1]

    def add(self, arm: int) -> "TrialCounts":
        """Counts after one more patient on ``arm`` (1-based)."""
        if not 1 <= arm <= self.t:
            raise ParameterError(f"arm {arm} outside 1..{self.t}")
        counts = list(self.counts)
        counts[arm - 1] += 1
        return TrialCounts(tuple(counts))


def _arm_counts(counts):
    if isinstance(counts, TrialCounts):
        if counts.t != 2:
            raise StateError("two-arm rule applied to a multi-arm state")
        return float(counts.n1), float(counts.n2)
    n1, n2 = counts
    return np.asarray(n1, dtype=float), np.asarray(n2, dtype=float)


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


# --------------------------------------------------------------------------
# probability functions
# --------------------------------------------------------------------------


def _check_p(p):
    if not 0.5 <= p <= 1.0:
        raise ParameterError(f"biased-coin probability p={p} outside [0.5, 1]")


def prob_efron(p: float, d):
    """Efron's coin: ``p`` for the under-represented arm, a fair coin on ties."""
    _check_p(p)
    d = np.asarray(d)
    return _out(np.where(d < 0, p, np.where(d > 0, 1.0 - p, 0.5)))


def prob_deterministic(d):
    return prob_efron(1.0, d)


def prob_adjustable(a: float, d):
    """Adjustable biased coin ``|d|^a / (1 + |d|^a)`` for the lagging arm.

    Evaluated as ``expit(a log|d|)`` so large ``|d|`` or ``a`` cannot
    overflow. Non-integer ``d`` is allowed (covariate pseudo-differences).
    """
    if a < 0:
        raise ParameterError(f"adjustable-coin exponent a={a} must be >= 0")
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = a * np.log(np.abs(d))
        lagging = expit(x)
        leading = expit(-x)
    return _out(np.where(d < 0, lagging, np.where(d > 0, leading, 0.5)))


def prob_imbalance_tolerance(p: float, barrier: int, d):
    """Efron's coin with reflecting barriers at ``+-barrier``.

    ``p = 0.5`` gives the big-stick design.
    """
    _check_p(p)
    if int(barrier) != barrier or barrier < 1:
        raise ParameterError(f"barrier b={barrier} must be an integer >= 1")
    d = np.asarray(d)
    if np.any(np.abs(d) > barrier):
        raise StateError(f"imbalance beyond the barrier {barrier}")
    inner = np.where(d < 0, p, np.where(d > 0, 1.0 - p, 0.5))
    return _out(np.where(d <= -barrier, 1.0, np.where(d >= barrier, 0.0, inner)))


def prob_smith(rho: float, counts):
    """Smith's rule ``n2^rho / (n1^rho + n2^rho)``.

    A fair coin is used before the first allocation; with one arm empty
    afterwards the empty arm is chosen (for ``rho > 0``).
    """
    if rho < 0:
        raise ParameterError(f"Smith exponent rho={rho} must be >= 0")
    n1, n2 = _arm_counts(counts)
    if rho == 0:
        return _out(np.broadcast_to(0.5, np.broadcast(n1, n2).shape))
    with np.errstate(divide="ignore", invalid="ignore"):
        x = rho * (np.log(n2) - np.log(n1))
        prob = expit(x)
    return _out(np.where(n1 + n2 == 0, 0.5, prob))


def prob_wei(counts):
    """Wei's linear rule ``(1 - d/n) / 2``; a fair coin at ``n = 0``."""
    n1, n2 = _arm_counts(counts)
    n = n1 + n2
    with np.errstate(divide="ignore", invalid="ignore"):
        prob = 0.5 * (1.0 - (n1 - n2) / n)
    return _out(np.where(n == 0, 0.5, prob))


def prob_bayes(gamma: float, counts):
    """Bayesian rule balancing randomness against estimation precision.

    Until both arms hold a patient the allocation is a fair coin.
    """
    if gamma == 0:
        raise ParameterError("gamma = 0 is deterministic allocation; use the 'deterministic' rule")
    if not 0 < gamma <= 1:
        raise ParameterError(f"Bayes parameter gamma={gamma} outside (0, 1]")
    n1, n2 = _arm_counts(counts)
    startup = (n1 == 0) | (n2 == 0)
    m1 = np.where(startup, 1.0, n1)
    m2 = np.where(startup, 1.0, n2)
    n = m1 + m2
    # log-weights of the two arms; d(1) = n2 / (n n1) without covariates
    w1 = np.log1p(m2 / (n * m1)) / gamma
    w2 = np.log1p(m1 / (n * m2)) / gamma
    return _out(np.where(startup, 0.5, expit(w1 - w2)))


# --------------------------------------------------------------------------
# rule specification
# --------------------------------------------------------------------------

# family -> (required params, optional params with defaults)
_FAMILIES: dict[str, tuple[tuple[str, ...], dict]] = {
    "random": ((), {}),
    "deterministic": ((), {}),
    "efron": ((), {"p": 2.0 / 3.0}),
    "adjustable": (("a",), {}),
    "imbtol": (("b",), {"p": 2.0 / 3.0}),
    "bigstick": (("b",), {}),
    "block": ((), {"len": None, "seq": None}),
    "smith": (("rho",), {}),
    "wei": ((), {}),
    "bayes": (("gamma",), {}),
    # covariate-aware families
    "mini": ((), {}),
    "mini-e": ((), {"p": 2.0 / 3.0}),
    "strat-c": ((), {}),
    "strat-ce": ((), {"p": 2.0 / 3.0}),
    "strat-cj": (("a",), {}),
    "atkinson": ((), {}),
    "bayes-cov": (("gamma",), {}),
    "efron-cov": ((), {"p": 2.0 / 3.0}),
    "adjustable-cov": (("a",), {}),
    "deterministic-cov": ((), {}),
}

_ALIASES = {
    "r": "random",
    "d": "deterministic",
    "e": "efron",
    "j": "adjustable",
    "imbalance-tolerance": "imbtol",
    "big-stick": "bigstick",
    "permuted-block": "block",
    "s": "smith",
    "b": "bayes",
    "minimization": "mini",
    "a": "atkinson",
}

COUNT_FAMILIES = frozenset(
    {"random", "deterministic", "efron", "adjustable", "imbtol", "bigstick", "smith", "wei", "bayes"}
)
#: families whose allocation probability depends on the imbalance d only
MARKOV_FAMILIES = frozenset({"random", "deterministic", "efron", "adjustable", "imbtol", "bigstick"})
DESIGN_FAMILIES = frozenset({"atkinson", "bayes-cov", "efron-cov", "adjustable-cov", "deterministic-cov"})
STRATUM_FAMILIES = frozenset({"mini", "mini-e", "strat-c", "strat-ce", "strat-cj"})


def _parse_value(key: str, text: str):
    if key == "seq":
        return text.strip().upper()
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse value {text!r} for parameter {key!r}") from None


def _fmt_value(v) -> str:
    if isinstance(v, str):
        return v
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


@dataclass(frozen=True)
class RuleSpec:
    """A rule family with validated parameters.

    ``params`` is stored as a sorted tuple of ``(key, value)`` pairs so the
    spec is hashable; use :meth:`get` or the attribute shortcuts.
    """

    family: str
    params: tuple = field(default=())

    def __post_init__(self):
        family = _ALIASES.get(self.family.lower(), self.family.lower())
        if family not in _FAMILIES:
            raise ConfigError(f"unknown rule family {self.family!r}")
        required, optional = _FAMILIES[family]
        given = dict(self.params.items() if isinstance(self.params, Mapping) else self.params)
        unknown = set(given) - set(required) - set(optional)
        if unknown:
            raise ConfigError(f"unknown parameter {sorted(unknown)[0]!r} for rule {family!r}")
        missing = [k for k in required if k not in given]
        if missing:
            raise ConfigError(f"rule {family!r} needs parameter {missing[0]!r}")
        params = {k: v for k, v in optional.items() if v is not None}
        params.update(given)
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "params", tuple(sorted(params.items())))
        self._validate()

    def _validate(self):
        f, g = self.family, self.get
        if "p" in self:
            _check_p(g("p"))
        if f in ("adjustable", "strat-cj", "adjustable-cov") and g("a") < 0:
            raise ParameterError(f"exponent a={g('a')} must be >= 0")
        if f in ("imbtol", "bigstick"):
            b = g("b")
            if int(b) != b or b < 1:
                raise ParameterError(f"barrier b={b} must be an integer >= 1")
        if f == "smith" and g("rho") < 0:
            raise ParameterError(f"Smith exponent rho={g('rho')} must be >= 0")
        if f in ("bayes", "bayes-cov"):
            gamma = g("gamma")
            if gamma == 0:
                raise ParameterError("gamma = 0 is deterministic allocation; use the 'deterministic' rule")
            if not 0 < gamma <= 1:
                raise ParameterError(f"Bayes parameter gamma={gamma} outside (0, 1]")
        if f == "block":
            seq, length = g("seq"), g("len")
            if seq is None and length is None:
                raise ConfigError("block rule needs 'len' or 'seq'")
            if seq is not None:
                BlockContext.from_string(seq)
                if length is not None and int(length) != len(seq):
                    raise ParameterError("block 'len' disagrees with the fixed sequence")
            else:
                if int(length) != length or length < 2 or int(length) % 2:
                    raise ParameterError(f"block length {length} must be an even integer >= 2")

    def __contains__(self, key):
        return any(k == key for k, _ in self.params)

    def get(self, key, default=None):
        for k, v in self.params:
            if k == key:
                return v
        return default

    @property
    def block_length(self) -> int:
        seq = self.get("seq")
        return len(seq) if seq is not None else int(self.get("len"))

    @property
    def uses_covariates(self) -> bool:
        return self.family in DESIGN_FAMILIES or self.family in STRATUM_FAMILIES

    @property
    def needs_strata(self) -> bool:
        return self.family in STRATUM_FAMILIES

    def __str__(self):
        if not self.params:
            return self.family
        body = ",".join(f"{k}={_fmt_value(v)}" for k, v in self.params)
        return f"{self.family}:{body}"

    @property
    def label(self) -> str:
        """Short display label in the usual letter notation, e.g. ``E(2/3)``."""

        def num(v):
            if abs(v - 2.0 / 3.0) < 1e-3:
                return "2/3"
            return f"{v:g}"

        f, g = self.family, self.get
        simple = {
            "random": "R", "deterministic": "D", "wei": "W", "mini": "M",
            "strat-c": "C", "atkinson": "A", "deterministic-cov": "D",
        }
        if f in simple:
            return simple[f]
        if f in ("efron", "efron-cov"):
            return f"E({num(g('p'))})"
        if f in ("adjustable", "adjustable-cov"):
            return f"J({num(g('a'))})"
        if f == "imbtol":
            return f"IT({num(g('p'))},{int(g('b'))})"
        if f == "bigstick":
            return f"BS({int(g('b'))})"
        if f == "block":
            return f"P({self.block_length})"
        if f == "smith":
            return f"S({num(g('rho'))})"
        if f in ("bayes", "bayes-cov"):
            return f"B({num(g('gamma'))})"
        if f == "mini-e":
            return f"ME({num(g('p'))})"
        if f == "strat-ce":
            return f"CE({num(g('p'))})"
        return f"CJ({num(g('a'))})"


def parse_rule(text: str) -> RuleSpec:
    """Parse ``family[:key=value[,key=value]]`` into a :class:`RuleSpec`.

    >>> str(parse_rule("imbtol:p=2/3,b=3"))
    'imbtol:b=3,p=0.6666666666666666'
    """
    if isinstance(text, RuleSpec):
        return text
    text = text.strip()
    if not text:
        raise ConfigError("empty rule string")
    family, _, body = text.partition(":")
    params = {}
    if body.strip():
        for token in body.split(","):
            key, eq, value = token.partition("=")
            key = key.strip()
            if not eq or not key:
                raise ConfigError(f"malformed rule parameter {token!r} in {text!r}")
            params[key] = _parse_value(key, value)
    return RuleSpec(family.strip(), tuple(params.items()))


def prob_treatment1(rule: RuleSpec, n1, n2):
    """Probability of treatment 1 for any count-based rule, vectorised."""
    f = rule.family
    n1 = np.asarray(n1)
    n2 = np.asarray(n2)
    d = n1 - n2
    if f == "random":
        return _out(np.broadcast_to(0.5, d.shape))
    if f == "deterministic":
        return prob_deterministic(d)
    if f == "efron":
        return prob_efron(rule.get("p"), d)
    if f == "adjustable":
        return prob_adjustable(rule.get("a"), d)
    if f == "imbtol":
        return prob_imbalance_tolerance(rule.get("p"), int(rule.get("b")), d)
    if f == "bigstick":
        return prob_imbalance_tolerance(0.5, int(rule.get("b")), d)
    if f == "smith":
        return prob_smith(rule.get("rho"), (n1, n2))
    if f == "wei":
        return prob_wei((n1, n2))
    if f == "bayes":
        return prob_bayes(rule.get("gamma"), (n1, n2))
    raise ConfigError(f"rule {rule} is not a count-based rule")


# --------------------------------------------------------------------------
# permuted blocks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockContext:
    """A realised balanced block and the position of the next patient in it."""

    sequence: tuple[int, ...]
    position: int = 0

    def __post_init__(self):
        seq = tuple(int(s) for s in self.sequence)
        if not seq or len(seq) % 2 or set(seq) - {1, 2} or seq.count(1) != seq.count(2):
            raise ParameterError(f"block {seq} is not a balanced two-arm sequence")
        if not 0 <= self.position < len(seq):
            raise StateError(f"block position {self.position} outside a block of length {len(seq)}")
        object.__setattr__(self, "sequence", seq)

    @classmethod
    def from_string(cls, text: str, position: int = 0) -> "BlockContext":
        """Build from letters, ``A`` for treatment 1 and ``B`` for treatment 2."""
        mapping = {"A": 1, "B": 2, "1": 1, "2": 2}
        try:
            seq = tuple(mapping[ch] for ch in text.strip().upper())
        except KeyError as err:
            raise ParameterError(f"block sequence {text!r} has a symbol other than A/B") from err
        return cls(seq, position)

    @property
    def length(self) -> int:
        return len(self.sequence)

    def within_block_counts(self) -> tuple[int, int]:
        done = self.sequence[: self.position]
        return done.count(1), done.count(2)

    def advance(self) -> "BlockContext":
        """Context for the following patient; raises at the end of the block."""
        if self.position + 1 >= self.length:
            raise StateError("block exhausted; draw a new block")
        return BlockContext(self.sequence, self.position + 1)


def draw_block(length: int, uniforms) -> tuple[int, ...]:
    """Uniformly random balanced sequence from ``length`` uniform draws.

    The ranks of the draws give a uniform random permutation; the first half
    of the ranks receive treatment 1.
    """
    uniforms = np.asarray(uniforms, dtype=float)
    if uniforms.shape != (length,):
        raise ParameterError(f"need exactly {length} uniforms for one block")
    ranks = np.argsort(np.argsort(uniforms, kind="stable"), kind="stable")
    return tuple(int(x) for x in np.where(ranks < length // 2, 1, 2))


def next_block_probability(ctx: BlockContext) -> float:
    return 1.0 if ctx.sequence[ctx.position] == 1 else 0.0


# --------------------------------------------------------------------------
# single allocation
# --------------------------------------------------------------------------


def allocation_probability(rule: RuleSpec, state: TrialCounts, block: BlockContext | None = None) -> float:
    if rule.family == "block":
        if block is None:
            raise StateError("permuted-block allocation needs a BlockContext")
        return next_block_probability(block)
    if rule.uses_covariates:
        raise ConfigError(f"rule {rule} needs covariates; see biasedcoin.covariates")
    return float(prob_treatment1(rule, state.n1, state.n2))


def allocate(rule: RuleSpec, state: TrialCounts, u: float, block: BlockContext | None = None):
    """Allocate one patient: treatment 1 iff ``u < P(treatment 1)``.

    Returns ``(treatment, new_state)``.
    """
    prob = allocation_probability(rule, state, block)
    arm = 1 if u < prob else 2
    return arm, state.add(arm)


def iter_families() -> Iterable[str]:
    return iter(_FAMILIES)
