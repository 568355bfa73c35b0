"""Biased-coin treatment allocation: rules, exact analysis and Monte Carlo.

Typical use::

    from biasedcoin import StudyConfig, run_study
    res = run_study(StudyConfig("efron:p=2/3", n_sim=20000, seed=1))
    res.bias_mean[-2:]
"""

__version__ = "0.1.0"

from .errors import BiasedCoinError, ConfigError, ConvergenceError, ParameterError, StateError  # noqa: E402
from .rules import RuleSpec, TrialCounts, parse_rule  # noqa: E402
from .simulate import StudyConfig, StudyResult, admissibility_trajectory, run_replicate, run_study  # noqa: E402

__all__ = [
    "__version__",
    "BiasedCoinError",
    "ConfigError",
    "ConvergenceError",
    "ParameterError",
    "StateError",
    "RuleSpec",
    "TrialCounts",
    "parse_rule",
    "StudyConfig",
    "StudyResult",
    "run_study",
    "run_replicate",
    "admissibility_trajectory",
]
