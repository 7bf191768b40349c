"""Tax-evasion decisions of a firm facing audits and optional closure.

Modules: :mod:`~taxdqn.env` (the Markov model), :mod:`~taxdqn.dp` (exact
value iteration), :mod:`~taxdqn.nn` (two-head MLP), :mod:`~taxdqn.dqn`
(double DQN), :mod:`~taxdqn.analysis` and :mod:`~taxdqn.cli`.
"""
from .env import ClosureScenario, TaxEnv, TaxParams

__version__ = "0.1.0"
__all__ = ["ClosureScenario", "TaxEnv", "TaxParams", "__version__"]
