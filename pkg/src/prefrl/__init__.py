"""Reinforcement learning from trajectory preferences.

Two agents that learn only from pairwise trajectory comparisons:
randomized least-squares value iteration for linear MDPs (``pr_lsvi``) and
posterior sampling for tabular MDPs (``pbts``), plus environments, exact
regret accounting and a command-line experiment runner.
"""

__version__ = "0.1.0"
