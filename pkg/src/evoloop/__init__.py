"""evoloop: a self-evolving imitation-learning data engine.

From four scripted seed demonstrations, a lightweight collector policy
generates rollouts in parallel simulated environments, a verifier scores and
gates them, the curated dataset grows iteration by iteration, and a
flow-matching target policy is retrained from scratch on each version.
"""

__version__ = "0.1.0"
