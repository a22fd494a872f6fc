"""Meta-learning laboratory: synthetic benchmarks, second-order MAML and dCCA."""

__version__ = "0.1.0"
