"""Meta-RL with disentangled task inference and imagined tasks."""
__version__ = "0.1.0"
