"""Self-learning Koopman secure voltage estimation for battery packs."""

__version__ = "0.1.0"
