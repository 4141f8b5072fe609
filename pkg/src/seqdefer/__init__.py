"""seqdefer: learning to defer for sequence outputs.

Token-level and one-time partial deferral between a sequence model and an
expert: convex surrogate losses, model-based rejectors trained with a minimal
reverse-mode autodiff, confidence baselines, deferral-curve evaluation, desk
scale tasks, and a brute-force consistency lab for the surrogates.
"""

__version__ = "0.1.0"

from . import core, surrogates  # noqa: F401
