"""Desk-scale laboratory for KL-regularized RL fine-tuning of tiny sequence policies.

Trains task-reward, tilted, distribution-sharpening and tempered regimes on
synthetic verifiable tasks and checks every piece against exact enumeration.
"""

__version__ = "0.1.0"
