"""Multi-cohort multiple-instance learning with cohort-aware attention,
adversarial mutual-information regularization, and hierarchical sample
balancing, on a self-contained reverse-mode autodiff core.
"""

from .backend import ACTIVE_BACKEND

__version__ = "0.1.0"

__all__ = ["ACTIVE_BACKEND", "__version__"]
