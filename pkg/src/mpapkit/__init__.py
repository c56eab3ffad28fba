"""Noninvasive mPAP estimation: Windkessel and wave-power features, boosted trees,
cross-validated tuning and ROC threshold selection."""
from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
