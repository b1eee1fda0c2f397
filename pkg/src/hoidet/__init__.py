"""Set-prediction human-object interaction detector on synthetic scenes.

Three transformer decoder branches (human, object, interaction) over
patch-embedded image tokens exchange a per-instance relational context
vector each layer; training uses Hungarian-matched box/class losses
with intermediate supervision, inference keeps the top-k scored
(query, interaction) pairs. Everything runs on an in-package float64
autodiff core so gradients are finite-difference checkable.
"""

from .backend import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
