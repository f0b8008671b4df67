"""Label quality assessment for segmentation masks.

A small regression head predicts the Dice score of a candidate mask from a
frozen image embedding and a class text embedding. It is trained with squared
error plus a hinge ranking loss on pairs found by a linear assignment solver.
"""

__version__ = "0.1.0"

from .assignment import DEFAULT_BACKEND, build_pairs, solve_lap  # noqa: E402

__all__ = ["__version__", "DEFAULT_BACKEND", "build_pairs", "solve_lap"]
