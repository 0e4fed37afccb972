"""Bayesian subspace HMM for acoustic unit discovery.

The package learns a low-dimensional phonetic subspace of HMM-GMM
parameters from labeled source languages and then clusters unlabeled
target speech into pseudo-phones constrained to that subspace.
"""

__version__ = "0.1.0"


class UsageError(ValueError):
    """Invalid arguments or inconsistent dimensions."""


class FormatError(ValueError):
    """Malformed or corrupted input file."""


class InfeasibleAlignmentError(ValueError):
    """No path of the requested length exists in a decode graph."""
