"""Exception types shared across the package."""

from __future__ import annotations

import numpy as np


class SingularMatrixError(np.linalg.LinAlgError):
    """A matrix stayed non positive definite through the whole jitter ladder."""

    def __init__(self, name: str, jitter: float):
        self.name = name
        self.jitter = jitter
        super().__init__(
            f"{name} is not positive definite (last jitter tried: {jitter:g})"
        )


class InvalidStateError(ValueError):
    """A sampler was handed a state whose log density is not finite."""


class PartialResultsError(RuntimeError):
    """Some MCMC chains failed; the completed ones are attached.

    Attributes
    ----------
    chains : list
        Chains that finished before the failure.
    failures : list of (index, Exception)
    """

    def __init__(self, chains, failures):
        self.chains = chains
        self.failures = failures
        msgs = "; ".join(f"chain {i}: {e}" for i, e in failures)
        super().__init__(f"{len(failures)} chain(s) failed ({msgs})")


class DegenerateSwarmError(RuntimeError):
    """Every particle weight underflowed to zero after a reweighting step."""


class TemperingStallError(RuntimeError):
    """The temperature ladder did not reach 1 within the cycle budget.

    Carries the partial ladder so callers can inspect progress.
    """

    def __init__(self, message, ladder):
        self.ladder = ladder
        super().__init__(message)


class DegeneratePsrfError(ValueError):
    """Between/within variance ratio is undefined (zero within-chain variance)."""


class FitError(RuntimeError):
    """A maximum likelihood fit failed (degenerate input or no admissible optimum)."""


class ConfigError(ValueError):
    """A run configuration failed validation (unknown key, bad value)."""
