"""Stationary covariance functions and their hyperpriors.

Kernels form a small expression tree (base kernels plus sum/product nodes).
Hyperparameters are exposed as a flat positive vector in depth-first order so
samplers can treat the tree as an opaque parameter block; proposals act on the
log axis and map back through :meth:`Kernel.with_theta`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("kernel inputs must be finite")


def _check_positive(name: str, value: float) -> None:
    if not (np.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be positive and finite, got {value!r}")


class Kernel:
    """Base class: stationary in the scalar input, unit amplitude at lag zero."""

    def _value(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, x2):
        x = np.asarray(x, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        _check_finite(x, x2)
        out = self._value(x - x2)
        return float(out) if out.ndim == 0 else out

    def gram(self, xs, xs2=None) -> np.ndarray:
        """Covariance matrix between two input grids (symmetric when xs2 is None)."""
        xs = np.asarray(xs, dtype=float)
        other = xs if xs2 is None else np.asarray(xs2, dtype=float)
        _check_finite(xs, other)
        k = self._value(np.subtract.outer(xs, other))
        if xs2 is None and k.size:
            k = 0.5 * (k + k.T)  # exact symmetry despite rounding
        return k

    # -- flat hyperparameter block ------------------------------------------
    def param_names(self) -> list[str]:
        raise NotImplementedError

    @property
    def theta(self) -> np.ndarray:
        raise NotImplementedError

    def with_theta(self, values) -> "Kernel":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(self.param_names()),):
            raise ValueError(
                f"expected {len(self.param_names())} hyperparameters, "
                f"got shape {values.shape}"
            )
        out, rest = self._rebuild(list(values))
        assert not rest
        return out

    def _rebuild(self, values: list[float]):
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Rbf(Kernel):
    """Squared-exponential: exp(-(x - x')^2 / (2 l^2))."""

    lengthscale: float = 1.0

    def __post_init__(self):
        _check_positive("lengthscale", self.lengthscale)

    def _value(self, r):
        return np.exp(-(r**2) / (2.0 * self.lengthscale**2))

    def param_names(self):
        return ["rbf.lengthscale"]

    @property
    def theta(self):
        return np.array([self.lengthscale])

    def _rebuild(self, values):
        return Rbf(values[0]), values[1:]

    def to_json(self):
        return {"type": "rbf", "params": {"lengthscale": self.lengthscale}}


@dataclass(frozen=True)
class Matern12(Kernel):
    """Exponential decay in |x - x'|, parameterized as exp(-|x - x'| / (2 l^2)).

    The denominator uses 2 l^2 (not the textbook plain lengthscale) so that l
    lives on the same squared scale as the RBF lengthscale.
    """

    lengthscale: float = 1.0

    def __post_init__(self):
        _check_positive("lengthscale", self.lengthscale)

    def _value(self, r):
        return np.exp(-np.abs(r) / (2.0 * self.lengthscale**2))

    def param_names(self):
        return ["matern12.lengthscale"]

    @property
    def theta(self):
        return np.array([self.lengthscale])

    def _rebuild(self, values):
        return Matern12(values[0]), values[1:]

    def to_json(self):
        return {"type": "matern12", "params": {"lengthscale": self.lengthscale}}


@dataclass(frozen=True)
class Periodic(Kernel):
    """Exact repetition with period p: exp(-2 sin^2(pi |x - x'| / p) / l^2)."""

    period: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        _check_positive("period", self.period)
        _check_positive("lengthscale", self.lengthscale)

    def _value(self, r):
        s = np.sin(np.pi * np.abs(r) / self.period)
        return np.exp(-2.0 * s**2 / self.lengthscale**2)

    def param_names(self):
        return ["periodic.period", "periodic.lengthscale"]

    @property
    def theta(self):
        return np.array([self.period, self.lengthscale])

    def _rebuild(self, values):
        return Periodic(values[0], values[1]), values[2:]

    def to_json(self):
        return {
            "type": "periodic",
            "params": {"period": self.period, "lengthscale": self.lengthscale},
        }


@dataclass(frozen=True)
class LocallyPeriodic(Kernel):
    """Periodic pattern whose shape drifts on a ``decay`` lengthscale.

    Product of the periodic form (period, lengthscale) with an RBF envelope
    exp(-(x - x')^2 / (2 decay^2)).
    """

    period: float = 1.0
    lengthscale: float = 1.0
    decay: float = 1.0

    def __post_init__(self):
        _check_positive("period", self.period)
        _check_positive("lengthscale", self.lengthscale)
        _check_positive("decay", self.decay)

    def _value(self, r):
        s = np.sin(np.pi * np.abs(r) / self.period)
        per = np.exp(-2.0 * s**2 / self.lengthscale**2)
        env = np.exp(-(r**2) / (2.0 * self.decay**2))
        return per * env

    def param_names(self):
        return [
            "locally_periodic.period",
            "locally_periodic.lengthscale",
            "locally_periodic.decay",
        ]

    @property
    def theta(self):
        return np.array([self.period, self.lengthscale, self.decay])

    def _rebuild(self, values):
        return LocallyPeriodic(values[0], values[1], values[2]), values[3:]

    def to_json(self):
        return {
            "type": "locally_periodic",
            "params": {
                "period": self.period,
                "lengthscale": self.lengthscale,
                "decay": self.decay,
            },
        }


class _Combinator(Kernel):
    op_name = ""

    def __init__(self, *children: Kernel):
        if len(children) < 2:
            raise ValueError(f"{self.op_name} kernel needs at least two children")
        if not all(isinstance(c, Kernel) for c in children):
            raise TypeError("children must be kernels")
        self.children = tuple(children)

    def param_names(self):
        return [
            f"{self.op_name}{i}.{name}"
            for i, c in enumerate(self.children)
            for name in c.param_names()
        ]

    @property
    def theta(self):
        parts = [c.theta for c in self.children]
        return np.concatenate(parts) if parts else np.empty(0)

    def _rebuild(self, values):
        rebuilt = []
        for c in self.children:
            k, values = c._rebuild(values)
            rebuilt.append(k)
        return type(self)(*rebuilt), values

    def to_json(self):
        return {"type": self.op_name, "children": [c.to_json() for c in self.children]}

    def __eq__(self, other):
        return type(other) is type(self) and other.children == self.children

    def __repr__(self):
        inner = ", ".join(repr(c) for c in self.children)
        return f"{type(self).__name__}({inner})"


class Sum(_Combinator):
    """Pointwise sum of child kernels; note k(x, x) then exceeds 1."""

    op_name = "sum"

    def _value(self, r):
        out = self.children[0]._value(r)
        for c in self.children[1:]:
            out = out + c._value(r)
        return out


class Product(_Combinator):
    """Pointwise product of child kernels."""

    op_name = "product"

    def _value(self, r):
        out = self.children[0]._value(r)
        for c in self.children[1:]:
            out = out * c._value(r)
        return out


_BASE_TYPES = {
    "rbf": Rbf,
    "matern12": Matern12,
    "periodic": Periodic,
    "locally_periodic": LocallyPeriodic,
}


def kernel_from_json(obj: dict) -> Kernel:
    """Parse the declarative kernel description used in configs and manifests.

    Schema: {"type": ..., "params": {...}} for leaves,
    {"type": "sum"|"product", "children": [...]} for combinators.
    """
    if not isinstance(obj, dict) or "type" not in obj:
        raise ValueError("kernel description must be an object with a 'type' key")
    kind = obj["type"]
    if kind in ("sum", "product"):
        children = obj.get("children")
        if not isinstance(children, list) or len(children) < 2:
            raise ValueError(f"'{kind}' kernel needs a list of >= 2 children")
        cls = Sum if kind == "sum" else Product
        return cls(*[kernel_from_json(c) for c in children])
    if kind not in _BASE_TYPES:
        raise ValueError(f"unknown kernel type {kind!r}")
    params = obj.get("params", {})
    if not isinstance(params, dict):
        raise ValueError("'params' must be an object")
    try:
        return _BASE_TYPES[kind](**params)
    except TypeError as e:
        raise ValueError(f"bad parameters for kernel {kind!r}: {e}") from e


@dataclass(frozen=True)
class LogNormalPrior:
    """Log-normal hyperprior: log(theta) ~ Normal(mu_log, sigma_log^2)."""

    mu_log: float = 0.0
    sigma_log: float = 1.0

    def __post_init__(self):
        _check_positive("sigma_log", self.sigma_log)

    def logpdf(self, theta: float) -> float:
        """Density on the positive axis; -inf for theta <= 0."""
        if not np.isfinite(theta):
            raise ValueError(f"hyperparameter must be finite, got {theta!r}")
        if theta <= 0:
            return -np.inf
        z = (math.log(theta) - self.mu_log) / self.sigma_log
        return -math.log(theta) - math.log(self.sigma_log) - 0.5 * (_LOG_2PI + z * z)

    def logpdf_log(self, log_theta: float) -> float:
        """Density of log(theta) itself (the axis random-walk proposals act on)."""
        z = (log_theta - self.mu_log) / self.sigma_log
        return -math.log(self.sigma_log) - 0.5 * (_LOG_2PI + z * z)

    def sample(self, rng: np.random.Generator, size=None):
        return np.exp(rng.normal(self.mu_log, self.sigma_log, size=size))

    def to_json(self):
        return {"mu_log": self.mu_log, "sigma_log": self.sigma_log}


def default_priors(kernel: Kernel) -> tuple[LogNormalPrior, ...]:
    """One standard log-normal prior per hyperparameter."""
    return tuple(LogNormalPrior() for _ in kernel.param_names())


def log_prior(priors, theta) -> float:
    """Joint hyperprior log density at a positive-axis hyperparameter vector.

    Returns -inf (rather than raising) when any component is nonpositive, so
    samplers can treat out-of-domain proposals as ordinary rejections.
    """
    theta = np.asarray(theta, dtype=float)
    if len(priors) != theta.shape[0]:
        raise ValueError(f"{len(priors)} priors for {theta.shape[0]} hyperparameters")
    return float(sum(p.logpdf(t) for p, t in zip(priors, theta)))


def log_prior_log_axis(priors, log_theta) -> float:
    """Joint density of the log hyperparameters (includes the change of variables)."""
    log_theta = np.asarray(log_theta, dtype=float)
    if len(priors) != log_theta.shape[0]:
        raise ValueError(f"{len(priors)} priors for {log_theta.shape[0]} hyperparameters")
    return float(sum(p.logpdf_log(t) for p, t in zip(priors, log_theta)))
