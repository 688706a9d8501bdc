"""Covariance-function algebra: closed-form values, PSD structure, JSON."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyncov.kernels import (
    Kernel,
    LocallyPeriodic,
    LogNormalPrior,
    Matern12,
    Periodic,
    Product,
    Rbf,
    Sum,
    default_priors,
    kernel_from_json,
    log_prior,
    log_prior_log_axis,
)

BASE_FACTORIES = [
    lambda rng: Rbf(rng.uniform(0.05, 3.0)),
    lambda rng: Matern12(rng.uniform(0.05, 3.0)),
    lambda rng: Periodic(rng.uniform(0.1, 2.0), rng.uniform(0.1, 3.0)),
    lambda rng: LocallyPeriodic(
        rng.uniform(0.1, 2.0), rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0)
    ),
]


# ---------------------------------------------------------------------------
# pointwise evaluation
# ---------------------------------------------------------------------------


def test_rbf_same_point_is_one():
    assert Rbf(0.35)(0.2, 0.2) == 1.0


def test_rbf_unit_lag_closed_form():
    value = Rbf(1.0)(0.0, 1.0)
    assert value == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert value == pytest.approx(0.60653, abs=1e-5)


def test_periodic_full_period_is_one():
    assert Periodic(period=0.5, lengthscale=1.0)(0.0, 0.5) == pytest.approx(
        1.0, abs=1e-12
    )


def test_sum_diagonal_is_two():
    kernel = Sum(Rbf(1.0), Matern12(1.0))
    assert kernel(0.7, 0.7) == pytest.approx(2.0, abs=1e-12)


def test_matern12_uses_squared_lengthscale_denominator():
    # the decay rate is |r| / (2 l^2), keeping l on the same scale as the RBF
    lengthscale = 0.7
    r = 0.9
    assert Matern12(lengthscale)(0.0, r) == pytest.approx(
        math.exp(-r / (2.0 * lengthscale**2)), abs=1e-12
    )


def test_locally_periodic_is_periodic_times_envelope():
    kernel = LocallyPeriodic(period=0.6, lengthscale=0.8, decay=1.3)
    periodic = Periodic(period=0.6, lengthscale=0.8)
    envelope = Rbf(1.3)
    for r in (0.0, 0.1, 0.45, 2.0):
        assert kernel(0.0, r) == pytest.approx(
            periodic(0.0, r) * envelope(0.0, r), abs=1e-12
        )


def test_eval_symmetric_in_arguments():
    rng = np.random.default_rng(7)
    for factory in BASE_FACTORIES:
        kernel = factory(rng)
        for _ in range(20):
            a, b = rng.uniform(-3, 3, size=2)
            assert kernel(a, b) == pytest.approx(kernel(b, a), abs=1e-12)


def test_unit_diagonal_all_base_kernels():
    rng = np.random.default_rng(11)
    xs = rng.uniform(-50, 50, size=1000)
    for factory in BASE_FACTORIES:
        kernel = factory(rng)
        values = kernel(xs, xs)
        assert np.max(np.abs(values - 1.0)) < 1e-12


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        Rbf(1.0)(np.nan, 0.0)
    with pytest.raises(ValueError):
        Rbf(1.0)(0.0, np.inf)
    with pytest.raises(ValueError):
        Rbf(1.0).gram([0.0, np.nan])


def test_nonpositive_hyperparameters_rejected():
    with pytest.raises(ValueError):
        Rbf(0.0)
    with pytest.raises(ValueError):
        Matern12(-1.0)
    with pytest.raises(ValueError):
        Periodic(period=-0.5)
    with pytest.raises(ValueError):
        LocallyPeriodic(decay=0.0)


# ---------------------------------------------------------------------------
# gram matrices
# ---------------------------------------------------------------------------


def test_gram_single_point():
    assert Rbf(1.0).gram([0.0]) == pytest.approx(np.array([[1.0]]))


def test_gram_two_points_closed_form():
    got = Rbf(1.0).gram([0.0, 1.0])
    e = math.exp(-0.5)
    assert np.allclose(got, [[1.0, e], [e, 1.0]], atol=1e-12)


def test_gram_symmetric_exactly():
    rng = np.random.default_rng(3)
    xs = rng.uniform(-2, 2, size=3)
    for factory in BASE_FACTORIES:
        gram = factory(rng).gram(xs)
        assert np.array_equal(gram, gram.T)


def test_gram_cross_matches_pointwise():
    kernel = Sum(Rbf(0.4), Periodic(0.9, 1.1))
    xs = np.array([0.0, 0.3, 1.7])
    ys = np.array([-0.2, 0.5])
    gram = kernel.gram(xs, ys)
    assert gram.shape == (3, 2)
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            assert gram[i, j] == pytest.approx(kernel(x, y), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(min_value=0, max_value=3),
    st.integers(min_value=1, max_value=200),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_gram_plus_jitter_is_positive_definite(which, size, seed):
    rng = np.random.default_rng(seed)
    kernel = BASE_FACTORIES[which](rng)
    xs = rng.uniform(-4, 4, size=size)
    gram = kernel.gram(xs)
    np.linalg.cholesky(gram + 1e-6 * np.eye(size))  # must not raise


# ---------------------------------------------------------------------------
# combinators
# ---------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_combinators_match_children(seed):
    rng = np.random.default_rng(seed)
    children = [factory(rng) for factory in BASE_FACTORIES[:3]]
    xs = rng.uniform(-2, 2, size=5)
    ys = rng.uniform(-2, 2, size=5)
    parts = np.stack([c(xs, ys) for c in children])
    assert np.allclose(Sum(*children)(xs, ys), parts.sum(axis=0), atol=1e-12)
    assert np.allclose(Product(*children)(xs, ys), parts.prod(axis=0), atol=1e-12)


def test_combinators_need_two_children():
    with pytest.raises(ValueError):
        Sum(Rbf(1.0))
    with pytest.raises(ValueError):
        Product(Rbf(1.0))
    with pytest.raises(TypeError):
        Sum(Rbf(1.0), "not a kernel")


def test_nested_combinator_evaluates_recursively():
    inner = Product(Rbf(0.5), Matern12(1.5))
    kernel = Sum(inner, Periodic(0.7, 1.2))
    r = 0.4
    expected = Rbf(0.5)(0.0, r) * Matern12(1.5)(0.0, r) + Periodic(0.7, 1.2)(0.0, r)
    assert kernel(0.0, r) == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# flat hyperparameter vector
# ---------------------------------------------------------------------------


def test_theta_depth_first_order():
    kernel = Sum(Product(Rbf(0.5), Periodic(0.7, 1.2)), Matern12(2.0))
    assert np.allclose(kernel.theta, [0.5, 0.7, 1.2, 2.0])
    assert kernel.param_names()[0].endswith("rbf.lengthscale")


def test_with_theta_roundtrip():
    kernel = Sum(Product(Rbf(0.5), Periodic(0.7, 1.2)), Matern12(2.0))
    new = kernel.with_theta([1.0, 2.0, 3.0, 4.0])
    assert np.allclose(new.theta, [1.0, 2.0, 3.0, 4.0])
    # the original is untouched (immutability)
    assert np.allclose(kernel.theta, [0.5, 0.7, 1.2, 2.0])
    # same structure
    assert type(new) is Sum and type(new.children[0]) is Product


def test_with_theta_wrong_length():
    with pytest.raises(ValueError):
        Rbf(1.0).with_theta([1.0, 2.0])


# ---------------------------------------------------------------------------
# JSON form
# ---------------------------------------------------------------------------


def test_json_roundtrip_nested():
    kernel = Sum(Product(Rbf(0.5), Periodic(0.7, 1.2)), LocallyPeriodic(0.3, 0.9, 2.0))
    obj = kernel.to_json()
    assert obj["type"] == "sum"
    back = kernel_from_json(obj)
    assert back == kernel
    assert np.allclose(back.theta, kernel.theta)


def test_json_leaf_roundtrip():
    for kernel in (Rbf(0.35), Matern12(1.5), Periodic(0.5, 1.0)):
        assert kernel_from_json(kernel.to_json()) == kernel


def test_json_rejects_garbage():
    with pytest.raises(ValueError):
        kernel_from_json({"type": "spline"})
    with pytest.raises(ValueError):
        kernel_from_json({"type": "sum", "children": [{"type": "rbf"}]})
    with pytest.raises(ValueError):
        kernel_from_json({"type": "rbf", "params": {"bogus": 1.0}})
    with pytest.raises(ValueError):
        kernel_from_json(["not", "a", "dict"])


# ---------------------------------------------------------------------------
# hyperpriors
# ---------------------------------------------------------------------------


def test_log_prior_at_unit_value():
    value = log_prior((LogNormalPrior(),), [1.0])
    assert value == pytest.approx(-0.5 * math.log(2.0 * math.pi), abs=1e-12)
    assert value == pytest.approx(-0.91894, abs=1e-5)


def test_log_prior_negative_value_is_minus_infinity():
    assert log_prior((LogNormalPrior(),), [-1.0]) == -np.inf
    assert log_prior((LogNormalPrior(),), [0.0]) == -np.inf


def test_log_prior_additivity():
    priors = (LogNormalPrior(0.0, 1.0), LogNormalPrior(0.5, 2.0))
    theta = [0.7, 2.3]
    total = log_prior(priors, theta)
    singles = log_prior(priors[:1], theta[:1]) + log_prior(priors[1:], theta[1:])
    assert total == pytest.approx(singles, abs=1e-12)


def test_log_prior_length_mismatch():
    with pytest.raises(ValueError):
        log_prior((LogNormalPrior(),), [1.0, 2.0])


def test_log_prior_matches_scipy_lognorm():
    from scipy.stats import lognorm

    prior = LogNormalPrior(mu_log=0.3, sigma_log=1.7)
    for theta in (0.1, 1.0, 5.0):
        expected = lognorm.logpdf(theta, s=1.7, scale=math.exp(0.3))
        assert prior.logpdf(theta) == pytest.approx(expected, abs=1e-10)


def test_log_axis_density_includes_jacobian():
    prior = LogNormalPrior(0.0, 1.0)
    theta = 0.37
    # p_log(log t) = p(t) * t  (change of variables)
    assert log_prior_log_axis((prior,), [math.log(theta)]) == pytest.approx(
        log_prior((prior,), [theta]) + math.log(theta), abs=1e-12
    )


def test_default_priors_one_per_parameter():
    kernel = Sum(Rbf(1.0), Periodic(0.5, 1.0))
    priors = default_priors(kernel)
    assert len(priors) == 3
    assert all(isinstance(p, LogNormalPrior) for p in priors)


def test_prior_sampling_moments():
    rng = np.random.default_rng(5)
    draws = LogNormalPrior(0.0, 1.0).sample(rng, size=200_000)
    assert np.log(draws).mean() == pytest.approx(0.0, abs=0.01)
    assert np.log(draws).std() == pytest.approx(1.0, abs=0.01)


def test_base_kernel_subclasses_share_interface():
    rng = np.random.default_rng(2)
    for factory in BASE_FACTORIES:
        kernel = factory(rng)
        assert isinstance(kernel, Kernel)
        names = kernel.param_names()
        assert len(names) == kernel.theta.shape[0]
        assert kernel_from_json(kernel.to_json()) == kernel
