import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dirichlet_fvi import dirichlet as D
from dirichlet_fvi.numerics import DomainError, Rng, ln_beta, ln_gamma, trigamma

PI2_6 = math.pi**2 / 6


def random_alphas(n, k, seed, lo=0.1, hi=50.0):
    g = np.random.default_rng(seed)
    return np.exp(g.uniform(math.log(lo), math.log(hi), size=(n, k)))


def mc_estimates(alpha, label, n=1_000_000, seed=0):
    """Monte-Carlo KL-to-uniform and expected NLL from Dirichlet draws.

    Returns (kl_mean, kl_se, nll_mean, nll_se). The KL integrand is
    ``ln q(p) - ln u(p)`` with ``u = Gamma(K)`` on the simplex.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    k = alpha.size
    p = Rng(seed).dirichlet(alpha, size=n)
    logp = np.log(p)
    log_q = -ln_beta(alpha) + logp @ (alpha - 1.0)
    kl_terms = log_q - math.lgamma(k)
    nll_terms = -logp[:, label]
    se = lambda t: t.std(ddof=1) / math.sqrt(t.size)
    return kl_terms.mean(), se(kl_terms), nll_terms.mean(), se(nll_terms)


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


class TestExamples:
    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_uniform_prior(self, k):
        np.testing.assert_array_equal(D.uniform_prior(k), np.ones(k))

    def test_uniform_prior_rejects_one_class(self):
        with pytest.raises(DomainError):
            D.uniform_prior(1)

    @pytest.mark.parametrize(
        "alpha, expected",
        [((1, 1), (0.5, 0.5)), ((2, 1, 1), (0.5, 0.25, 0.25)), ((1,) * 7, (1 / 7,) * 7)],
    )
    def test_predictive_mean(self, alpha, expected):
        np.testing.assert_allclose(D.predictive_mean(alpha), expected, rtol=1e-15)

    @pytest.mark.parametrize(
        "alpha, label, expected",
        [((1, 1), 0, 1.0), ((1, 1, 1), 2, 1.5), ((2, 1), 0, 0.5)],
    )
    def test_expected_nll(self, alpha, label, expected):
        assert D.expected_nll(alpha, label) == pytest.approx(expected, abs=1e-12)

    def test_expected_nll_label_range(self):
        with pytest.raises(IndexError):
            D.expected_nll((1, 1), 2)
        with pytest.raises(IndexError):
            D.expected_nll((1, 1), -1)

    def test_expected_nll_grad_at_prior(self):
        np.testing.assert_allclose(D.expected_nll_grad((1, 1), 0), [-1.0, PI2_6 - 1.0], rtol=1e-10)

    def test_expected_nll_grad_symmetric_nonlabel(self):
        g = D.expected_nll_grad((2.5,) * 5, 1)
        others = np.delete(g, 1)
        assert np.all(others == others[0])

    def test_expected_nll_grad_fd(self):
        a = np.array([2.3, 0.7, 1.9])
        fd = central_diff(lambda x: D.expected_nll(x, 1), a)
        g = D.expected_nll_grad(a, 1)
        assert np.max(np.abs(g - fd) / np.abs(g)) < 1e-6

    def test_kl_zero_at_prior(self):
        assert D.kl_to_uniform((1, 1, 1)) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize(
        "alpha, expected",
        [((2, 2), math.log(6) - 5 / 3), ((3, 1), math.log(3) - 2 / 3)],
    )
    def test_kl_closed_form(self, alpha, expected):
        assert D.kl_to_uniform(alpha) == pytest.approx(expected, abs=1e-12)

    def test_kl_matches_general_helper(self):
        a = random_alphas(50, 4, 3)
        np.testing.assert_allclose(D.kl_to_uniform(a), D._kl_dirichlet(a, np.ones_like(a)), atol=1e-10)

    def test_kl_grad_zero_at_prior(self):
        np.testing.assert_array_equal(D.kl_to_uniform_grad(np.ones(4)), np.zeros(4))

    def test_kl_grad_fd(self):
        a = np.array([0.5, 2.0, 3.5])
        fd = central_diff(D.kl_to_uniform, a)
        g = D.kl_to_uniform_grad(a)
        assert np.max(np.abs(g - fd) / np.abs(g)) < 1e-6

    def test_kl_grad_at_2_2(self):
        expected = trigamma(2.0) - 2 * trigamma(4.0)
        np.testing.assert_allclose(D.kl_to_uniform_grad((2, 2)), [expected, expected], rtol=1e-12)

    @pytest.mark.parametrize(
        "alpha, expected",
        [((1, 1), math.log(2)), ((2, 1, 1), 1.5 * math.log(2))],
    )
    def test_output_entropy(self, alpha, expected):
        assert D.output_entropy(alpha) == pytest.approx(expected, abs=1e-12)

    def test_output_entropy_near_deterministic(self):
        assert D.output_entropy((1e6, 1)) < 2e-5

    @pytest.mark.parametrize(
        "alpha, expected",
        [((1, 1), 0.0), ((1, 1, 1), -math.log(2)), ((2, 2), 5 / 3 - math.log(6))],
    )
    def test_differential_entropy(self, alpha, expected):
        assert D.differential_entropy(alpha) == pytest.approx(expected, abs=1e-12)

    def test_differential_entropy_mc(self):
        # -E[ln q(p)] over draws from Dir(2, 2)
        a = np.array([2.0, 2.0])
        p = Rng(11).dirichlet(a, size=1_000_000)
        terms = ln_beta(a) - np.log(p) @ (a - 1.0)
        se = terms.std(ddof=1) / math.sqrt(terms.size)
        assert abs(terms.mean() - D.differential_entropy(a)) < 3 * se


class TestValidation:
    @pytest.mark.parametrize("bad", [(0.0, 1.0), (1.0, np.nan), (1.0, np.inf), (1.0,), (1e-9, 1.0)])
    def test_rejects(self, bad):
        with pytest.raises(DomainError):
            D.check_alpha(bad)

    def test_batch_shapes(self):
        a = random_alphas(6, 3, 0)
        assert D.kl_to_uniform(a).shape == (6,)
        assert D.expected_nll(a, np.zeros(6, dtype=int)).shape == (6,)
        assert D.expected_nll_grad(a, np.arange(6) % 3).shape == (6, 3)
        assert isinstance(D.kl_to_uniform(a[0]), float)


class TestProperties:
    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_kl_entropy_identity(self, k):
        a = random_alphas(1000, k, k)
        resid = D.kl_to_uniform(a) + D.differential_entropy(a) + ln_gamma(float(k))
        assert np.max(np.abs(resid)) < 1e-9

    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_entropy_maximised_at_prior(self, k):
        a = random_alphas(1000, k, 10 + k)
        top = D.differential_entropy(np.ones(k))
        assert np.all(D.differential_entropy(a) <= top + 1e-9)

    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_jensen_bound(self, k):
        a = random_alphas(1000, k, 20 + k)
        c = np.random.default_rng(k).integers(0, k, size=1000)
        lhs = D.expected_nll(a, c)
        rhs = -np.log(D.predictive_mean(a)[np.arange(1000), c])
        assert np.all(lhs >= rhs - 1e-12)

    def test_kl_nonnegative(self):
        for k in (2, 3, 7):
            assert np.all(D.kl_to_uniform(random_alphas(1000, k, 30 + k)) >= 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.05, 100.0), min_size=2, max_size=7), st.randoms(use_true_random=False))
    def test_permutation(self, alpha, rnd):
        idx = list(range(len(alpha)))
        rnd.shuffle(idx)
        a = np.array(alpha)
        b = a[idx]
        np.testing.assert_array_equal(D.predictive_mean(b), D.predictive_mean(a)[idx])
        assert D.kl_to_uniform(b) == D.kl_to_uniform(a)
        assert D.differential_entropy(b) == D.differential_entropy(a)
        assert D.output_entropy(b) == D.output_entropy(a)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.05, 100.0), min_size=2, max_size=7))
    def test_output_entropy_bounds(self, alpha):
        h = D.output_entropy(alpha)
        assert -1e-15 <= h <= math.log(len(alpha)) + 1e-12


@pytest.mark.parametrize("alpha, expected", [((2.0, 2.0), 0.1251), ((3.0, 1.0), 0.4319)])
def test_kl_monte_carlo_examples(alpha, expected):
    kl, se, _, _ = mc_estimates(alpha, 0, seed=5)
    assert abs(kl - D.kl_to_uniform(alpha)) < 3 * se
    assert D.kl_to_uniform(alpha) == pytest.approx(expected, abs=5e-5)


def mc_cases(n=20):
    g = np.random.default_rng(2024)
    cases = []
    for _ in range(n):
        k = int(g.integers(2, 6))
        alpha = np.exp(g.uniform(math.log(0.5), math.log(20.0), size=k))
        cases.append((alpha, int(g.integers(0, k))))
    return cases


@pytest.mark.parametrize("i, case", list(enumerate(mc_cases())))
def test_monte_carlo_agreement(i, case):
    alpha, label = case
    kl, kl_se, nll, nll_se = mc_estimates(alpha, label, seed=100 + i)
    assert abs(kl - D.kl_to_uniform(alpha)) < 3 * kl_se
    assert abs(nll - D.expected_nll(alpha, label)) < 3 * nll_se
