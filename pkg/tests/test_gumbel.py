import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from lss.gumbel import (
    EPS,
    GumbelNoise,
    gumbel_from_uniform,
    gumbel_max,
    gumbel_softmax,
    gumbel_top_k,
    sample_gumbel,
    softmax,
    softmax_jacobian,
    softmax_vjp,
)

finite = st.floats(-30, 30, allow_nan=False)


def logit_vectors(min_size=1, max_size=12):
    return arrays(np.float64, st.integers(min_size, max_size), elements=finite)


# -- noise ----------------------------------------------------------------


def test_uniform_half_maps_to_known_constant():
    g = gumbel_from_uniform(np.full((7, 7), 0.5))
    np.testing.assert_allclose(g, -math.log(-math.log(0.5)))
    assert abs(g[0, 0] - 0.366513) < 1e-6


def test_inverse_e_maps_to_zero():
    assert gumbel_from_uniform(math.exp(-1)) == 0.0


def test_clamped_endpoints_are_finite():
    g = gumbel_from_uniform(np.array([0.0, 1.0, EPS / 10, 1 - EPS / 10]))
    assert np.all(np.isfinite(g))
    assert g[0] == g[2] and g[1] == g[3]


def test_same_seed_same_noise():
    a = sample_gumbel((7, 7), 123)
    b = sample_gumbel((7, 7), 123)
    assert a.seed == 123
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample_gumbel((7, 7), 124).values)


def test_empty_shape_rejected():
    with pytest.raises(ValueError):
        sample_gumbel((0,), 0)


def test_moments():
    g = sample_gumbel(10**6, 0).values
    assert abs(g.mean() - 0.5772156649) < 0.01
    assert abs(g.var() - math.pi**2 / 6) < 0.02


# -- gumbel-max -----------------------------------------------------------


def test_gumbel_max_singleton():
    assert set(gumbel_max([0.0], 0, size=100).tolist()) == {0}
    assert gumbel_max([0.0], 0) == 0


def test_gumbel_max_empty():
    with pytest.raises(ValueError, match="empty logits"):
        gumbel_max([], 0)


def test_gumbel_max_symmetric_pair():
    freq = np.bincount(gumbel_max([0.0, 0.0], 1, size=10**5), minlength=2) / 1e5
    np.testing.assert_allclose(freq, 0.5, atol=0.01)


def test_gumbel_max_matches_softmax():
    logits = np.array([1.0, 0.0, -1.0])
    expected = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(expected, [0.6652, 0.2447, 0.0900], atol=1e-4)
    counts = np.bincount(gumbel_max(logits, 2, size=10**5), minlength=3)
    assert stats.chisquare(counts, expected * counts.sum()).pvalue > 0.01


def test_gumbel_max_with_pinned_noise():
    noise = np.array([[0.0, 5.0], [0.0, 0.0]])
    assert gumbel_max(np.zeros((2, 2)), noise=noise) == 1


# -- gumbel-softmax -------------------------------------------------------


def test_worked_example_soft_values():
    soft = gumbel_softmax(np.array([20.0, 18.0, 17.0, 7.0]))
    # the second entry is 0.1142 exactly; decimal=2 accepts |error| < 1.5e-2
    np.testing.assert_almost_equal(soft.values, [0.84, 0.12, 0.04, 0.00], decimal=2)
    np.testing.assert_allclose(soft.values, [0.843794, 0.114195, 0.042010, 0.000002], atol=1e-6)


def test_uniform_logits_uniform_soft():
    soft = gumbel_softmax(np.full((7, 7), 3.0))
    np.testing.assert_allclose(soft.values, 1 / 49, rtol=0, atol=1e-15)


def test_large_logits_do_not_overflow():
    soft = gumbel_softmax(np.array([1000.0, 999.0]))
    np.testing.assert_allclose(soft.values.sum(), 1.0)


def test_temperature_and_shape_checks():
    with pytest.raises(ValueError):
        gumbel_softmax(np.zeros(3), temperature=0.0)
    with pytest.raises(ValueError):
        gumbel_softmax(np.zeros(3), temperature=-1.0)
    with pytest.raises(ValueError):
        gumbel_softmax(np.zeros(3), noise=np.zeros(4))


def test_noise_object_accepted():
    noise = GumbelNoise(np.array([0.0, 1.0]))
    soft = gumbel_softmax(np.zeros(2), noise)
    np.testing.assert_allclose(soft.values, softmax([0.0, 1.0]))


@given(logit_vectors(), st.floats(0.1, 5.0))
def test_soft_map_is_a_distribution(phi, tau):
    s = gumbel_softmax(phi, temperature=tau).values
    assert abs(s.sum() - 1.0) < 1e-12
    if np.ptp(phi) / tau < 600:  # beyond this exp() underflows to exactly 0
        assert np.all(s > 0)


@given(logit_vectors(), st.floats(-100, 100))
def test_shift_invariance(phi, c):
    a = gumbel_softmax(phi).values
    b = gumbel_softmax(phi + c).values
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@settings(deadline=None)
@given(logit_vectors(min_size=2), st.randoms(use_true_random=False))
def test_permutation_equivariance(phi, rnd):
    noise = np.array([rnd.gauss(0, 1) for _ in phi])
    perm = np.array(rnd.sample(range(len(phi)), len(phi)))
    a = gumbel_softmax(phi, noise).values
    b = gumbel_softmax(phi[perm], noise[perm]).values
    np.testing.assert_allclose(a[perm], b, atol=1e-15)
    # argmax / top-k follow the permutation (only when unambiguous)
    key = phi + noise
    if len(np.unique(key)) == len(key):
        assert perm[gumbel_max(phi[perm], noise=noise[perm])] == gumbel_max(phi, noise=noise)
        k = len(phi) // 2 + 1
        np.testing.assert_array_equal(perm[gumbel_top_k(phi[perm], k, noise=noise[perm])], gumbel_top_k(phi, k, noise=noise))


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        phi = rng.uniform(-5, 5, 6)
        tau = rng.uniform(0.5, 2)
        soft = gumbel_softmax(phi, temperature=tau)
        J = softmax_jacobian(soft)
        h = 1e-5
        num = np.stack(
            [(softmax(phi + h * e, tau) - softmax(phi - h * e, tau)) / (2 * h) for e in np.eye(6)], axis=1
        )
        assert np.max(np.abs(J - num)) / np.max(np.abs(J)) < 1e-6


def test_vjp_agrees_with_jacobian():
    rng = np.random.default_rng(1)
    soft = gumbel_softmax(rng.normal(size=(3, 3)), temperature=0.7)
    g = rng.normal(size=(3, 3))
    np.testing.assert_allclose(softmax_vjp(g, soft).ravel(), softmax_jacobian(soft).T @ g.ravel(), atol=1e-14)


# -- gumbel-top-k ---------------------------------------------------------


def test_top_k_full_length_is_permutation():
    idx = gumbel_top_k(np.arange(6.0), 6, 0)
    assert sorted(idx.tolist()) == list(range(6))


def test_top_k_range_checked():
    with pytest.raises(ValueError):
        gumbel_top_k([0.0, 1.0], 0, 0)
    with pytest.raises(ValueError):
        gumbel_top_k([0.0, 1.0], 3, 0)


def test_top_k_pinned_noise_is_descending():
    phi = np.array([0.0, 3.0, 1.0, 2.0])
    np.testing.assert_array_equal(gumbel_top_k(phi, 3, noise=np.zeros(4)), [1, 3, 2])


def _plackett_luce(weights, k):
    """Exact ordered-tuple probabilities by enumeration."""
    w = np.asarray(weights, dtype=float)
    probs = {}
    for tup in itertools.permutations(range(len(w)), k):
        p, remaining = 1.0, w.sum()
        for i in tup:
            p *= w[i] / remaining
            remaining -= w[i]
        probs[tup] = p
    return probs


def _tuple_counts(draws):
    keys, counts = np.unique(draws, axis=0, return_counts=True)
    return {tuple(int(v) for v in k): int(c) for k, c in zip(keys, counts)}


def test_top_k_symmetric_pairs():
    counts = _tuple_counts(gumbel_top_k(np.zeros(3), 2, 3, size=10**5))
    assert len(counts) == 6
    freq = np.array(list(counts.values())) / 1e5
    np.testing.assert_allclose(freq, 1 / 6, atol=0.01)


def test_top_k_matches_plackett_luce():
    phi = np.array([2.0, 1.0, 0.0])
    exact = _plackett_luce(np.exp(phi), 2)
    assert abs(sum(exact.values()) - 1.0) < 1e-12
    counts = _tuple_counts(gumbel_top_k(phi, 2, 4, size=10**5))
    keys = sorted(exact)
    observed = np.array([counts.get(k, 0) for k in keys])
    expected = np.array([exact[k] for k in keys]) * observed.sum()
    assert stats.chisquare(observed, expected).pvalue > 0.01
