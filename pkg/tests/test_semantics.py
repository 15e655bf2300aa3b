import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptmap.semantics import (SemanticDistribution, apply_evidence, best_label, merge_evidence,
                                observation_evidence, remainder_likelihood, update_semantics)


def dense_bayes(prior_log, observations, weight, n):
    """Reference: every label carries its own log-probability."""
    lik = np.full(n, remainder_likelihood(observations, n))
    for l, p in observations:
        lik[l] = p
    post = prior_log + weight * np.log(lik)
    return post - np.logaddexp.reduce(post)


def observation_lists(n=40):
    def build(draw_labels, draw_probs):
        probs = sorted(draw_probs, reverse=True)
        s = sum(probs)
        if s > 1:
            probs = [p / s * 0.999 for p in probs]
        return [(l, p) for l, p in zip(draw_labels, probs) if p > 0.1]

    labels = st.lists(st.integers(0, n - 1), min_size=1, max_size=4, unique=True)
    probs = st.lists(st.floats(0.11, 1.0), min_size=4, max_size=4)
    return st.builds(build, labels, probs).filter(bool)


def test_fresh_distribution_is_uniform():
    d = SemanticDistribution.fresh(40)
    assert d.labels == [] and d.p_rem == pytest.approx(1 / 40)
    assert best_label(d) is None


def test_single_observation_posterior():
    # (1 - 0.5) / 39 exceeds the floor, so the remainder likelihood is 0.5/39
    # and the posterior of the observed label is 0.5 exactly
    d = update_semantics(SemanticDistribution.fresh(40), [(5, 0.5)], 1.0)
    ref = np.exp(dense_bayes(np.full(40, -math.log(40)), [(5, 0.5)], 1.0, 40))
    assert d.prob(5) == pytest.approx(0.5, abs=1e-12)
    assert d.prob(5) == pytest.approx(ref[5], abs=1e-12)


def test_single_observation_posterior_with_floor():
    # (1 - 0.7) / 39 < 0.01, so every other label gets the floor
    d = update_semantics(SemanticDistribution.fresh(40), [(5, 0.7)], 1.0)
    assert d.prob(5) == pytest.approx(0.7 / (0.7 + 39 * 0.01), abs=1e-12)
    assert round(d.prob(5), 4) == 0.6422


def test_remainder_likelihood_floor():
    assert remainder_likelihood([(0, 0.7), (1, 0.2)], 40) == pytest.approx(0.01)
    assert remainder_likelihood([(0, 0.3)], 4) == pytest.approx(0.7 / 3)
    assert remainder_likelihood([(l, 0.25) for l in range(4)], 4) == 1.0


def test_uniform_likelihood_is_a_fixed_point():
    prior = update_semantics(SemanticDistribution.fresh(4), [(2, 0.8)], 0.7)
    obs = [(l, 0.25) for l in range(4)]
    post = update_semantics(prior, obs, 3.0)
    assert np.allclose(post.dense(), prior.dense(), atol=1e-15)


def test_best_label_examples():
    d = SemanticDistribution(40, [2, 7], [0.6, 0.3], 0.1 / 38)
    assert best_label(d) == (2, 0.6)
    tie = SemanticDistribution(40, [2, 1], [0.4, 0.4], 0.2 / 38)
    assert best_label(tie) == (1, 0.4)


@pytest.mark.parametrize("obs, w", [([(1, 0.0)], 1.0), ([(1, 1.2)], 1.0), ([(1, 0.5)], 0.0),
                                    ([(1, 0.5)], -1.0), ([(40, 0.5)], 1.0), ([(1, 0.5), (1, 0.3)], 1.0),
                                    ([(0, 0.3), (1, 0.2), (2, 0.15), (3, 0.12), (4, 0.11)], 1.0)])
def test_invalid_observations_rejected(obs, w):
    with pytest.raises(ValueError):
        update_semantics(SemanticDistribution.fresh(40), obs, w)


def test_long_sequences_do_not_underflow():
    d = SemanticDistribution.fresh(40)
    for _ in range(2000):
        d = update_semantics(d, [(3, 0.9)], 11.0)
    assert d.prob(3) == pytest.approx(1.0)
    assert math.isfinite(d.p_rem) and d.p_rem >= 0
    assert math.fsum(d.dense()) == pytest.approx(1.0, abs=1e-12)


def test_merged_evidence_equals_sequential_updates():
    obs = [[(1, 0.6), (4, 0.3)], [(4, 0.9)], [(2, 0.5), (1, 0.2)]]
    weights = [0.3, 1.2, 4.0]
    seq = SemanticDistribution.fresh(10)
    for o, w in zip(obs, weights):
        seq = update_semantics(seq, o, w)
    ev = merge_evidence(observation_evidence(o, w, 10) for o, w in zip(obs, weights))
    once = apply_evidence(SemanticDistribution.fresh(10), ev)
    assert np.allclose(seq.dense(), once.dense(), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(observation_lists(), st.floats(1 / 25, 1 / 0.09)), min_size=1, max_size=12))
def test_matches_dense_oracle(seq):
    n = 40
    d = SemanticDistribution.fresh(n)
    ref = np.full(n, -math.log(n))
    for obs, w in seq:
        d = update_semantics(d, obs, w)
        ref = dense_bayes(ref, obs, w, n)
    assert np.allclose(d.dense(), np.exp(ref), atol=1e-9, rtol=0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(observation_lists(12), st.floats(0.04, 10.0)), min_size=1, max_size=8))
def test_representation_invariants(seq):
    d = SemanticDistribution.fresh(12)
    for obs, w in seq:
        d = update_semantics(d, obs, w)
        assert math.fsum(d.probs) + (12 - len(d.labels)) * d.p_rem == pytest.approx(1.0, abs=1e-9)
        assert len(set(d.labels)) == len(d.labels) == len(d.probs)
        assert all(p >= d.p_rem - 1e-15 for p in d.probs)

