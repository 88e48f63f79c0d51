import copy
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrialign.losses import (BatchTooSmallError, GlobalBatch, NegativeSamplingStrategy,
                             choose_negatives, cosine_distances, sample_negative)

# Upper 1% point of chi-square with 14 degrees of freedom (frozen reference value).
CHI2_99_DF14 = 29.141


def planar(angles):
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def batch_with_distances(dists):
    """Image anchor 0 at angle 0; text candidate j at cosine distance dists[j]."""
    angles = np.arccos(1.0 - np.asarray(dists))
    img = planar(np.concatenate([[0.0], np.full(len(dists) - 1, 2.0)]))
    return GlobalBatch(img, planar(angles), np.zeros(len(dists)))


def test_semihard_two_candidates_picks_closer():
    batch = batch_with_distances([0.05, 0.3, 0.7])
    for seed in range(20):
        assert sample_negative(0, batch, NegativeSamplingStrategy("semi-hard", 2), "image",
                               np.random.default_rng(seed)) == 1


def test_hard_picks_argmin():
    batch = batch_with_distances([0.0, 0.9, 0.4, 0.6])
    assert sample_negative(0, batch, NegativeSamplingStrategy("hard"), "image", np.random.default_rng(0)) == 2


def test_hard_tie_goes_to_lowest_index():
    dist = np.array([[0.0, 0.5, 0.5], [0.2, 0.0, 0.2], [0.1, 0.1, 0.0]])
    assert list(choose_negatives(dist, NegativeSamplingStrategy("hard"), np.random.default_rng(0))) == [1, 0, 0]


def test_batch_too_small():
    with pytest.raises(BatchTooSmallError):
        choose_negatives(np.zeros((1, 1)), NegativeSamplingStrategy("random"), np.random.default_rng(0))


def test_semihard_on_small_batch_uses_every_other_pair():
    dist = np.array([[0.0, 0.4], [0.3, 0.0]])
    assert list(choose_negatives(dist, NegativeSamplingStrategy("semi-hard", 5), np.random.default_rng(0))) == [1, 0]


def test_hard_matches_brute_force_on_random_batches():
    r = np.random.default_rng(11)
    hard = NegativeSamplingStrategy("hard")
    for _ in range(1000):
        n = int(r.integers(2, 17))
        img, txt = r.normal(size=(n, 6)), r.normal(size=(n, 6))
        chosen = choose_negatives(cosine_distances(img, txt), hard, r)
        for j in range(n):
            best, best_d = None, math.inf
            for k in range(n):
                if k == j:
                    continue
                d = 1 - img[j] @ txt[k] / (np.linalg.norm(img[j]) * np.linalg.norm(txt[k]))
                if d < best_d - 1e-12:
                    best, best_d = k, d
            assert chosen[j] == best


@given(st.integers(0, 2**31), st.integers(3, 12))
def test_semihard_choice_weakly_closer_than_alternative(seed, n):
    r = np.random.default_rng(seed)
    dist = cosine_distances(r.normal(size=(n, 4)), r.normal(size=(n, 4)))
    sampler = np.random.default_rng(seed + 1)
    replay = copy.deepcopy(sampler)
    chosen = choose_negatives(dist, NegativeSamplingStrategy("semi-hard", 2), sampler)
    for j in range(n):
        others = np.delete(np.arange(n), j)
        drawn = replay.choice(others, size=2, replace=False)
        assert chosen[j] != j
        assert chosen[j] in drawn
        assert dist[j, chosen[j]] <= dist[j, drawn].min()


@given(st.integers(0, 2**31), st.integers(2, 12), st.sampled_from(["random", "hard", "semihard:1"]))
def test_negative_never_the_anchor(seed, n, strategy):
    r = np.random.default_rng(seed)
    chosen = choose_negatives(r.random((n, n)), NegativeSamplingStrategy.parse(strategy), r)
    assert np.all(chosen != np.arange(n))


def test_random_sampling_is_uniform():
    r = np.random.default_rng(2024)
    batch = GlobalBatch(r.normal(size=(16, 4)), r.normal(size=(16, 4)), np.zeros(16))
    strategy = NegativeSamplingStrategy("random")
    draws = np.array([sample_negative(0, batch, strategy, "text", r) for _ in range(100_000)])
    counts = np.bincount(draws, minlength=16)
    assert counts[0] == 0
    freq = counts[1:] / draws.size
    assert np.all(np.abs(freq - 1 / 15) <= 0.01)
    expected = draws.size / 15
    assert ((counts[1:] - expected) ** 2 / expected).sum() < CHI2_99_DF14
