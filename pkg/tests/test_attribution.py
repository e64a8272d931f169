import itertools
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurosens.attacks import AttackSpec, DualPairSet
from neurosens.attribution import (NeuronSequence, avg_pair_similarity, contribution, contributions,
                                   important_neurons, levenshtein_distance, levenshtein_similarity,
                                   per_class_similarity_study, ranks_from_order, spearman, tally_votes,
                                   top_by_votes, total_jaccard, vote_important)
from neurosens.data import synth_dataset
from neurosens.models import build_model, forward, vgg_mini


def lev_oracle(a, b):
    """Memoized recursion straight from the edit-distance definition."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


seqs = st.lists(st.integers(0, 7), max_size=12)


def test_levenshtein_known_values():
    assert levenshtein_distance("kitten", "sitting") == 3
    assert levenshtein_distance([], [1, 2]) == 2
    assert levenshtein_similarity([1, 2, 3], [1, 2, 3]) == 1.0
    assert levenshtein_similarity([1, 2], [3, 4]) == 0.5
    with pytest.raises(ValueError):
        levenshtein_similarity([], [])


def test_levenshtein_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        a = rng.integers(0, rng.integers(1, 9), size=rng.integers(0, 13)).tolist()
        b = rng.integers(0, 8, size=rng.integers(0, 13)).tolist()
        assert levenshtein_distance(a, b) == lev_oracle(a, b)


@settings(max_examples=200, deadline=None)
@given(seqs, seqs, seqs)
def test_levenshtein_metric_axioms(a, b, c):
    dab = levenshtein_distance(a, b)
    assert dab == levenshtein_distance(b, a)
    assert (dab == 0) == (a == b)
    assert dab <= levenshtein_distance(a, c) + levenshtein_distance(c, b)
    if a or b:
        assert 0.0 <= levenshtein_similarity(a, b) <= 1.0


def test_spearman_identity_and_reverse():
    for n in range(3, 51):
        r = list(range(1, n + 1))
        assert spearman(r, r) == pytest.approx(1.0, abs=1e-12)
        assert spearman(r, r[::-1]) == pytest.approx(-1.0, abs=1e-12)


def test_spearman_validation():
    with pytest.raises(ValueError, match="length"):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(ValueError, match="two"):
        spearman([1], [1])
    with pytest.raises(ValueError, match="permutation"):
        spearman([1, 1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.permutations(list(range(1, 9))), st.permutations(list(range(1, 9))))
def test_spearman_matches_pearson_of_ranks(a, b):
    expected = np.corrcoef(a, b)[0, 1]
    assert spearman(a, b) == pytest.approx(expected, abs=1e-12)


def test_ranks_from_order():
    assert ranks_from_order([2, 0, 1]).tolist() == [2, 3, 1]


def test_jaccard_and_pair_similarity():
    assert total_jaccard([[1, 2, 3], [3, 2, 1]]) == 1.0
    assert total_jaccard([[1, 2], [3, 4]]) == 0.0
    assert total_jaccard([[1, 2, 3], [2, 3, 4], [3, 4, 5]]) == pytest.approx(1 / 5)
    assert avg_pair_similarity([[1, 2], [1, 2], [3, 4]]) == pytest.approx((1 + 0.5 + 0.5) / 3)
    with pytest.raises(ValueError):
        total_jaccard([[1]])


def brute_votes(sequences, width, k):
    votes = [0] * width
    for seq in sequences:
        for ch in range(width):
            if ch in seq:
                votes[ch] += k - list(seq).index(ch)
    return votes


def test_voting_equals_brute_force_exhaustively():
    width, k = 4, 2
    all_seqs = list(itertools.permutations(range(width), k))
    for combo in itertools.combinations_with_replacement(all_seqs, 3):
        tally = tally_votes(combo, width, k)
        assert tally.votes.tolist() == brute_votes(combo, width, k)
        top = top_by_votes(tally, k)
        expected = sorted(range(width), key=lambda c: (-tally.votes[c], c))[:k]
        assert top == expected


def test_neuron_sequence_rejects_duplicates():
    with pytest.raises(ValueError):
        NeuronSequence([1, 1], "votes")


@pytest.fixture(scope="module")
def model():
    return build_model(vgg_mini((3, 8, 8)), 5)


def test_contribution_conservation(model):
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(50, 3, 8, 8))
    logits, rec = forward(model, x, record=True)
    W = model.params["fc1.weight"].data
    b = model.params["fc1.bias"].data
    for y in range(10):
        phi = contributions(model, x, y)
        np.testing.assert_allclose(phi.sum(axis=1) + b[y], logits.data[:, y], atol=1e-9)
    assert contribution(rec, W, 3, 2, sample=4) == pytest.approx(rec["gap"].data[4, 3] * W[3, 2])


def test_important_neurons_and_votes(model):
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(6, 3, 8, 8))
    seq = important_neurons(model, x[0], 2, 5)
    phi = contributions(model, x[:1], 2)[0]
    assert seq.neurons == sorted(range(64), key=lambda m: (-phi[m], m))[:5]
    pairs = DualPairSet(x, x, np.zeros(6, dtype=np.int64), target_class=2)
    voted = vote_important(model, pairs, 5)
    assert len(voted.neurons) == 5
    with pytest.raises(ValueError, match="no successful targeted examples"):
        vote_important(model, DualPairSet(x[:0], x[:0], np.zeros(0, dtype=np.int64), 2), 5)


def test_similarity_study_structure(model):
    ds = synth_dataset("blobs", 10, 40, 8, 0.1, seed=0)
    # an untrained net is easy to push anywhere with a full-box budget
    study = per_class_similarity_study(model, ds, list(range(10)), ["conv5", "conv6"], 5,
                                       AttackSpec("pgd_linf", 1.0, steps=5))
    doc = study.to_json()
    assert set(doc) == {"classes", "layers", "excluded_classes"}
    for v in doc["classes"].values():
        assert -1 <= v["spearman"] <= 1 and 0 <= v["levenshtein"] <= 1
    for v in doc["layers"].values():
        assert 0 <= v["total_jaccard"] <= 1 and 0 <= v["avg_pair"] <= 1
    assert {r["series"] for r in study.plot_rows()} >= {"spearman", "levenshtein", "avg_pair", "total_jaccard"}
