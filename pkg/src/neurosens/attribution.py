"""Penultimate-layer contribution, important-neuron voting and sequence/set similarity."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .attacks import AttackSpec, DualPairSet, targeted_set
from .data import Dataset
from .models import ActivationRecord, Model, forward, penultimate_layer
from .sensitivity import fraction_to_k, layer_tables, top_k_indices

log = logging.getLogger(__name__)


@dataclass
class NeuronSequence:
    neurons: list[int]
    source: str  # "sensitivity", "importance" or "votes"

    def __post_init__(self):
        if len(set(self.neurons)) != len(self.neurons):
            raise ValueError(f"duplicate neurons in sequence {self.neurons}")


@dataclass
class VoteTally:
    votes: np.ndarray  # per-channel totals
    k: int
    voters: int = 0


def _final_dense(model: Model):
    last = model.spec.layers[-1]
    if last.kind != "dense":
        raise ValueError("model does not end in a dense layer")
    return model.params[f"{last.name}.weight"].data, model.params[f"{last.name}.bias"].data


def contribution(record: ActivationRecord, final_weights: np.ndarray, m: int, y: int, sample: int = 0) -> float:
    """Direct contribution of penultimate neuron m to logit y: activation times weight."""
    feats = record[record.penultimate].data
    W = np.asarray(final_weights)
    if feats.ndim != 2:
        raise ValueError(f"penultimate representation must be flat, got shape {list(feats.shape)}")
    if not 0 <= m < W.shape[0] or not 0 <= y < W.shape[1]:
        raise IndexError(f"neuron {m} / class {y} out of range for weights {list(W.shape)}")
    return float(feats[sample, m] * W[m, y])


def contributions(model: Model, x: np.ndarray, y) -> np.ndarray:
    """[B, width] contributions of every penultimate neuron toward class y (scalar or per-sample)."""
    _, rec = forward(model, x, record=True)
    feats = rec[penultimate_layer(model.spec)].data
    W, _ = _final_dense(model)
    y = np.broadcast_to(np.asarray(y, dtype=np.intp), (len(feats),))
    return feats * W[:, y].T


def important_neurons(model: Model, x_adv: np.ndarray, y: int, k: int) -> NeuronSequence:
    """Top-k penultimate neurons of one input by contribution toward class y."""
    phi = contributions(model, np.asarray(x_adv)[None] if np.ndim(x_adv) == 3 else x_adv, y)[0]
    if not 1 <= k <= len(phi):
        raise ValueError(f"k={k} out of range for penultimate width {len(phi)}")
    return NeuronSequence(top_k_indices(phi, k), "importance")


def tally_votes(sequences: Sequence[Sequence[int]], width: int, k: int) -> VoteTally:
    """Each ranked sequence gives k, k-1, ..., 1 votes to its entries."""
    votes = np.zeros(width, dtype=np.int64)
    for seq in sequences:
        if len(seq) != k:
            raise ValueError(f"sequence of length {len(seq)} where k={k}")
        for rank, ch in enumerate(seq):
            votes[ch] += k - rank
    return VoteTally(votes, k, len(sequences))


def top_by_votes(tally: VoteTally, k: int) -> list[int]:
    return top_k_indices(tally.votes.astype(np.float64), k)


def vote_important(model: Model, targeted: DualPairSet, k: int, target: int | None = None) -> NeuronSequence:
    """Class-level important neurons from weighted votes over a targeted set."""
    if len(targeted) == 0:
        raise ValueError("no successful targeted examples")
    y = target if target is not None else targeted.target_class
    if y is None:
        raise ValueError("targeted set has no target class")
    phi = _batched_contributions(model, targeted.adversarial, y)
    width = phi.shape[1]
    if not 1 <= k <= width:
        raise ValueError(f"k={k} out of range for penultimate width {width}")
    seqs = [top_k_indices(row, k) for row in phi]
    return NeuronSequence(top_by_votes(tally_votes(seqs, width, k), k), "votes")


def _batched_contributions(model: Model, x: np.ndarray, y, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([contributions(model, x[s:s + batch_size], y) for s in range(0, len(x), batch_size)])


def _is_permutation(r: np.ndarray) -> bool:
    return np.array_equal(np.sort(r), np.arange(1, len(r) + 1))


def spearman(rank_a: Sequence[int], rank_b: Sequence[int]) -> float:
    """Rank correlation of two tie-free rankings (permutations of 1..n)."""
    a = np.asarray(rank_a, dtype=np.int64)
    b = np.asarray(rank_b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"rankings differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two ranked items")
    if not (_is_permutation(a) and _is_permutation(b)):
        raise ValueError("rankings must be permutations of 1..n without repeated ranks")
    d2 = float(((a - b) ** 2).sum())
    return 1.0 - 6.0 * d2 / (n ** 3 - n)


def ranks_from_order(order: Sequence[int]) -> np.ndarray:
    """Rank (1-based position) of each item 0..n-1 given an ordering of all items."""
    order = list(order)
    ranks = np.zeros(len(order), dtype=np.int64)
    ranks[order] = np.arange(1, len(order) + 1)
    return ranks


def levenshtein_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Minimum number of insertions, deletions and substitutions turning a into b."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ai in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, bj in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ai != bj))
        prev = cur
    return prev[-1]


def levenshtein_similarity(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    total = len(a) + len(b)
    if total == 0:
        raise ValueError("similarity of two empty sequences is undefined")
    return 1.0 - levenshtein_distance(a, b) / total


def avg_pair_similarity(sequences: Sequence[Sequence[Hashable]]) -> float:
    """Mean Levenshtein similarity over all unordered pairs of distinct sequences."""
    if len(sequences) < 2:
        raise ValueError("need at least two sequences")
    sims = [levenshtein_similarity(a, b) for a, b in itertools.combinations(sequences, 2)]
    return float(np.mean(sims))


def total_jaccard(sequences: Sequence[Sequence[Hashable]]) -> float:
    """|intersection| / |union| over all sequences viewed as sets."""
    if len(sequences) < 2:
        raise ValueError("need at least two sequences")
    sets = [set(s) for s in sequences]
    union = set().union(*sets)
    if not union:
        raise ValueError("union of the sets is empty")
    return len(set.intersection(*sets)) / len(union)


@dataclass
class SimilarityStudy:
    classes: dict[int, dict] = field(default_factory=dict)
    layers: dict[str, dict] = field(default_factory=dict)
    excluded_classes: list[int] = field(default_factory=list)
    sensitive_sets: dict[int, dict[str, list[int]]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"classes": {str(c): v for c, v in self.classes.items()},
                "layers": self.layers,
                "excluded_classes": self.excluded_classes}

    def plot_rows(self) -> list[dict]:
        rows = []
        for c, v in self.classes.items():
            rows += [{"x": c, "series": "spearman", "value": v["spearman"]},
                     {"x": c, "series": "levenshtein", "value": v["levenshtein"]}]
        for l, v in self.layers.items():
            rows += [{"x": l, "series": "avg_pair", "value": v["avg_pair"]},
                     {"x": l, "series": "total_jaccard", "value": v["total_jaccard"]}]
        return rows


def importance_order(model: Model, targeted: DualPairSet, method: str = "votes") -> list[int]:
    """Full ranking of penultimate neurons: full-width voting, or mean contribution."""
    phi = _batched_contributions(model, targeted.adversarial, targeted.target_class)
    width = phi.shape[1]
    if method == "votes":
        return vote_important(model, targeted, width).neurons
    if method == "mean_phi":
        return top_k_indices(phi.mean(axis=0), width)
    raise ValueError(f"unknown importance method {method!r}")


def per_class_similarity_study(model: Model, dataset: Dataset, classes: Sequence[int], layers: Sequence[str],
                               k: int, attack: AttackSpec, layer_fraction: float = 0.1,
                               importance: str = "votes") -> SimilarityStudy:
    """Relate sensitive and important neurons per target class, and compare sensitive sets across classes."""
    pen = penultimate_layer(model.spec)
    study = SimilarityStudy()
    all_layers = list(dict.fromkeys(list(layers) + [pen]))
    for y in classes:
        ts = targeted_set(model, dataset, y, attack)
        log.info("class %d: %d/%d targeted examples retained", y, len(ts), ts.attempted or 0)
        if len(ts) == 0:
            study.excluded_classes.append(int(y))
            continue
        tables = layer_tables(model, ts, all_layers)
        sens_order = top_k_indices(tables[pen].sigma, len(tables[pen].rows))
        imp_order = importance_order(model, ts, importance)
        gamma = vote_important(model, ts, k).neurons
        omega_pen = sens_order[:k]
        study.classes[int(y)] = {
            "spearman": spearman(ranks_from_order(sens_order), ranks_from_order(imp_order)),
            "levenshtein": levenshtein_similarity(gamma, omega_pen),
            "n_pairs": len(ts),
            "success_rate": ts.success_rate,
        }
        study.sensitive_sets[int(y)] = {
            l: top_k_indices(tables[l].sigma, fraction_to_k(layer_fraction, len(tables[l].rows)))
            for l in layers
        }
    usable = list(study.sensitive_sets)
    if len(usable) < 2:
        raise ValueError(f"need >= 2 classes with targeted examples for per-layer aggregates, got {len(usable)}")
    for l in layers:
        seqs = [study.sensitive_sets[c][l] for c in usable]
        study.layers[l] = {"avg_pair": avg_pair_similarity(seqs), "total_jaccard": total_jaccard(seqs)}
    return study
