"""Neuron sensitivity, sensitive-neuron selection, sensitivity ratios and suppression sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackSpec, DualPairSet, build_dual_pairs, perturb
from .data import Dataset
from .models import Model, NeuronRef, apply_suppression, channel_count, forward, predict

log = logging.getLogger(__name__)

TIE_RULE = "sigma_desc_then_index"
DEAD_EPS = 1e-12


@dataclass
class SensitivityRow:
    channel: int
    sigma: float
    sigma_ratio: float
    dead: bool = False


@dataclass
class SensitivityTable:
    layer: str
    rows: list[SensitivityRow]
    n_pairs: int
    attack: dict = field(default_factory=dict)
    skipped_pairs: list[int] = field(default_factory=list)  # per channel, zero-denominator pairs

    @property
    def sigma(self) -> np.ndarray:
        return np.array([r.sigma for r in self.rows])

    @property
    def sigma_ratio(self) -> np.ndarray:
        return np.array([r.sigma_ratio for r in self.rows])

    def csv_rows(self) -> list[dict]:
        return [{"layer": self.layer, "channel": r.channel, "sigma": r.sigma,
                 "sigma_ratio": r.sigma_ratio, "n_pairs": self.n_pairs,
                 "skipped_pairs": self.skipped_pairs[i] if self.skipped_pairs else 0}
                for i, r in enumerate(self.rows)]


@dataclass
class SensitiveSet:
    layer: str
    neurons: list[NeuronRef]
    k: int

    @property
    def channels(self) -> list[int]:
        return [n.channel for n in self.neurons]

    def to_json(self) -> dict:
        return {"layer": self.layer, "k": self.k, "neurons": self.channels, "tie_rule": TIE_RULE}


def _channel_stats(clean: np.ndarray, adv: np.ndarray):
    """Per-sample, per-channel l1 deviation and benign l1 mass, shape [B, C]."""
    b, c = clean.shape[:2]
    cf = clean.reshape(b, c, -1)
    af = adv.reshape(b, c, -1)
    return np.abs(cf - af).sum(axis=2), np.abs(cf).sum(axis=2), cf.shape[2]


def _iter_layer_outputs(model: Model, pairs: DualPairSet, layers: Sequence[str], batch_size: int):
    for s in range(0, len(pairs), batch_size):
        _, rc = forward(model, pairs.clean[s:s + batch_size], record=True)
        _, ra = forward(model, pairs.adversarial[s:s + batch_size], record=True)
        yield {l: (rc[l].data, ra[l].data) for l in layers}


def layer_tables(model: Model, pairs: DualPairSet, layers: Sequence[str], batch_size: int = 256,
                 attack: AttackSpec | None = None) -> dict[str, SensitivityTable]:
    """One SensitivityTable per layer from a single forward pass per sample."""
    if len(pairs) == 0:
        raise ValueError("pair set is empty")
    for l in layers:
        channel_count(model.spec, l)
    dev = {l: None for l in layers}
    ratio = {l: None for l in layers}
    valid = {l: None for l in layers}
    for outs in _iter_layer_outputs(model, pairs, layers, batch_size):
        for l, (c, a) in outs.items():
            d, mass, dim = _channel_stats(c, a)
            ok = mass >= DEAD_EPS
            r = np.divide(d, mass, out=np.zeros_like(d), where=ok)
            if dev[l] is None:
                dev[l], ratio[l], valid[l] = np.zeros(d.shape[1]), np.zeros(d.shape[1]), np.zeros(d.shape[1], int)
            dev[l] += (d / dim).sum(axis=0)
            ratio[l] += r.sum(axis=0)
            valid[l] += ok.sum(axis=0)
    n = len(pairs)
    summary = attack.summary() if attack is not None else {}
    tables = {}
    for l in layers:
        sig = dev[l] / n
        rows = []
        for m in range(len(sig)):
            dead = valid[l][m] == 0
            sr = 0.0 if dead else ratio[l][m] / valid[l][m]
            rows.append(SensitivityRow(m, float(sig[m]), float(sr), bool(dead)))
        tables[l] = SensitivityTable(l, rows, n, summary, [int(n - v) for v in valid[l]])
    return tables


def layer_table(model: Model, pairs: DualPairSet, layer: str, batch_size: int = 256,
                attack: AttackSpec | None = None) -> SensitivityTable:
    return layer_tables(model, pairs, [layer], batch_size, attack)[layer]


def neuron_sensitivity(model: Model, pairs: DualPairSet, ref: NeuronRef) -> float:
    """Mean over pairs of the per-element l1 deviation of one neuron's output."""
    ref = NeuronRef(*ref)
    if not 0 <= ref.channel < channel_count(model.spec, ref.layer):
        raise IndexError(f"channel {ref.channel} out of range for layer {ref.layer!r}")
    if len(pairs) == 0:
        raise ValueError("pair set is empty")
    total = 0.0
    for outs in _iter_layer_outputs(model, pairs, [ref.layer], 256):
        c, a = outs[ref.layer]
        fc = c[:, ref.channel].reshape(len(c), -1)
        fa = a[:, ref.channel].reshape(len(a), -1)
        total += sensitivity_from_outputs(fc, fa) * len(c)
    return total / len(pairs)


def sensitivity_from_outputs(clean: np.ndarray, adv: np.ndarray) -> float:
    """sigma for one neuron given [N, dim] benign and adversarial outputs."""
    clean = np.asarray(clean, dtype=np.float64).reshape(len(clean), -1)
    adv = np.asarray(adv, dtype=np.float64).reshape(len(adv), -1)
    return float(np.mean(np.abs(clean - adv).mean(axis=1)))


def ratio_from_outputs(clean: np.ndarray, adv: np.ndarray) -> tuple[float, int]:
    """(sigma_ratio, skipped pair count) for one neuron given [N, dim] outputs."""
    clean = np.asarray(clean, dtype=np.float64).reshape(len(clean), -1)
    adv = np.asarray(adv, dtype=np.float64).reshape(len(adv), -1)
    mass = np.abs(clean).sum(axis=1)
    ok = mass >= DEAD_EPS
    if not ok.any():
        return 0.0, int(len(clean))
    r = np.abs(clean - adv).sum(axis=1)[ok] / mass[ok]
    return float(r.mean()), int((~ok).sum())


def sensitivity_ratio(model: Model, pairs: DualPairSet, ref: NeuronRef) -> float:
    ref = NeuronRef(*ref)
    table = layer_table(model, pairs, ref.layer)
    if not 0 <= ref.channel < len(table.rows):
        raise IndexError(f"channel {ref.channel} out of range for layer {ref.layer!r}")
    return table.rows[ref.channel].sigma_ratio


def top_k_indices(values: Sequence[float], k: int) -> list[int]:
    """Indices of the k largest values; ties go to the lower index."""
    v = np.asarray(values, dtype=np.float64)
    order = np.lexsort((np.arange(len(v)), -v))
    return [int(i) for i in order[:k]]


def fraction_to_k(fraction: float, n: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return max(1, math.ceil(fraction * n - 1e-9))


def select_sensitive(table: SensitivityTable, k: int | None = None, fraction: float | None = None) -> SensitiveSet:
    """Top-k channels by sigma (descending, then ascending channel index)."""
    n = len(table.rows)
    if (k is None) == (fraction is None):
        raise ValueError("give exactly one of k or fraction")
    if fraction is not None:
        k = fraction_to_k(fraction, n)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for a layer with {n} channels")
    idx = top_k_indices(table.sigma, k)
    return SensitiveSet(table.layer, [NeuronRef(table.layer, table.rows[i].channel) for i in idx], k)


def amplification_profile(model: Model, pairs: DualPairSet, layers: Sequence[str],
                          aggregate: str = "sensitive", fraction: float = 0.1,
                          tables: dict[str, SensitivityTable] | None = None) -> list[tuple[str, float]]:
    """Per-layer mean sensitivity ratio, over the top-fraction sensitive set or all channels."""
    if aggregate not in ("sensitive", "all"):
        raise ValueError(f"aggregate must be 'sensitive' or 'all', got {aggregate!r}")
    tables = tables or layer_tables(model, pairs, layers)
    out = []
    for l in layers:
        t = tables[l]
        if aggregate == "all":
            vals = t.sigma_ratio
        else:
            chans = select_sensitive(t, fraction=fraction).channels
            vals = t.sigma_ratio[chans]
        out.append((l, float(np.mean(vals))))
    return out


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("empty split")
    return float(np.mean(predict(model, images) == np.asarray(labels)))


def evaluate_model(model: Model, dataset: Dataset, attacks: Sequence[AttackSpec], batch_size: int = 128) -> dict:
    """Clean accuracy plus one robust accuracy per attack (keyed by attack name)."""
    out = {"clean": accuracy(model, dataset.images, dataset.labels)}
    for spec in attacks:
        if spec.epsilon == 0 and spec.kind != "gaussian":
            out[spec.name] = out["clean"]
            continue
        correct = 0
        for s in range(0, len(dataset), batch_size):
            idx = np.arange(s, min(s + batch_size, len(dataset)))
            adv = perturb(model, dataset.images[idx], dataset.labels[idx], spec, idx)
            correct += int((predict(model, adv) == dataset.labels[idx]).sum())
        out[spec.name] = correct / len(dataset)
    return out


def suppression_experiment(model: Model, dataset: Dataset, attacks: Sequence[AttackSpec],
                           betas: Iterable[float], trials: int = 3, layers: Sequence[str] | None = None,
                           fraction: float = 0.1, selection_attack: AttackSpec | None = None,
                           pairs: DualPairSet | None = None, seed: int = 0) -> list[dict]:
    """Scale the top-fraction sensitive neurons (or equally many random others) by beta.

    Returns one row per (beta, group, metric) where metric is ``clean`` or an
    attack name and value is the accuracy. The random group is averaged over ``trials`` draws whose seeds are listed in
    the row.
    """
    betas = [float(b) for b in betas]
    if any(not 0.0 <= b <= 1.0 for b in betas):
        raise ValueError("beta values must lie in [0, 1]")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    layers = list(layers or [l.name for l in model.spec.layers if l.kind == "conv"])
    if pairs is None:
        selection_attack = selection_attack or (attacks[0] if attacks else None)
        if selection_attack is None:
            raise ValueError("need an attack to build the pair set")
        pairs = build_dual_pairs(model, dataset, selection_attack)
    tables = layer_tables(model, pairs, layers)
    sensitive: list[NeuronRef] = []
    per_layer: dict[str, tuple[list[int], list[int]]] = {}
    for l in layers:
        chosen = select_sensitive(tables[l], fraction=fraction).channels
        rest = [m for m in range(len(tables[l].rows)) if m not in chosen]
        per_layer[l] = (chosen, rest)
        sensitive += [NeuronRef(l, m) for m in chosen]
    trial_seeds = [int(np.random.default_rng([seed, t]).integers(2 ** 31)) for t in range(trials)]
    random_sets = []
    for ts in trial_seeds:
        rng = np.random.default_rng(ts)
        refs = []
        for l in layers:
            chosen, rest = per_layer[l]
            pick = rng.choice(len(rest), size=min(len(chosen), len(rest)), replace=False)
            refs += [NeuronRef(l, rest[i]) for i in sorted(pick)]
        random_sets.append(refs)
    base = evaluate_model(model, dataset, attacks)
    rows = []
    for beta in betas:
        if beta == 1.0:
            sens = rand = base
        else:
            sens = evaluate_model(apply_suppression(model, sensitive, beta), dataset, attacks)
            trial_res = [evaluate_model(apply_suppression(model, refs, beta), dataset, attacks)
                         for refs in random_sets]
            rand = {k: float(np.mean([r[k] for r in trial_res])) for k in base}
        log.info("beta=%.3g sensitive clean=%.3f random clean=%.3f", beta, sens["clean"], rand["clean"])
        for group, res, seeds in (("sensitive", sens, ""), ("random", rand, " ".join(map(str, trial_seeds)))):
            for metric, value in res.items():
                rows.append({"beta": beta, "group": group, "metric": metric, "value": value,
                             "trial_seeds": seeds})
    return rows
