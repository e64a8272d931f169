"""Adversarial examples (FGSM, l-inf / l2 PGD), Gaussian corruption and dual-pair sets."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Dataset
from .models import Model, _Reader, encode_tensor, forward, predict
from .reports import atomic_write_bytes

ATTACK_KINDS = ("fgsm", "pgd_linf", "pgd_l2", "gaussian")
GAUSSIAN_STD = {1: 0.04, 2: 0.08, 3: 0.12, 4: 0.16, 5: 0.20}

PAIR_MAGIC = b"NSNSPAIR"
PAIR_VERSIONS = (1,)
NO_TARGET = 0xFFFF


class PairFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float = 0.0  # unit ([0, 1]) pixel scale
    steps: int = 10
    step_size: float | None = None  # defaults to epsilon / sqrt(steps)
    targeted: bool = False
    target_class: int | None = None
    severity: int | None = None
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind in ("pgd_linf", "pgd_l2") and self.steps < 1:
            raise ValueError("PGD needs steps >= 1")
        if self.targeted and self.target_class is None:
            raise ValueError("targeted attack needs target_class")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / math.sqrt(self.steps)

    @property
    def name(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian_s{self.severity}"
        return f"{self.kind}_eps{self.epsilon * 255:.4g}"

    def summary(self) -> dict:
        d = {"kind": self.kind, "epsilon": self.epsilon, "steps": self.steps, "alpha": self.alpha,
             "targeted": self.targeted, "seed": self.seed}
        if self.target_class is not None:
            d["target_class"] = self.target_class
        if self.severity is not None:
            d["severity"] = self.severity
        return d

    @classmethod
    def from_config(cls, cfg: Mapping) -> "AttackSpec":
        """Build from a key/value mapping accepting ``eps_255`` or ``eps_unit`` (never both)."""
        cfg = dict(cfg)
        if "eps_255" in cfg and "eps_unit" in cfg:
            raise ValueError("give either eps_255 or eps_unit, not both")
        eps = 0.0
        if "eps_255" in cfg:
            eps = float(cfg.pop("eps_255")) / 255.0
        elif "eps_unit" in cfg:
            eps = float(cfg.pop("eps_unit"))
        alpha = None
        if "alpha_255" in cfg:
            alpha = float(cfg.pop("alpha_255")) / 255.0
        elif "alpha_unit" in cfg:
            alpha = float(cfg.pop("alpha_unit"))
        kind = cfg.pop("kind")
        known = {"steps", "targeted", "target_class", "severity", "seed", "random_start"}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown attack keys: {sorted(unknown)}")
        return cls(kind=kind, epsilon=eps, step_size=alpha, **cfg)


def _seeds(seed: int, indices) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, int(i)]) for i in indices]


def loss_input_gradient(model: Model, x: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy at x and its gradient with respect to x."""
    xt = Tensor(x)
    with ad.Tape() as tape:
        tape.watch(xt)
        logits, _ = forward(model, xt)
        loss = ad.softmax_cross_entropy(logits, labels)
    (g,) = tape.gradient(loss, [xt])
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite input gradient")
    return loss.item(), g


def _labels_for(spec: AttackSpec, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Labels to differentiate against and the ascent direction sign."""
    if spec.targeted:
        return np.full(len(y), spec.target_class, dtype=np.int64), -1.0
    return np.asarray(y, dtype=np.int64), 1.0


def fgsm(model: Model, x: np.ndarray, y, spec: AttackSpec) -> np.ndarray:
    if spec.kind != "fgsm":
        raise ValueError(f"fgsm called with a {spec.kind} spec")
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0:
        return x.copy()
    labels, direction = _labels_for(spec, y)
    _, g = loss_input_gradient(model, x, labels)
    return np.clip(x + direction * spec.epsilon * np.sign(g), 0.0, 1.0)


def _l2_norms(d: np.ndarray) -> np.ndarray:
    return np.sqrt((d.reshape(len(d), -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * (d.ndim - 1))


def pgd(model: Model, x: np.ndarray, y, spec: AttackSpec, indices=None,
        on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Projected gradient attack in the l-inf or l2 ball of radius epsilon.

    ``indices`` seed the per-sample random starts (default 0..B-1), so the
    result for a sample does not depend on how the data is batched.
    ``on_step(i, x_adv)`` is called after every projected iteration.
    """
    if spec.kind not in ("pgd_linf", "pgd_l2"):
        raise ValueError(f"pgd called with a {spec.kind} spec")
    alpha = spec.alpha
    if spec.epsilon > 0 and not alpha > 0:
        raise ValueError(f"PGD step size must be positive, got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0:
        return x.copy()
    eps = spec.epsilon
    labels, direction = _labels_for(spec, y)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    linf = spec.kind == "pgd_linf"

    if spec.random_start:
        rngs = _seeds(spec.seed, indices)
        if linf:
            delta = np.stack([r.uniform(-eps, eps, size=x.shape[1:]) for r in rngs])
        else:
            delta = np.empty_like(x)
            d = x[0].size
            for i, r in enumerate(rngs):
                v = r.normal(size=x.shape[1:])
                v /= max(np.linalg.norm(v), 1e-12)
                delta[i] = v * eps * r.uniform() ** (1.0 / d)
        adv = np.clip(x + delta, 0.0, 1.0)
    else:
        adv = x.copy()

    for it in range(spec.steps):
        _, g = loss_input_gradient(model, adv, labels)
        if linf:
            adv = adv + direction * alpha * np.sign(g)
            adv = np.clip(adv, x - eps, x + eps)
        else:
            gn = _l2_norms(g)
            step = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
            adv = adv + direction * alpha * step
            delta = adv - x
            n = _l2_norms(delta)
            scale = np.where(n > eps, eps / np.maximum(n, 1e-300), 1.0)
            adv = x + delta * scale
        adv = np.clip(adv, 0.0, 1.0)
        if linf:
            worst = np.abs(adv - x).max()
            if worst > eps + 1e-9:
                raise AssertionError(f"l-inf projection violated: {worst} > {eps}")
        if on_step is not None:
            on_step(it, adv)
    return adv


def gaussian_noise(shape, spec: AttackSpec) -> np.ndarray:
    if spec.severity not in GAUSSIAN_STD:
        raise ValueError(f"severity must be in 1..5, got {spec.severity}")
    return np.random.default_rng(spec.seed).normal(0.0, GAUSSIAN_STD[spec.severity], size=shape)


def gaussian_corrupt(x: np.ndarray, spec: AttackSpec) -> np.ndarray:
    if spec.kind != "gaussian":
        raise ValueError(f"gaussian_corrupt called with a {spec.kind} spec")
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x + gaussian_noise(x.shape, spec), 0.0, 1.0)


def perturb(model: Model, x: np.ndarray, y, spec: AttackSpec, indices=None) -> np.ndarray:
    """Dispatch on ``spec.kind``."""
    if spec.kind == "fgsm":
        return fgsm(model, x, y, spec)
    if spec.kind in ("pgd_linf", "pgd_l2"):
        return pgd(model, x, y, spec, indices)
    if indices is not None and len(indices):
        # per-batch seed so corruption is independent of batching order
        spec = replace(spec, seed=int(np.random.default_rng([spec.seed, int(indices[0])]).integers(2 ** 32)))
    return gaussian_corrupt(x, spec)


@dataclass(frozen=True)
class DualPairSet:
    clean: np.ndarray  # [N, C, H, W]
    adversarial: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N]
    target_class: int | None = None
    attempted: int | None = None  # pool size for targeted sets

    def __post_init__(self):
        if self.clean.shape != self.adversarial.shape or len(self.labels) != len(self.clean):
            raise ValueError("clean, adversarial and labels must align")

    def __len__(self):
        return int(len(self.labels))

    @property
    def success_rate(self) -> float:
        if not self.attempted:
            return 0.0
        return len(self) / self.attempted


def build_dual_pairs(model: Model, dataset: Dataset, spec: AttackSpec, batch_size: int = 128) -> DualPairSet:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    advs = []
    for s in range(0, len(dataset), batch_size):
        idx = np.arange(s, min(s + batch_size, len(dataset)))
        advs.append(perturb(model, dataset.images[idx], dataset.labels[idx], spec, idx))
    return DualPairSet(np.array(dataset.images), np.concatenate(advs), np.array(dataset.labels),
                       spec.target_class if spec.targeted else None)


def targeted_set(model: Model, dataset: Dataset, target: int, spec: AttackSpec,
                 batch_size: int = 128) -> DualPairSet:
    """Targeted pairs from samples not labelled ``target`` that the model now assigns to it."""
    spec = replace(spec, targeted=True, target_class=int(target))
    pool = np.flatnonzero(dataset.labels != target)
    if len(pool) == 0:
        shape = (0,) + dataset.image_shape
        return DualPairSet(np.zeros(shape), np.zeros(shape), np.zeros(0, dtype=np.int64), int(target), 0)
    advs = []
    for s in range(0, len(pool), batch_size):
        idx = pool[s:s + batch_size]
        advs.append(perturb(model, dataset.images[idx], dataset.labels[idx], spec, idx))
    adv = np.concatenate(advs)
    keep = predict(model, adv) == target
    return DualPairSet(dataset.images[pool][keep], adv[keep], dataset.labels[pool][keep], int(target), len(pool))


def encode_pairs(pairs: DualPairSet) -> bytes:
    parts = [PAIR_MAGIC, struct.pack("<H", 1), struct.pack("<I", len(pairs))]
    for x, xa, y in zip(pairs.clean, pairs.adversarial, pairs.labels):
        parts += [struct.pack("<H", int(y)), encode_tensor(x), encode_tensor(xa)]
    tc = NO_TARGET if pairs.target_class is None else int(pairs.target_class)
    parts.append(struct.pack("<H", tc))
    return b"".join(parts)


def decode_pairs(buf: bytes) -> DualPairSet:
    r = _Reader(buf, "pair file")
    if r.take(len(PAIR_MAGIC)) != PAIR_MAGIC:
        raise PairFormatError("bad pair-set magic")
    (version,) = r.unpack("<H")
    if version not in PAIR_VERSIONS:
        raise PairFormatError(f"unsupported pair-set version {version}; supported versions: {list(PAIR_VERSIONS)}")
    (n,) = r.unpack("<I")
    labels, clean, adv = [], [], []
    for _ in range(n):
        (y,) = r.unpack("<H")
        labels.append(y)
        clean.append(r.tensor())
        adv.append(r.tensor())
    target = None
    if r.pos < len(buf):
        (tc,) = r.unpack("<H")
        target = None if tc == NO_TARGET else tc
    if r.pos != len(buf):
        raise PairFormatError(f"trailing {len(buf) - r.pos} bytes after pair payload")
    if n:
        clean_a, adv_a = np.stack(clean), np.stack(adv)
    else:
        clean_a = adv_a = np.zeros((0,))
    return DualPairSet(clean_a, adv_a, np.asarray(labels, dtype=np.int64), target)


def save_pairs(pairs: DualPairSet, path) -> Path:
    return atomic_write_bytes(Path(path), encode_pairs(pairs))


def load_pairs(path) -> DualPairSet:
    return decode_pairs(Path(path).read_bytes())
