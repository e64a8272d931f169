"""Vanilla, PAT, ALP and sensitive-neuron-stabilizing (SNS) training."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, DualPairSet, build_dual_pairs, pgd
from .autodiff import Tensor
from .data import Dataset
from .models import Model, ModelSpec, build_model, channel_count, forward, param_names
from .sensitivity import accuracy, evaluate_model, fraction_to_k, layer_tables, select_sensitive

log = logging.getLogger(__name__)

SNS_MODES = ("sen", "dyn", "all", "rand")


class TrainingDiverged(RuntimeError):
    pass


def default_train_attack() -> AttackSpec:
    return AttackSpec("pgd_linf", epsilon=8 / 255, steps=10)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.1
    lr_step: int = 0  # epochs between decays; 0 disables
    weight_decay: float = 0.0
    seed: int = 0
    attack: AttackSpec = field(default_factory=default_train_attack)
    lam: float = 5.0
    layers: tuple[str, ...] | None = None
    mode: str = "sen"
    sensitive_fraction: float = 0.10
    dyn_sample_count: int = 200
    mix_clean: float = 1.0
    mix_adv: float = 1.0
    pure_adversarial: bool = False
    alp_lambda: float = 0.5
    static_pairs: bool = False
    freeze_below: bool = True
    eval_attacks: tuple[AttackSpec, ...] = ()
    eval_limit: int | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.lam < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need lam >= 0, epochs >= 0, batch_size >= 1")
        if self.mode not in SNS_MODES:
            raise ValueError(f"mode must be one of {SNS_MODES}, got {self.mode!r}")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "eval_attacks", tuple(self.eval_attacks))


@dataclass
class EpochRecord:
    epoch: int
    loss_adv: float
    loss_sns: float
    clean_acc: float | None  # None without a validation split
    robust_acc: dict


@dataclass
class TrainReport:
    method: str
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[tuple[float, float, float]] = field(default_factory=list)  # (total, adv, sns)
    sensitive: dict[str, list[int]] = field(default_factory=dict)
    frozen: list[str] = field(default_factory=list)
    rand_seed: int | None = None
    checkpoint_path: str | None = None
    wall_clock: float = 0.0
    final: dict = field(default_factory=dict)

    def jsonl_rows(self) -> list[dict]:
        rows = [{"epoch": e.epoch, "loss_adv": e.loss_adv, "loss_sns": e.loss_sns,
                 "clean_acc": e.clean_acc, "robust_acc": e.robust_acc} for e in self.epochs]
        rows.append({"summary": True, "method": self.method, "final": self.final,
                     "sensitive": self.sensitive, "frozen": self.frozen,
                     "checkpoint": self.checkpoint_path, "rand_seed": self.rand_seed})
        return rows


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def sns_loss(record_clean, record_adv, omega: dict[str, Sequence[int]], layers: Sequence[str] | None = None) -> Tensor:
    """Sum over layers and sensitive channels of the per-element l1 deviation, batch-averaged."""
    layers = list(layers if layers is not None else omega)
    if record_clean.spec is not record_adv.spec and record_clean.spec != record_adv.spec:
        raise ValueError("records come from different model specs")
    total = None
    for l in layers:
        chans = list(omega[l])
        if not chans:
            raise ValueError(f"empty sensitive set for layer {l!r}")
        c, a = record_clean[l], record_adv[l]
        if c.shape != a.shape:
            raise ValueError(f"layer {l!r}: record shapes differ {list(c.shape)} vs {list(a.shape)}")
        dim = int(np.prod(c.shape[2:])) if len(c.shape) > 2 else 1
        term = ad.mul_scalar(ad.l1_distance(ad.take_channels(c, chans), ad.take_channels(a, chans)),
                             1.0 / (dim * c.shape[0]))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no layers selected")
    return total


def eligible_layers(spec: ModelSpec) -> list[str]:
    """Conv layers and hidden dense layers (the classifier head is excluded)."""
    out = [l.name for l in spec.layers[:-1] if l.kind in ("conv", "dense")]
    return out


def select_layers_topk(spec: ModelSpec, k: int) -> list[str]:
    """The k deepest eligible layers, in spec order."""
    el = eligible_layers(spec)
    if not 1 <= k <= len(el):
        raise ValueError(f"k={k} out of range; {len(el)} eligible layers")
    return el[-k:]


def frozen_params(spec: ModelSpec, layers: Sequence[str]) -> list[str]:
    """Parameters of layers strictly below the lowest selected layer."""
    names = spec.layer_names
    lowest = min(names.index(l) for l in layers)
    frozen = []
    for layer in spec.layers[:lowest]:
        if layer.kind in ("conv", "dense"):
            frozen += [f"{layer.name}.weight", f"{layer.name}.bias"]
    return frozen


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

class _SGD:
    def __init__(self, cfg: TrainConfig, frozen: Sequence[str] = ()):
        self.cfg = cfg
        self.frozen = set(frozen)
        self.velocity: dict[str, np.ndarray] = {}

    def lr(self, epoch: int) -> float:
        if self.cfg.lr_step > 0:
            return self.cfg.lr * self.cfg.lr_decay ** (epoch // self.cfg.lr_step)
        return self.cfg.lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], epoch: int) -> dict[str, np.ndarray]:
        lr = self.lr(epoch)
        new = {}
        for name, p in params.items():
            if name in self.frozen:
                new[name] = p
                continue
            g = grads[name]
            if self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p
            v = self.velocity.get(name)
            v = g if v is None else self.cfg.momentum * v + g
            self.velocity[name] = v
            new[name] = p - lr * v
        return new


def _epoch_attack(attack: AttackSpec, epoch: int) -> AttackSpec:
    return replace(attack, seed=int(np.random.default_rng([attack.seed, epoch]).integers(2 ** 31)))


def _evaluate_epoch(model: Model, cfg: TrainConfig, val: Dataset | None) -> tuple[float, dict]:
    if val is None or len(val) == 0:
        return None, {}
    if cfg.eval_limit is not None:
        val = val.subset(np.arange(min(cfg.eval_limit, len(val))))
    res = evaluate_model(model, val, cfg.eval_attacks)
    clean = res.pop("clean")
    return clean, res


def _run(method: str, cfg: TrainConfig, train: Dataset, val: Dataset | None, model: Model,
         omega: dict[str, list[int]] | None = None, frozen: Sequence[str] = (),
         static: DualPairSet | None = None, report: TrainReport | None = None,
         dyn_pool: Dataset | None = None) -> tuple[Model, TrainReport]:
    report = report or TrainReport(method)
    report.frozen = list(frozen)
    opt = _SGD(cfg, frozen)
    names = param_names(model.spec)
    trainable = [n for n in names if n not in set(frozen)]
    n_batches = len(train) // cfg.batch_size
    t0 = time.time()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        attack = _epoch_attack(cfg.attack, epoch)
        sums = np.zeros(2)
        try:
            for b in range(n_batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x, y = train.images[idx], train.labels[idx]
                if method != "vanilla":
                    if static is not None:
                        xa = static.adversarial[idx]
                    else:
                        xa = pgd(model, x, y, attack, indices=idx)
                ptensors = {n: Tensor(model.params[n].data) for n in names}
                with ad.Tape() as tape:
                    tape.watch(*[ptensors[n] for n in trainable])
                    if method == "vanilla":
                        logits, _ = forward(model, x, params=ptensors)
                        loss_adv = ad.softmax_cross_entropy(logits, y)
                        loss = loss_adv
                        loss_s = None
                    else:
                        record = omega is not None
                        lc, rc = forward(model, x, record=record, params=ptensors)
                        la, ra = forward(model, xa, record=record, params=ptensors)
                        loss_adv = _adv_loss(cfg, lc, la, y)
                        if method == "alp":
                            pair = ad.mul_scalar(ad.l2_norm_squared(ad.sub(lc, la)), 1.0 / len(y))
                            loss_adv = ad.add(loss_adv, ad.mul_scalar(pair, cfg.alp_lambda))
                        loss = loss_adv
                        loss_s = None
                        if omega is not None:
                            loss_s = sns_loss(rc, ra, omega)
                            loss = ad.add(loss_adv, ad.mul_scalar(loss_s, cfg.lam))
                grads = tape.gradient(loss, [ptensors[n] for n in trainable])
                lv = loss.item()
                if not np.isfinite(lv):
                    raise TrainingDiverged(f"loss became non-finite in epoch {epoch}")
                sv = loss_s.item() if loss_s is not None else 0.0
                report.steps.append((lv, loss_adv.item(), sv))
                sums += (loss_adv.item(), sv)
                params = {n: model.params[n].data for n in names}
                gmap = dict(zip(trainable, grads))
                new = opt.step(params, gmap, epoch)
                if not all(np.all(np.isfinite(v)) for v in new.values()):
                    raise TrainingDiverged(f"parameters became non-finite in epoch {epoch}")
                model = model.replace(new)
        except ad.NonFiniteError as e:
            raise TrainingDiverged(f"non-finite values in epoch {epoch}: {e}") from e
        if omega is not None and cfg.mode == "dyn" and dyn_pool is not None:
            omega = _dynamic_omega(model, cfg, dyn_pool, list(omega), epoch)
            report.sensitive = {l: list(v) for l, v in omega.items()}
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            clean, robust = _evaluate_epoch(model, cfg, val)
        else:
            clean, robust = None, {}
        nb = max(n_batches, 1)
        report.epochs.append(EpochRecord(epoch, sums[0] / nb, sums[1] / nb, clean, robust))
        log.info("%s epoch %d loss_adv=%.4f loss_sns=%.4f clean=%s robust=%s",
                 method, epoch, sums[0] / nb, sums[1] / nb, clean, robust)
    report.wall_clock += time.time() - t0
    return model, report


def _adv_loss(cfg: TrainConfig, lc: Tensor, la: Tensor, y) -> Tensor:
    """Clean/adversarial cross-entropy mixture (or adversarial only)."""
    ce_a = ad.softmax_cross_entropy(la, y)
    if cfg.pure_adversarial:
        return ce_a
    ce_c = ad.softmax_cross_entropy(lc, y)
    total = cfg.mix_clean + cfg.mix_adv
    return ad.add(ad.mul_scalar(ce_c, cfg.mix_clean / total), ad.mul_scalar(ce_a, cfg.mix_adv / total))


def train_vanilla(cfg: TrainConfig, train: Dataset, val: Dataset | None = None,
                  spec: ModelSpec | None = None, init: Model | None = None) -> tuple[Model, TrainReport]:
    model = init if init is not None else build_model(spec, cfg.seed)
    return _run("vanilla", cfg, train, val, model)


def train_pat(cfg: TrainConfig, train: Dataset, val: Dataset | None = None,
              spec: ModelSpec | None = None, init: Model | None = None,
              frozen: Sequence[str] = ()) -> tuple[Model, TrainReport]:
    if cfg.attack.kind != "pgd_linf":
        raise ValueError("PAT expects an l-inf PGD training attack")
    model = init if init is not None else build_model(spec, cfg.seed)
    return _run("pat", cfg, train, val, model, frozen=frozen)


def train_alp(cfg: TrainConfig, train: Dataset, val: Dataset | None = None,
              spec: ModelSpec | None = None, init: Model | None = None,
              frozen: Sequence[str] = ()) -> tuple[Model, TrainReport]:
    if cfg.attack.kind != "pgd_linf":
        raise ValueError("ALP expects an l-inf PGD training attack")
    model = init if init is not None else build_model(spec, cfg.seed)
    return _run("alp", cfg, train, val, model, frozen=frozen)


def _sensitive_omega(model: Model, pairs: DualPairSet, layers: Sequence[str], fraction: float,
                     attack: AttackSpec | None = None) -> dict[str, list[int]]:
    tables = layer_tables(model, pairs, layers, attack=attack)
    return {l: select_sensitive(tables[l], fraction=fraction).channels for l in layers}


def _dynamic_omega(model: Model, cfg: TrainConfig, pool: Dataset, layers, epoch: int) -> dict[str, list[int]]:
    rng = np.random.default_rng([cfg.seed, 7919, epoch])
    idx = np.sort(rng.choice(len(pool), size=min(cfg.dyn_sample_count, len(pool)), replace=False))
    pairs = build_dual_pairs(model, pool.subset(idx), _epoch_attack(cfg.attack, 10_000 + epoch))
    return _sensitive_omega(model, pairs, layers, cfg.sensitive_fraction)


def choose_omega(base: Model, cfg: TrainConfig, train: Dataset, layers: Sequence[str],
                 pairs: DualPairSet | None = None) -> tuple[dict[str, list[int]], DualPairSet | None, int | None]:
    """Initial sensitive sets per the configured mode; returns (omega, pairs, rand seed)."""
    widths = {l: channel_count(base.spec, l) for l in layers}
    if cfg.mode == "all":
        return {l: list(range(w)) for l, w in widths.items()}, pairs, None
    if cfg.mode == "rand":
        rseed = int(np.random.default_rng([cfg.seed, 104729]).integers(2 ** 31))
        rng = np.random.default_rng(rseed)
        omega = {}
        for l, w in widths.items():
            k = fraction_to_k(cfg.sensitive_fraction, w)
            omega[l] = sorted(int(i) for i in rng.choice(w, size=k, replace=False))
        return omega, pairs, rseed
    if pairs is None:
        pairs = build_dual_pairs(base, train, cfg.attack)
    return _sensitive_omega(base, pairs, layers, cfg.sensitive_fraction, cfg.attack), pairs, None


def train_sns(cfg: TrainConfig, train: Dataset, base: Model, val: Dataset | None = None,
              pairs: DualPairSet | None = None) -> tuple[Model, TrainReport]:
    """Fine-tune ``base`` with the adversarial loss plus lam times the SNS term.

    Step 1 builds the dual-pair set on ``base`` and picks the sensitive sets
    (``sen``/``dyn``), or takes every neuron (``all``) or a random subset of
    the same size (``rand``). Step 2 trains for ``cfg.epochs`` epochs with
    adversaries regenerated against the current parameters, unless
    ``static_pairs`` is set.
    """
    layers = list(cfg.layers) if cfg.layers else select_layers_topk(base.spec, max(1, len(eligible_layers(base.spec)) // 2))
    omega, pairs, rseed = choose_omega(base, cfg, train, layers, pairs)
    if any(len(v) == 0 for v in omega.values()):
        raise ValueError("empty sensitive set")
    report = TrainReport("sns_" + cfg.mode, sensitive={l: list(v) for l, v in omega.items()}, rand_seed=rseed)
    frozen = frozen_params(base.spec, layers) if cfg.freeze_below else []
    static = None
    if cfg.static_pairs:
        static = pairs if pairs is not None else build_dual_pairs(base, train, cfg.attack)
    return _run("sns", cfg, train, val, base, omega, frozen, static, report,
                dyn_pool=train if cfg.mode == "dyn" else None)


def evaluate(model: Model, split: Dataset, attacks: Sequence[AttackSpec]) -> dict:
    """Clean accuracy and robust accuracy per attack name."""
    if len(split) == 0:
        raise ValueError("evaluation split is empty")
    return evaluate_model(model, split, attacks)


__all__ = [
    "TrainConfig", "TrainReport", "EpochRecord", "TrainingDiverged", "sns_loss", "select_layers_topk",
    "eligible_layers", "frozen_params", "train_vanilla", "train_pat", "train_alp", "train_sns",
    "choose_omega", "evaluate", "accuracy",
]
