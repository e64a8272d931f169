import numpy as np
import pytest

from neurosens import autodiff as ad
from neurosens.attacks import AttackSpec
from neurosens.data import synth_dataset
from neurosens.models import Model, build_model, forward, mlp_small, vgg_mini
from neurosens.training import (TrainConfig, TrainingDiverged, choose_omega, eligible_layers, frozen_params,
                                select_layers_topk, sns_loss, train_alp, train_pat, train_sns, train_vanilla)

FAST_ATTACK = AttackSpec("pgd_linf", 8 / 255, steps=2)


@pytest.fixture(scope="module")
def tiny():
    return synth_dataset("blobs", 4, 64, 8, 0.1, seed=0)


def test_layer_selection_vgg_mini():
    spec = vgg_mini((3, 8, 8))
    assert eligible_layers(spec) == [f"conv{i}" for i in range(1, 7)]
    assert select_layers_topk(spec, 3) == ["conv4", "conv5", "conv6"]
    assert select_layers_topk(spec, 6)[0] == "conv1"
    with pytest.raises(ValueError):
        select_layers_topk(spec, 7)
    assert frozen_params(spec, ["conv4", "conv6"]) == [f"conv{i}.{p}" for i in (1, 2, 3) for p in ("weight", "bias")]
    assert frozen_params(spec, ["conv1"]) == []


def test_sns_loss_matches_hand_value():
    spec = mlp_small((1, 1, 2), 2, hidden=2)
    m = Model(spec, {"fc1.weight": np.eye(2), "fc1.bias": np.zeros(2),
                     "fc2.weight": np.eye(2), "fc2.bias": np.zeros(2)})
    clean = np.array([[[[0.2, 0.4]]], [[[0.1, 0.1]]]])
    adv = np.array([[[[0.6, 0.4]]], [[[0.1, 0.3]]]])
    _, rc = forward(m, clean, record=True)
    _, ra = forward(m, adv, record=True)
    # channel 0 deviates by 0.4 then 0.0; channel 1 by 0.0 then 0.2; batch of two
    assert sns_loss(rc, ra, {"fc1": [0]}).item() == pytest.approx(0.2)
    assert sns_loss(rc, ra, {"fc1": [0, 1]}).item() == pytest.approx(0.3)
    with pytest.raises(ValueError):
        sns_loss(rc, ra, {"fc1": []})


def test_sns_loss_gradient():
    spec = vgg_mini((3, 8, 8))
    m = build_model(spec, 0)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(2, 3, 8, 8))
    xa = np.clip(x + rng.uniform(-0.05, 0.05, size=x.shape), 0, 1)

    def loss_of(bias):
        params = dict(m.params)
        params["conv5.bias"] = bias
        _, rc = forward(m, x, record=True, params=params)
        _, ra = forward(m, xa, record=True, params=params)
        return sns_loss(rc, ra, {"conv5": [1, 7], "conv6": [0]})

    err = ad.grad_check(loss_of, m.params["conv5.bias"].data + 0.01, step=1e-6)
    assert err < 1e-4


def test_vanilla_learns_and_is_deterministic(tiny):
    cfg = TrainConfig(epochs=8, batch_size=8, lr=0.02, seed=1)
    m1, r1 = train_vanilla(cfg, tiny, None, vgg_mini((3, 8, 8)))
    m2, r2 = train_vanilla(cfg, tiny, None, vgg_mini((3, 8, 8)))
    assert r1.jsonl_rows() == r2.jsonl_rows()
    for n in m1.params:
        assert m1.params[n].data.tobytes() == m2.params[n].data.tobytes()
    assert r1.epochs[-1].loss_adv < r1.epochs[0].loss_adv


def test_pat_and_alp_run(tiny):
    cfg = TrainConfig(epochs=1, batch_size=16, lr=0.01, attack=FAST_ATTACK)
    _, rp = train_pat(cfg, tiny, None, vgg_mini((3, 8, 8)))
    _, ra = train_alp(cfg, tiny, None, vgg_mini((3, 8, 8)))
    assert len(rp.steps) == len(ra.steps) == 4
    with pytest.raises(ValueError):
        train_pat(TrainConfig(attack=AttackSpec("fgsm", 0.1)), tiny, None, vgg_mini((3, 8, 8)))


@pytest.mark.parametrize("mode", ["sen", "dyn", "all", "rand"])
def test_sns_modes_freeze_lower_layers(tiny, mode):
    base = build_model(vgg_mini((3, 8, 8)), 0)
    cfg = TrainConfig(epochs=1, batch_size=16, lr=0.01, attack=FAST_ATTACK, layers=("conv5", "conv6"),
                      mode=mode, dyn_sample_count=8)
    model, rep = train_sns(cfg, tiny, base)
    assert rep.method == f"sns_{mode}"
    assert set(rep.sensitive) == {"conv5", "conv6"}
    for name in rep.frozen:
        assert model.params[name].data.tobytes() == base.params[name].data.tobytes()
    assert model.params["conv6.weight"].data.tobytes() != base.params["conv6.weight"].data.tobytes()
    if mode == "all":
        assert len(rep.sensitive["conv6"]) == 64
    else:
        assert len(rep.sensitive["conv6"]) == 7
    assert all(s[2] > 0 for s in rep.steps)


def test_rand_mode_logs_seed(tiny):
    base = build_model(vgg_mini((3, 8, 8)), 0)
    cfg = TrainConfig(mode="rand", layers=("conv6",), seed=3)
    omega, _, seed = choose_omega(base, cfg, tiny, ["conv6"])
    assert seed is not None
    omega2, _, _ = choose_omega(base, cfg, tiny, ["conv6"])
    assert omega == omega2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported(tiny):
    cfg = TrainConfig(epochs=1, batch_size=16, lr=1e6, momentum=0.0)
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_vanilla(cfg, tiny, None, vgg_mini((3, 8, 8)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="best")
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
