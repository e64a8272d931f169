import csv
import json
import os

import pytest

from neurosens.cli import main

DATA = """
[data]
kind = blobs
classes = 4
n = 48
size = 8
amplitude = 0.4
split = 0.5, 0.25, 0.25
"""

TRAIN = """
[run]
model = vgg-mini
seed = 2
[train]
method = vanilla
epochs = 1
batch_size = 8
lr = 0.02
[eval.pgd]
kind = pgd_linf
eps_255 = 16
steps = 2
""" + DATA


def analysis(ckpt, extra=""):
    return f"""
[run]
checkpoint = {ckpt}
base_checkpoint = {ckpt}
seed = 2
[attack]
kind = pgd_linf
eps_255 = 16
steps = 2
[eval.pgd]
kind = pgd_linf
eps_255 = 16
steps = 2
[eval.zero]
kind = pgd_linf
eps_255 = 0
[analysis]
classes = 0, 1, 2, 3
k = 4
betas = 1.0, 0.5
trials = 2
k_values = 1, 2, 3, 4, 5, 6
[train]
method = sns
epochs = 1
batch_size = 8
lr = 0.01
[train.attack]
kind = pgd_linf
eps_255 = 8
steps = 1
{extra}""" + DATA


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write(d, "train.ini", TRAIN)
    assert main(["train", "--config", cfg, "--out", str(d / "base")]) == 0
    return d, d / "base" / "model.ckpt"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_outputs(trained):
    d, ckpt = trained
    out = d / "base"
    assert sorted(p.name for p in out.iterdir()) == ["model.ckpt", "resolved_config.ini", "train_report.jsonl"]
    lines = [json.loads(l) for l in (out / "train_report.jsonl").read_text().splitlines()]
    assert lines[-1]["summary"] and lines[-1]["checkpoint"] == "model.ckpt"


@pytest.mark.parametrize("command", ["attack", "sensitivity", "ratio-profile", "importance", "similarity",
                                     "suppress", "evaluate", "train"])
def test_subcommands_are_byte_deterministic(trained, tmp_path, command):
    _, ckpt = trained
    cfg = write(tmp_path, "a.ini", analysis(ckpt))
    assert main([command, "--config", cfg, "--out", str(tmp_path / "r1")]) == 0
    assert main([command, "--config", cfg, "--out", str(tmp_path / "r2")]) == 0
    files = sorted(p.name for p in (tmp_path / "r1").iterdir())
    assert "resolved_config.ini" in files and len(files) > 1
    for name in files:
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes(), name
    # re-running from the stored resolved config reproduces the reports
    assert main([command, "--config", str(tmp_path / "r1" / "resolved_config.ini"), "--out", str(tmp_path / "r3")]) == 0
    for name in files:
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r3" / name).read_bytes(), name


def test_evaluate_zero_eps_equals_clean(trained, tmp_path):
    _, ckpt = trained
    cfg = write(tmp_path, "a.ini", analysis(ckpt))
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    (row,) = read_csv(tmp_path / "e" / "evaluation.csv")
    assert row["pgd_linf_eps0"] == row["clean"]


def test_sensitivity_then_report(trained, tmp_path):
    _, ckpt = trained
    cfg = write(tmp_path, "a.ini", analysis(ckpt))
    for run in ("s1", "s2"):
        assert main(["sensitivity", "--config", cfg, "--out", str(tmp_path / run), "--seed", "5"]) == 0
    rows = read_csv(tmp_path / "s1" / "sensitivity.csv")
    # one row per (layer, channel) over the six conv layers of vgg-mini
    assert len(rows) == 16 + 16 + 32 + 32 + 64 + 64
    assert len({(r["layer"], r["channel"]) for r in rows}) == len(rows)
    assert "seed = 5" in (tmp_path / "s1" / "resolved_config.ini").read_text()
    rep = write(tmp_path, "r.ini", f"[report]\ninputs = {tmp_path / 's1'}, {tmp_path / 's2'}\n")
    assert main(["report", "--config", rep, "--out", str(tmp_path / "rep")]) == 0
    merged = read_csv(tmp_path / "rep" / "merged_sensitivity.csv")
    assert len(merged) == 2 * len(rows)
    assert {r["run"] for r in merged} == {"s1", "s2"}
    fig = read_csv(tmp_path / "s1" / "fig_sensitivity.csv")
    assert list(fig[0]) == ["x", "series", "value"]


def test_layer_sweep_grid(trained, tmp_path):
    _, ckpt = trained
    cfg = write(tmp_path, "a.ini", analysis(ckpt).replace("n = 48", "n = 16"))
    assert main(["layer-sweep", "--config", cfg, "--out", str(tmp_path / "ls")]) == 0
    rows = read_csv(tmp_path / "ls" / "layer_sweep.csv")
    assert [int(r["k"]) for r in rows] == [1, 2, 3, 4, 5, 6]


def test_targeted_attack_file(trained, tmp_path):
    _, ckpt = trained
    cfg = write(tmp_path, "a.ini", analysis(ckpt).replace("steps = 2\n[eval.pgd]", "steps = 2\ntargeted = true\n"
                                                                               "target_class = 1\n[eval.pgd]", 1))
    assert main(["attack", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    summary = json.loads((tmp_path / "t" / "attack_summary.json").read_text())
    assert summary["file"] == "pairs_target1.nspair"


def test_exit_codes(trained, tmp_path, capsys):
    _, ckpt = trained
    assert main(["nonsense", "--config", "x"]) == 1
    assert "usage" in capsys.readouterr().err
    bad = write(tmp_path, "bad.ini", "[run]\nunknown_key = 3\n")
    assert main(["evaluate", "--config", bad, "--out", str(tmp_path / "o")]) == 1
    assert "usage" in capsys.readouterr().err
    missing = write(tmp_path, "m.ini", analysis(tmp_path / "nope.ckpt"))
    assert main(["evaluate", "--config", missing, "--out", str(tmp_path / "o")]) == 2


def test_output_dir_from_environment(trained, tmp_path, monkeypatch):
    _, ckpt = trained
    cfg = write(tmp_path, "a.ini", analysis(ckpt))
    monkeypatch.setenv("NEUROSENS_OUT", str(tmp_path / "envout"))
    assert main(["evaluate", "--config", cfg]) == 0
    assert os.path.exists(tmp_path / "envout" / "evaluation.csv")
