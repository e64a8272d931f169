"""Experiment runner: ``neurosens <subcommand> --config run.ini --out DIR [--seed N]``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attribution, data, models, sensitivity, training
from .attacks import AttackSpec, build_dual_pairs, save_pairs, targeted_set
from .config import ConfigError, RunConfig, load_config
from .reports import atomic_write_text, emit_report, render_jsonl, write_json

log = logging.getLogger("neurosens")

COMMANDS = ("train", "attack", "sensitivity", "ratio-profile", "importance", "similarity",
            "suppress", "layer-sweep", "evaluate", "report")
OUT_ENV = "NEUROSENS_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neurosens", description="Neuron sensitivity experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--out", default=None, help=f"output directory (or ${OUT_ENV})")
    p.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _seed(cfg: RunConfig) -> int:
    return int(cfg.get("run", "seed", 0))


def load_dataset(cfg: RunConfig) -> data.Dataset:
    d = cfg.section("data")
    source = d.get("source", "synth")
    if source == "synth":
        ds = data.synth_dataset(d.get("kind", "blobs"), d.get("classes", 10), d.get("n", 1000),
                                d.get("size", 8), d.get("noise", 0.1), d.get("seed", _seed(cfg)),
                                d.get("channels", 3), d.get("amplitude", 0.5), d.get("background", 0.25))
    elif source == "idx":
        if "images" not in d or "labels" not in d:
            raise ConfigError("[data] source=idx needs images and labels")
        ds = data.load_idx(d["images"], d["labels"], d.get("classes"))
    elif source == "cifar":
        if "paths" not in d:
            raise ConfigError("[data] source=cifar needs paths")
        ds = data.load_cifar_binary(d["paths"])
    else:
        raise ConfigError(f"[data] unknown source {source!r}")
    return ds


def load_splits(cfg: RunConfig):
    ds = load_dataset(cfg)
    fr = cfg.get("data", "split", [0.8, 0.1, 0.1])
    return data.split(ds, fr, cfg.get("data", "seed", _seed(cfg)))


def analysis_split(cfg: RunConfig, default: str = "test") -> data.Dataset:
    train, val, test = load_splits(cfg)
    use = cfg.get("data", "use", default)
    try:
        ds = {"train": train, "val": val, "test": test}[use]
    except KeyError:
        raise ConfigError(f"[data] use must be train, val or test, got {use!r}") from None
    limit = cfg.get("data", "limit")
    if limit is not None:
        ds = ds.subset(np.arange(min(limit, len(ds))))
    if len(ds) == 0:
        raise ConfigError(f"[data] split {use!r} is empty")
    return ds


def load_model(cfg: RunConfig, key: str = "checkpoint") -> models.Model:
    path = cfg.get("run", key)
    if path is None:
        raise ConfigError(f"[run] {key} is required for this command")
    return models.load_checkpoint(path)


def model_spec(cfg: RunConfig, image_shape, classes: int) -> models.ModelSpec:
    name = cfg.get("run", "model", "vgg-mini")
    if name in models.REFERENCE_SPECS:
        return models.reference_spec(name, input_shape=image_shape, class_count=classes)
    p = Path(name)
    if p.suffix == ".json":
        return models.ModelSpec.from_json(p.read_text())
    raise ConfigError(f"[run] model must be a reference spec name or a .json spec file, got {name!r}")


def primary_attack(cfg: RunConfig, section: str = "attack") -> AttackSpec:
    spec = cfg.attack(section)
    if spec is None:
        raise ConfigError(f"[{section}] section is required for this command")
    return spec


def analysis_layers(cfg: RunConfig, spec: models.ModelSpec, default: str = "conv") -> list[str]:
    raw = cfg.get("analysis", "layers", [default])
    names = spec.layer_names
    out = []
    for item in raw:
        if item == "conv":
            out += [l.name for l in spec.layers if l.kind == "conv"]
        elif item == "conv+relu":
            out += [l.name for l in spec.layers if l.kind in ("conv", "relu")]
        elif item in names:
            out.append(item)
        else:
            raise ConfigError(f"[analysis] unknown layer {item!r}; layers are {names}")
    return [n for n in names if n in set(out)]


def train_config(cfg: RunConfig, spec: models.ModelSpec) -> training.TrainConfig:
    t = cfg.section("train")
    t.pop("method", None)
    top_k = t.pop("top_k_layers", None)
    if top_k is not None and "layers" not in t:
        t["layers"] = training.select_layers_topk(spec, top_k)
    attack = cfg.attack("train.attack") or training.default_train_attack()
    try:
        return training.TrainConfig(seed=_seed(cfg), attack=attack, eval_attacks=tuple(cfg.eval_attacks()), **t)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[train] {e}") from None


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    atomic_write_text(out / "resolved_config.ini", cfg.dumps())


def _plot_rows_sorted(tables) -> list[dict]:
    rows = []
    for layer, t in tables.items():
        for rank, v in enumerate(sorted(t.sigma, reverse=True)):
            rows.append({"x": rank, "series": layer, "value": float(v)})
    return rows


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, out: Path) -> None:
    train, val, test = load_splits(cfg)
    method = cfg.get("train", "method", "vanilla")
    if method == "sns":
        base = load_model(cfg, "base_checkpoint")
        tc = train_config(cfg, base.spec)
        model, report = training.train_sns(tc, train, base, val)
    else:
        spec = model_spec(cfg, train.image_shape, train.class_count)
        tc = train_config(cfg, spec)
        fn = {"vanilla": training.train_vanilla, "pat": training.train_pat, "alp": training.train_alp}.get(method)
        if fn is None:
            raise ConfigError(f"[train] unknown method {method!r}")
        model, report = fn(tc, train, val, spec)
    ckpt = models.save_checkpoint(model, out / "model.ckpt")
    report.checkpoint_path = ckpt.name
    report.final = training.evaluate(model, test, tc.eval_attacks) if len(test) else {}
    # epoch rows and the closing summary row have different keys
    atomic_write_text(out / "train_report.jsonl", render_jsonl(report.jsonl_rows()))


def cmd_attack(cfg: RunConfig, out: Path) -> None:
    model = load_model(cfg)
    ds = analysis_split(cfg)
    spec = primary_attack(cfg)
    if spec.targeted:
        pairs = targeted_set(model, ds, spec.target_class, spec)
        name = f"pairs_target{spec.target_class}.nspair"
    else:
        pairs = build_dual_pairs(model, ds, spec)
        name = "pairs.nspair"
    save_pairs(pairs, out / name)
    write_json(out / "attack_summary.json", {
        "file": name, "n_pairs": len(pairs), "attack": spec.summary(),
        "attempted": pairs.attempted if pairs.attempted is not None else len(pairs),
        "success_rate": pairs.success_rate if spec.targeted else None,
    })


def cmd_sensitivity(cfg: RunConfig, out: Path) -> None:
    model = load_model(cfg)
    ds = analysis_split(cfg)
    spec = primary_attack(cfg)
    layers = analysis_layers(cfg, model.spec)
    pairs = build_dual_pairs(model, ds, spec)
    tables = sensitivity.layer_tables(model, pairs, layers, attack=spec)
    rows = [r for l in layers for r in tables[l].csv_rows()]
    emit_report(rows, "csv", out / "sensitivity.csv", ["layer", "channel", "sigma", "sigma_ratio", "n_pairs", "skipped_pairs"])
    frac = cfg.get("analysis", "fraction", 0.1)
    sets = [sensitivity.select_sensitive(tables[l], fraction=frac).to_json() for l in layers]
    write_json(out / "sensitive_sets.json", sets)
    emit_report(_plot_rows_sorted(tables), "csv", out / "fig_sensitivity.csv", ["x", "series", "value"])


def cmd_ratio_profile(cfg: RunConfig, out: Path) -> None:
    model = load_model(cfg)
    ds = analysis_split(cfg)
    spec = primary_attack(cfg)
    layers = analysis_layers(cfg, model.spec, "conv+relu")
    pairs = build_dual_pairs(model, ds, spec)
    tables = sensitivity.layer_tables(model, pairs, layers, attack=spec)
    frac = cfg.get("analysis", "fraction", 0.1)
    rows = []
    for agg in ("sensitive", "all"):
        prof = sensitivity.amplification_profile(model, pairs, layers, agg, frac, tables)
        rows += [{"layer": l, "aggregate": agg, "mean_sigma_ratio": v} for l, v in prof]
    emit_report(rows, "csv", out / "ratio_profile.csv", ["layer", "aggregate", "mean_sigma_ratio"])
    default = cfg.get("analysis", "aggregate", "sensitive")
    plot = [{"x": r["layer"], "series": spec.name, "value": r["mean_sigma_ratio"]} for r in rows
            if r["aggregate"] == default]
    emit_report(plot, "csv", out / "fig_ratio_profile.csv", ["x", "series", "value"])


def _classes(cfg: RunConfig, model: models.Model) -> list[int]:
    return cfg.get("analysis", "classes", list(range(model.spec.class_count)))


def cmd_importance(cfg: RunConfig, out: Path) -> None:
    model = load_model(cfg)
    ds = analysis_split(cfg)
    spec = primary_attack(cfg)
    k = cfg.get("analysis", "k", 20)
    doc, rows = {}, []
    for y in _classes(cfg, model):
        ts = targeted_set(model, ds, y, spec)
        entry = {"n_pairs": len(ts), "attempted": ts.attempted, "success_rate": ts.success_rate}
        if len(ts):
            gamma = attribution.vote_important(model, ts, k).neurons
            entry["gamma"] = gamma
            for rank, ch in enumerate(gamma):
                rows.append({"target": y, "rank": rank, "channel": ch})
        doc[str(y)] = entry
    write_json(out / "importance.json", doc)
    emit_report(rows, "csv", out / "importance.csv", ["target", "rank", "channel"])


def cmd_similarity(cfg: RunConfig, out: Path) -> None:
    model = load_model(cfg)
    ds = analysis_split(cfg)
    spec = primary_attack(cfg)
    layers = analysis_layers(cfg, model.spec)
    study = attribution.per_class_similarity_study(
        model, ds, _classes(cfg, model), layers, cfg.get("analysis", "k", 20), spec,
        cfg.get("analysis", "layer_fraction", 0.1), cfg.get("analysis", "importance", "votes"))
    write_json(out / "similarity.json", study.to_json())
    emit_report(study.plot_rows(), "csv", out / "fig_similarity.csv", ["x", "series", "value"])


def cmd_suppress(cfg: RunConfig, out: Path) -> None:
    model = load_model(cfg)
    ds = analysis_split(cfg)
    selection = primary_attack(cfg)
    attacks = cfg.eval_attacks()
    layers = analysis_layers(cfg, model.spec)
    betas = cfg.get("analysis", "betas", [1.0, 0.9, 0.8, 0.7, 0.6, 0.5])
    rows = sensitivity.suppression_experiment(
        model, ds, attacks, betas, cfg.get("analysis", "trials", 3), layers,
        cfg.get("analysis", "fraction", 0.1), selection, seed=_seed(cfg))
    emit_report(rows, "csv", out / "suppression.csv", ["beta", "group", "metric", "value", "trial_seeds"])
    plot = [{"x": r["beta"], "series": f"{r['group']}:{r['metric']}", "value": r["value"]} for r in rows]
    emit_report(plot, "csv", out / "fig_suppression.csv", ["x", "series", "value"])


def cmd_layer_sweep(cfg: RunConfig, out: Path) -> None:
    base = load_model(cfg, "base_checkpoint")
    train, val, test = load_splits(cfg)
    eligible = training.eligible_layers(base.spec)
    ks = cfg.get("analysis", "k_values", list(range(1, len(eligible) + 1)))
    tc = train_config(cfg, base.spec)
    rows = []
    for k in ks:
        layers = training.select_layers_topk(base.spec, k)
        model, _ = training.train_sns(replace(tc, layers=tuple(layers)), train, base, None)
        res = training.evaluate(model, test, tc.eval_attacks)
        rows.append({"k": k, "layers": " ".join(layers), **res})
    cols = ["k", "layers"] + (list(rows[0].keys())[2:] if rows else ["clean"])
    emit_report(rows, "csv", out / "layer_sweep.csv", cols)


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    model = load_model(cfg)
    ds = analysis_split(cfg)
    attacks = cfg.eval_attacks()
    if not attacks and cfg.attack("attack") is not None:
        attacks = [cfg.attack("attack")]
    res = training.evaluate(model, ds, attacks)
    row = {"model": Path(cfg.get("run", "checkpoint")).name, **res}
    emit_report([row], "csv", out / "evaluation.csv")


def cmd_report(cfg: RunConfig, out: Path) -> None:
    inputs = cfg.get("report", "inputs")
    if not inputs:
        raise ConfigError("[report] inputs is required")
    merged: dict[str, tuple[list[str], list[dict]]] = {}
    files = {}
    for d in inputs:
        p = Path(d)
        if not p.is_dir():
            raise ConfigError(f"[report] input {d!r} is not a directory")
        files[p.name] = sorted(f.name for f in p.iterdir() if f.is_file())
        for f in sorted(p.glob("*.csv")):
            with open(f, newline="") as fh:
                reader = csv.DictReader(fh)
                cols = ["run"] + list(reader.fieldnames or [])
                rows = [{"run": p.name, **r} for r in reader]
            if f.name in merged and merged[f.name][0] != cols:
                raise ConfigError(f"[report] {f.name} has different columns across runs")
            merged.setdefault(f.name, (cols, []))[1].extend(rows)
    for name, (cols, rows) in sorted(merged.items()):
        emit_report(rows, "csv", out / f"merged_{name}", cols)
    write_json(out / "summary.json", {"runs": files, "merged": sorted(f"merged_{n}" for n in merged)})


HANDLERS = {
    "train": cmd_train, "attack": cmd_attack, "sensitivity": cmd_sensitivity,
    "ratio-profile": cmd_ratio_profile, "importance": cmd_importance, "similarity": cmd_similarity,
    "suppress": cmd_suppress, "layer-sweep": cmd_layer_sweep, "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        out = Path(args.out or os.environ.get(OUT_ENV) or "runs/latest")
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(cfg, out)
        HANDLERS[args.command](cfg, out)
    except (ConfigError, models.SpecError) as e:
        print(f"neurosens: config error: {e}", file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"neurosens: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
