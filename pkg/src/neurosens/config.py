"""Run configuration: an INI-style key/value document with a fixed schema.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments; lists are comma separated. Sections:

    [run]            model, checkpoint, base_checkpoint, seed
    [data]           source, kind, classes, n, size, channels, noise, amplitude,
                     background, images, labels, paths, split, use, limit
    [attack]         the command's primary attack
    [train]          training hyper-parameters
    [train.attack]   attack used to craft training adversaries
    [eval.NAME]      one evaluation attack per section
    [analysis]       layers, fraction, k, classes, betas, trials, aggregate,
                     importance, k_values, target_class, selection
    [report]         inputs

Attack sections accept kind, eps_255 or eps_unit, steps, alpha_255 or
alpha_unit, random_start, severity, seed, targeted, target_class.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .attacks import AttackSpec


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _list(conv: Callable = str) -> Callable[[str], list]:
    def parse(v: str) -> list:
        return [conv(x.strip()) for x in v.split(",") if x.strip()]
    return parse


ATTACK_KEYS: dict[str, Callable] = {
    "kind": str, "eps_255": float, "eps_unit": float, "steps": int, "alpha_255": float,
    "alpha_unit": float, "random_start": _bool, "severity": int, "seed": int,
    "targeted": _bool, "target_class": int,
}

SCHEMA: dict[str, dict[str, Callable]] = {
    "run": {"model": str, "checkpoint": str, "base_checkpoint": str, "seed": int},
    "data": {"source": str, "kind": str, "classes": int, "n": int, "size": int, "channels": int,
             "noise": float, "amplitude": float, "background": float, "images": str, "labels": str,
             "paths": _list(str), "split": _list(float), "use": str, "limit": int, "seed": int},
    "attack": ATTACK_KEYS,
    "train": {"method": str, "epochs": int, "batch_size": int, "lr": float, "momentum": float,
              "lr_decay": float, "lr_step": int, "weight_decay": float, "lam": float,
              "layers": _list(str), "top_k_layers": int, "mode": str, "sensitive_fraction": float,
              "dyn_sample_count": int, "mix_clean": float, "mix_adv": float,
              "pure_adversarial": _bool, "alp_lambda": float, "static_pairs": _bool,
              "freeze_below": _bool, "eval_limit": int, "eval_every": int},
    "train.attack": ATTACK_KEYS,
    "analysis": {"layers": _list(str), "fraction": float, "k": int, "classes": _list(int),
                 "betas": _list(float), "trials": int, "aggregate": str, "importance": str,
                 "k_values": _list(int), "target_class": int, "selection": str,
                 "layer_fraction": float, "limit": int},
    "report": {"inputs": _list(str)},
}


@dataclass
class RunConfig:
    sections: dict[str, dict[str, Any]]
    raw: dict[str, dict[str, str]]

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.sections.get(name, {}))

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def attack(self, section: str = "attack") -> AttackSpec | None:
        if section not in self.sections:
            return None
        try:
            return AttackSpec.from_config(self.sections[section])
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"[{section}]: {e}") from None

    def eval_attacks(self) -> list[AttackSpec]:
        names = sorted(s for s in self.sections if s.startswith("eval."))
        return [self.attack(s) for s in names]

    def set(self, section: str, key: str, value) -> None:
        self.sections.setdefault(section, {})[key] = value
        self.raw.setdefault(section, {})[key] = _render(value)

    def dumps(self) -> str:
        """Resolved configuration in canonical order."""
        out = io.StringIO()
        for sec in sorted(self.raw):
            out.write(f"[{sec}]\n")
            for key in sorted(self.raw[sec]):
                out.write(f"{key} = {self.raw[sec][key]}\n")
            out.write("\n")
        return out.getvalue()


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_render(v) for v in value)
    return str(value)


def _schema_for(section: str) -> dict[str, Callable]:
    if section in SCHEMA:
        return SCHEMA[section]
    if section.startswith("eval.") and len(section) > 5:
        return ATTACK_KEYS
    raise ConfigError(f"unknown section [{section}]")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#", ";"), strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    sections, raw = {}, {}
    for sec in cp.sections():
        schema = _schema_for(sec)
        sections[sec], raw[sec] = {}, {}
        for key, val in cp.items(sec):
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in [{sec}]; allowed: {sorted(schema)}")
            try:
                sections[sec][key] = schema[key](val)
            except ValueError as e:
                raise ConfigError(f"[{sec}] {key}: {e}") from None
            raw[sec][key] = val.strip()
    cfg = RunConfig(sections, raw)
    for sec in sections:
        if sec == "attack" or sec == "train.attack" or sec.startswith("eval."):
            cfg.attack(sec)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)
