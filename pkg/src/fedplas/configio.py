"""Experiment configuration files.

Configs are INI-style with five required sections: [federation] [training]
[defense] [attack] [dataset]. Every key is optional and falls back to the
documented default; unknown keys are rejected so typos fail loudly. Parse
and validation problems are collected into a ConfigError whose messages name
the offending section and field.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from pathlib import Path

from . import nn
from .aggregation import RuleConfig
from .attacks import AttackSpec, EdgeSelector, TriggerGeometry
from .federation import DatasetSpec, ExperimentConfig

REQUIRED_SECTIONS = ("federation", "training", "defense", "attack", "dataset")

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}

# section -> key -> type tag
SCHEMA = {
    "federation": {
        "num_clients": int,
        "clients_per_round": int,
        "rounds": int,
        "malicious_fraction": float,
        "dirichlet_alpha": float,
        "arch": str,
        "seed": int,
        "reset_velocity": bool,
        "boost_factor": float,
        "eval_every": int,
    },
    "training": {
        "learning_rate": float,
        "momentum": float,
        "weight_decay": float,
        "batch_size": int,
        "local_iterations": int,
        "lr_decay_base": float,
    },
    "defense": {
        "rule": str,
        "cut_layer": int,
        "krum_f": int,
        "multikrum_m": int,
        "ndc_threshold": float,
        "rsa_beta": float,
        "rsa_beta_decay": bool,
        "flame_sigma": float,
        "flame_noise_absolute": bool,
        "fltrust_root_size": int,
    },
    "attack": {
        "kind": str,
        "target_label": int,
        "poison_fraction": float,
        "source_label": int,
        "trigger_corner": str,
        "trigger_height": int,
        "trigger_width": int,
        "trigger_intensity": float,
        "trigger_shape": str,
        "edge_base_label": int,
        "edge_rotation_degrees": float,
        "edge_fraction": float,
        "seed": int,
    },
    "dataset": {
        "source": str,
        "num_classes": int,
        "image_side": int,
        "train_size": int,
        "test_size": int,
        "synth_noise": float,
        "train_images": str,
        "train_labels": str,
        "test_images": str,
        "test_labels": str,
        "name": str,
    },
}


class ConfigError(ValueError):
    """One or more configuration problems; ``problems`` lists them all."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


def _convert(section: str, key: str, raw: str, kind, problems: list[str]):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered not in _BOOL:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL[lowered]
        return kind(raw)
    except ValueError as exc:
        problems.append(f"[{section}] {key}: {exc}")
        return None


def _read_sections(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text(encoding="utf-8")
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        # configparser errors already cite line numbers
        raise ConfigError([str(exc)]) from exc
    return {s: dict(parser.items(s)) for s in parser.sections()}


def parse_config(path) -> ExperimentConfig:
    sections = _read_sections(path)
    problems: list[str] = []
    for name in REQUIRED_SECTIONS:
        if name not in sections:
            problems.append(f"missing required section [{name}]")
    for name in sections:
        if name not in SCHEMA:
            problems.append(f"unknown section [{name}]")
    if problems:
        raise ConfigError(problems)

    values: dict[str, dict] = {}
    for name, keys in SCHEMA.items():
        values[name] = {}
        for key, raw in sections[name].items():
            if key not in keys:
                problems.append(f"[{name}] unknown key {key!r}")
                continue
            converted = _convert(name, key, raw, keys[key], problems)
            if converted is not None:
                values[name][key] = converted
    if problems:
        raise ConfigError(problems)
    return build_config(values)


def build_config(values: dict[str, dict]) -> ExperimentConfig:
    """Assemble an ExperimentConfig from per-section dicts (already typed)."""
    problems: list[str] = []
    fede = dict(values.get("federation", {}))
    train = dict(values.get("training", {}))
    defe = dict(values.get("defense", {}))
    atk = dict(values.get("attack", {}))
    dset = dict(values.get("dataset", {}))

    seed = fede.get("seed", 0)
    arch = fede.pop("arch", "lenet-s")

    def section(name, builder):
        try:
            return builder()
        except (ValueError, TypeError) as exc:
            problems.append(f"[{name}] {exc}")
            return None

    training = section(
        "training", lambda: nn.TrainingConfig(seed=seed, **train)
    )
    trigger_keys = {
        k.removeprefix("trigger_"): atk.pop(k)
        for k in list(atk)
        if k.startswith("trigger_")
    }
    edge_keys = {
        k.removeprefix("edge_"): atk.pop(k)
        for k in list(atk)
        if k.startswith("edge_") and k != "edge_fraction"
    }
    edge_fraction = atk.pop("edge_fraction", None)
    attack = section(
        "attack",
        lambda: AttackSpec(
            trigger=TriggerGeometry(**trigger_keys),
            edge=EdgeSelector(**edge_keys),
            **({"edge_fraction": edge_fraction} if edge_fraction is not None else {}),
            **atk,
        ),
    )
    defense = section("defense", lambda: RuleConfig(**defe))
    dataset = section("dataset", lambda: DatasetSpec(**dset))
    if problems or None in (training, attack, defense, dataset):
        raise ConfigError(problems)

    try:
        cfg = ExperimentConfig(
            arch_id=arch,
            dataset=dataset,
            training=training,
            defense=defense,
            attack=attack,
            **fede,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError([f"[federation] {exc}"]) from exc

    if cfg.defense.rule in ("krum", "multikrum") and cfg.defense.krum_f is None:
        auto_f = int(math.floor(cfg.malicious_fraction * cfg.clients_per_round + 0.5))
        auto_f = min(auto_f, cfg.clients_per_round - 3)
        if auto_f < 0:
            raise ConfigError(
                [
                    f"[defense] {cfg.defense.rule} needs clients_per_round >= 3, "
                    f"got {cfg.clients_per_round}"
                ]
            )
        cfg = dataclasses.replace(
            cfg, defense=dataclasses.replace(cfg.defense, krum_f=auto_f)
        )
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """JSON-ready snapshot that :func:`config_from_dict` replays exactly."""
    return {
        "federation": {
            "num_clients": cfg.num_clients,
            "clients_per_round": cfg.clients_per_round,
            "rounds": cfg.rounds,
            "malicious_fraction": cfg.malicious_fraction,
            "dirichlet_alpha": cfg.dirichlet_alpha,
            "arch": cfg.arch_id,
            "seed": cfg.seed,
            "reset_velocity": cfg.reset_velocity,
            "boost_factor": cfg.boost_factor,
            "eval_every": cfg.eval_every,
        },
        "training": {
            "learning_rate": cfg.training.learning_rate,
            "momentum": cfg.training.momentum,
            "weight_decay": cfg.training.weight_decay,
            "batch_size": cfg.training.batch_size,
            "local_iterations": cfg.training.local_iterations,
            "lr_decay_base": cfg.training.lr_decay_base,
        },
        "defense": {
            "rule": cfg.defense.rule,
            "cut_layer": cfg.defense.cut_layer,
            "krum_f": cfg.defense.krum_f,
            "multikrum_m": cfg.defense.multikrum_m,
            "ndc_threshold": cfg.defense.ndc_threshold,
            "rsa_beta": cfg.defense.rsa_beta,
            "rsa_beta_decay": cfg.defense.rsa_beta_decay,
            "flame_sigma": cfg.defense.flame_sigma,
            "flame_noise_absolute": cfg.defense.flame_noise_absolute,
            "fltrust_root_size": cfg.defense.fltrust_root_size,
        },
        "attack": {
            "kind": cfg.attack.kind,
            "target_label": cfg.attack.target_label,
            "poison_fraction": cfg.attack.poison_fraction,
            "source_label": cfg.attack.source_label,
            "trigger_corner": cfg.attack.trigger.corner,
            "trigger_height": cfg.attack.trigger.height,
            "trigger_width": cfg.attack.trigger.width,
            "trigger_intensity": cfg.attack.trigger.intensity,
            "trigger_shape": cfg.attack.trigger.shape,
            "edge_base_label": cfg.attack.edge.base_label,
            "edge_rotation_degrees": cfg.attack.edge.rotation_degrees,
            "edge_fraction": cfg.attack.edge_fraction,
            "seed": cfg.attack.seed,
        },
        "dataset": {
            "source": cfg.dataset.source,
            "num_classes": cfg.dataset.num_classes,
            "image_side": cfg.dataset.image_side,
            "train_size": cfg.dataset.train_size,
            "test_size": cfg.dataset.test_size,
            "synth_noise": cfg.dataset.synth_noise,
            "train_images": cfg.dataset.train_images,
            "train_labels": cfg.dataset.train_labels,
            "test_images": cfg.dataset.test_images,
            "test_labels": cfg.dataset.test_labels,
            "name": cfg.dataset.name,
        },
    }


def config_from_dict(snapshot: dict) -> ExperimentConfig:
    values = {
        name: {k: v for k, v in section.items() if v is not None}
        for name, section in snapshot.items()
    }
    return build_config(values)


def write_config_ini(cfg: ExperimentConfig, path) -> None:
    lines = []
    for name, section in config_to_dict(cfg).items():
        lines.append(f"[{name}]")
        for key, value in section.items():
            if value is None:
                continue
            lines.append(f"{key} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")
