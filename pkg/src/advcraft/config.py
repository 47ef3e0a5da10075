"""Experiment configuration: JSON schema, defaults, zoo persistence.

A config file is a JSON object with (all optional) sections ``dataset``,
``holdout``, ``zoo``, ``attack`` and ``eval``; missing keys fall back to
the defaults below. The same resolved structure drives the CLI and the
verification suite.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .data import Dataset, load_idx, synth_dataset
from .errors import ConfigError
from .models import DEFAULT_ZOO_PLAN, build_zoo, load_checkpoint, save_checkpoint


def default_experiment() -> dict:
    """Baseline experiment: synthetic data sized to train the zoo in ~2 minutes."""
    return {
        "dataset": {
            "kind": "synthetic",
            "classes": 8,
            "per_class": 300,
            "geometry": [1, 28, 28],
            "seed": 11,
            "noise": 0.10,
            "jitter": 2,
            "class_sep": 0.45,
            "texture": 0.12,
        },
        "holdout": {
            "sample_seed": 12,
            "per_class": 300,
        },
        "zoo": {
            "epochs": 20,
            "learning_rate": 0.04,
            "batch_size": 32,
            "adv_epsilon": 16 / 255,
            "seed": 0,
        },
        "attack": {
            "epsilon": 16 / 255,
            "iterations": 10,
            "seed": 0,
        },
        "eval": {
            "examples": 200,
            "selection": "all",
            "seed": 7,
            "batch": 100,
        },
    }


def load_config(path=None) -> dict:
    """Defaults overlaid with the given JSON file (section-wise merge)."""
    cfg = default_experiment()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for section, value in user.items():
            if isinstance(value, dict) and isinstance(cfg.get(section), dict):
                cfg[section].update(value)
            else:
                cfg[section] = value
    return cfg


def dataset_from_config(cfg: dict, *, holdout: bool = False) -> Dataset:
    """Build the training set, or the held-out split when ``holdout`` is set."""
    spec = copy.deepcopy(cfg["dataset"])
    if holdout:
        spec.update(cfg.get("holdout", {}))
    kind = spec.pop("kind", "synthetic")
    if kind == "idx":
        try:
            images, labels = spec["images"], spec["labels"]
        except KeyError as exc:
            raise ConfigError(f"idx dataset config needs key {exc}") from None
        return load_idx(images, labels)
    if kind == "synthetic":
        spec["geometry"] = tuple(spec.get("geometry", (1, 28, 28)))
        classes = spec.pop("classes", 8)
        per_class = spec.pop("per_class", 200)
        return synth_dataset(classes, per_class, **spec)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def zoo_from_config(cfg: dict, data: Dataset) -> dict:
    z = cfg["zoo"]
    return build_zoo(
        data,
        plan=DEFAULT_ZOO_PLAN,
        learning_rate=z["learning_rate"],
        epochs=z["epochs"],
        batch_size=z["batch_size"],
        adv_epsilon=z["adv_epsilon"],
        seed=z["seed"],
    )


def save_zoo(zoo: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, model in zoo.items():
        save_checkpoint(model, directory / f"{name}.pbck")


def load_zoo(directory) -> dict:
    directory = Path(directory)
    paths = sorted(directory.glob("*.pbck"))
    if not paths:
        raise ConfigError(f"no checkpoints (*.pbck) found in {directory}")
    zoo = {}
    for path in paths:
        model = load_checkpoint(path)
        zoo[model.metadata.get("name", path.stem)] = model
    return zoo
