"""Run configuration: a TOML document with fixed sections and strict keys.

Unknown keys are rejected with their section-qualified name; every
omitted key is materialized from its default so the persisted effective
config fully reproduces a run.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError

CLASSIFICATION = "classification"
SEGMENTATION = "segmentation"

# key -> (expected type(s), default). Network defaults follow the
# documented classifier/segmenter recipes; desk-scale runs override them.
_NETWORK_SCHEMA: dict[str, tuple[Any, Any]] = {
    "arch": (str, "classifier"),
    "n_points": (int, 1024),
    "n_classes": (int, 40),
    "n_parts": (int, 50),
    "feature_mode": (str, "xyz"),
    "stem_channels": (int, 64),
    "branch_channels": (list, [128, 256]),
    "module1_lengths": (list, [0.1, 0.2, 0.4]),
    "module2_lengths": (list, [0.2, 0.4, 0.8]),
    "middle_size": (int, 3),
    "interpolation": (str, "gaussian"),
    "normalization": (str, "count"),
    "sigma": (float, 0.1 / 3.0),
    "head_channels": (list, [512, 256]),
    "dropout": (float, 0.5),
    "downsample_ratio": (float, 0.5),
    "downsampler": (str, "fps"),
    "bias": (bool, True),
    "pointwise_mode": (str, "linear"),
    "encoder_channels": (list, [64, 128, 256]),
    "decoder_channels": (list, [128, 64, 64]),
    "first_length": (float, 0.05),
}

_OPTIMIZER_SCHEMA = {
    "lr": (float, 1e-3),
    "lr_decay": (float, 0.7),
    "lr_decay_every": (int, 80),
    "epochs": (int, 60),
    "batch_size": (int, 8),
    "scale_min": (float, 0.8),
    "scale_max": (float, 1.2),
    "jitter_std": (float, 0.02),
    "jitter_clip_stds": (float, 3.0),
    "target_accuracy": (float, 0.0),  # 0 disables early stopping
    "target_miou": (float, 0.0),
}

_DATA_SCHEMA = {
    "kind": (str, "synthetic"),
    "shapes": (list, ["sphere", "cube", "cylinder"]),
    "n_train": (int, 300),
    "n_test": (int, 60),
    "n_points": (int, 256),
    "noise_std": (float, 0.02),
    "manifest": (str, ""),
    "mesh_samples": (int, 1024),
}

_RUNTIME_SCHEMA = {
    "seed": (int, 0),
    "threads": (int, 0),  # 0 keeps the library default
    "deterministic": (bool, False),
    "precision": (str, "f64"),
}

_SECTIONS = {
    "network": _NETWORK_SCHEMA,
    "optimizer": _OPTIMIZER_SCHEMA,
    "data": _DATA_SCHEMA,
    "runtime": _RUNTIME_SCHEMA,
}

_TOP_LEVEL = {"task": (str, CLASSIFICATION), "out_dir": (str, "runs/out")}


def _coerce(section: str, key: str, value, expected_type):
    if expected_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected_type is bool and not isinstance(value, bool):
        raise ConfigError(f"{section}.{key}: expected bool, got {value!r}")
    if not isinstance(value, expected_type):
        raise ConfigError(
            f"{section}.{key}: expected {expected_type.__name__}, got {value!r}")
    return value


@dataclass
class RunConfig:
    task: str
    out_dir: str
    network: dict
    optimizer: dict
    data: dict
    runtime: dict

    def sections(self) -> dict[str, dict]:
        return {"network": self.network, "optimizer": self.optimizer,
                "data": self.data, "runtime": self.runtime}


def validate_config(doc: dict) -> RunConfig:
    values: dict[str, Any] = {}
    for key, raw in doc.items():
        if key in _TOP_LEVEL:
            values[key] = _coerce("", key, raw, _TOP_LEVEL[key][0])
        elif key in _SECTIONS:
            continue
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    for key, (_, default) in _TOP_LEVEL.items():
        values.setdefault(key, default)
    if values["task"] not in (CLASSIFICATION, SEGMENTATION):
        raise ConfigError(f"task must be classification or segmentation, "
                          f"got {values['task']!r}")
    sections = {}
    for section, schema in _SECTIONS.items():
        raw = doc.get(section, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"section [{section}] must be a table")
        out = {}
        for key, value in raw.items():
            if key not in schema:
                raise ConfigError(f"unknown key {section}.{key}")
            out[key] = _coerce(section, key, value, schema[key][0])
        for key, (_, default) in schema.items():
            out.setdefault(key, default if not isinstance(default, list) else list(default))
        sections[section] = out
    return RunConfig(task=values["task"], out_dir=values["out_dir"], **sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    return validate_config(doc)


def default_config(task: str = CLASSIFICATION) -> RunConfig:
    return validate_config({"task": task})


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r} to TOML")


def effective_toml(config: RunConfig) -> str:
    """Serialize the fully-defaulted config; parsing it back is lossless."""
    lines = [f"task = {_toml_value(config.task)}",
             f"out_dir = {_toml_value(config.out_dir)}", ""]
    for section, data in config.sections().items():
        lines.append(f"[{section}]")
        for key in _SECTIONS[section]:
            lines.append(f"{key} = {_toml_value(data[key])}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Builders from a validated config
# ---------------------------------------------------------------------------


def build_network_spec(config: RunConfig):
    from .networks import (ClassifierConfig, SegmenterConfig, build_classifier,
                           build_segmenter)

    net = config.network
    common = dict(
        n_points=net["n_points"],
        feature_mode=net["feature_mode"],
        interpolation=net["interpolation"],
        normalization=net["normalization"],
        sigma=net["sigma"],
        downsample_ratio=net["downsample_ratio"],
        downsampler=net["downsampler"],
        bias=net["bias"],
    )
    if config.task == CLASSIFICATION:
        if net["arch"] != "classifier":
            raise ConfigError(f"task classification needs arch classifier, "
                              f"got {net['arch']!r}")
        return build_classifier(ClassifierConfig(
            n_classes=net["n_classes"],
            stem_channels=net["stem_channels"],
            branch_channels=tuple(net["branch_channels"]),
            module1_lengths=tuple(net["module1_lengths"]),
            module2_lengths=tuple(net["module2_lengths"]),
            middle_size=net["middle_size"],
            head_channels=tuple(net["head_channels"]),
            dropout=net["dropout"],
            pointwise_mode=net["pointwise_mode"],
            **common,
        ))
    if net["arch"] != "segmenter":
        raise ConfigError(f"task segmentation needs arch segmenter, got {net['arch']!r}")
    return build_segmenter(SegmenterConfig(
        n_parts=net["n_parts"],
        encoder_channels=tuple(net["encoder_channels"]),
        decoder_channels=tuple(net["decoder_channels"]),
        first_length=net["first_length"],
        **common,
    ))


def build_datasets(config: RunConfig):
    from .data import (classification_dataset, load_manifest_dataset,
                       segmentation_dataset)

    data = config.data
    seed = config.runtime["seed"]
    if data["kind"] == "synthetic":
        if config.task == CLASSIFICATION:
            return classification_dataset(
                data["n_train"], data["n_test"], data["n_points"],
                data["noise_std"], seed, kinds=tuple(data["shapes"]))
        return segmentation_dataset(
            data["n_train"], data["n_test"], data["n_points"],
            data["noise_std"], seed)
    if data["kind"] == "manifest":
        if not data["manifest"]:
            raise ConfigError("data.kind = 'manifest' needs data.manifest set")
        splits = load_manifest_dataset(data["manifest"], data["mesh_samples"], seed)
        train = splits.get("train", [])
        test = splits.get("test", splits.get("val", []))
        if not train or not test:
            raise ConfigError("manifest must provide train and test splits")
        return train, test
    raise ConfigError(f"unknown data kind {data['kind']!r}")


def build_train_config(config: RunConfig, out_dir=None):
    from .training import AugmentSpec, TrainConfig

    opt = config.optimizer
    runtime = config.runtime
    return TrainConfig(
        epochs=opt["epochs"],
        batch_size=opt["batch_size"],
        seed=runtime["seed"],
        deterministic=runtime["deterministic"],
        lr=opt["lr"],
        lr_decay=opt["lr_decay"],
        lr_decay_every=opt["lr_decay_every"],
        augment=AugmentSpec(
            scale_range=(opt["scale_min"], opt["scale_max"]),
            jitter_std=opt["jitter_std"],
            jitter_clip_stds=opt["jitter_clip_stds"],
            seed=runtime["seed"],
        ),
        out_dir=out_dir if out_dir is not None else config.out_dir,
        target_accuracy=opt["target_accuracy"] or None,
        target_miou=opt["target_miou"] or None,
    )
