"""Training configuration: dataclasses mirrored 1:1 by the JSON config file.

Unknown keys are rejected so typos never silently fall back to defaults, and
``--set dotted.key=value`` overrides must name keys that already exist.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import VimConfig

MODES = ("supervised", "mfd")


class ConfigError(ValueError):
    pass


@dataclass
class SlwsConfig:
    kind: str = "linear"
    p_l: float = 0.5
    include_cls: bool = True


@dataclass
class MfdConfig:
    ratio: float = 0.5
    beta: float = 1.0
    decoder_blocks: int = 2
    decoder_width: int = 64
    loss_on_all: bool = False
    teacher_depth: int = 2
    teacher_width: int = 32
    teacher_state_size: int = 4
    teacher_seed: int = 1234
    teacher_ckpt: str = ""  # empty: build from teacher_seed and save beside outputs


@dataclass
class TrainConfig:
    """Harness hyperparameters; paper-table defaults scaled to desk size."""

    epochs: int = 50
    batch_size: int = 64
    base_lr: float = 5e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.1
    warmup_epochs: int = 5
    label_smoothing: float = 0.1
    drop_path_rate: float = 0.0
    ema_decay: float = 0.999
    eval_ema: bool = False
    augment: bool = False
    seed: int = 0
    mode: str = "supervised"
    dataset: str = "synthetic"
    eval_dataset: str = ""
    train_samples: int = 5000
    eval_samples: int = 1000
    model: VimConfig = field(default_factory=VimConfig)
    slws: SlwsConfig | None = field(default_factory=SlwsConfig)
    mfd: MfdConfig = field(default_factory=MfdConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.train_samples < 1 or self.eval_samples < 1:
            raise ConfigError("batch_size and sample counts must be >= 1")
        if self.train_samples < self.batch_size:
            raise ConfigError("train_samples must cover at least one full batch")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")


_OPTIONAL_DATACLASS = {"slws": SlwsConfig}


def _from_dict(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path + key!r}")
        f = fields[key]
        nested = _nested_type(cls, f.name)
        if nested is not None:
            if value is None:
                kwargs[key] = None
            elif isinstance(value, dict):
                kwargs[key] = _from_dict(nested, value, f"{path}{key}.")
            else:
                raise ConfigError(f"config key {path + key!r} must be an object or null")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def _nested_type(cls, name: str):
    if cls is TrainConfig:
        return {"model": VimConfig, "slws": SlwsConfig, "mfd": MfdConfig}.get(name)
    return None


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply repeatable KEY=VALUE pairs with dotted paths onto a config dict."""
    defaults = config_to_dict(TrainConfig())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        ref_node = defaults
        node = doc
        for i, part in enumerate(parts[:-1]):
            if not isinstance(ref_node, dict) or part not in ref_node:
                raise ConfigError(f"override names unknown config key {key!r}")
            ref_node = ref_node[part]
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
        leaf = parts[-1]
        if not isinstance(ref_node, dict) or leaf not in ref_node:
            raise ConfigError(f"override names unknown config key {key!r}")
        node[leaf] = _parse_value(raw)
    return doc


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides=(), base: TrainConfig | None = None) -> TrainConfig:
    """Merge file JSON (if any) and overrides over the defaults."""
    doc: dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    if base is not None:
        doc = _deep_merge(config_to_dict(base), doc)
    doc = apply_overrides(doc, overrides)
    return _from_dict(TrainConfig, doc, "")


def ab_experiment_config() -> TrainConfig:
    """Small-subset overfitting setup: the regularizer A/B at desk scale.

    The model keeps depth 6 / width 64 but trims the state, expansion, and
    token count so the paired 50-epoch runs finish within a CPU lunch break.
    """
    return TrainConfig(
        epochs=50,
        batch_size=50,
        base_lr=1.5e-3,
        weight_decay=0.02,
        warmup_epochs=3,
        label_smoothing=0.0,
        drop_path_rate=0.0,
        augment=False,
        eval_ema=False,
        train_samples=5000,
        eval_samples=1000,
        model=VimConfig(depth=6, width=64, state_size=1, patch_size=8,
                        image_size=32, expand=1),
        slws=SlwsConfig(kind="linear", p_l=0.5, include_cls=True),
    )
