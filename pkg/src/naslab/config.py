"""Declarative experiment configuration.

Config files are flat key-value text with sections (INI grammar, parsed by
configparser). Every field has a default; the fully resolved config is
written next to the run outputs and reloads to an identical configuration.

Example::

    [network]
    variant = nasreg
    scale = 16

    [optimizer]
    learning_rate = 0.01
    batch_size = 32
    epochs = 30

    [dataset]
    kind = synthetic
    train_size = 5000

    [run]
    repeats = 3
    seed = 1234
    out = out/nasreg
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields

from .errors import ConfigurationError

VARIANTS = ("vanilla", "l1", "l2", "dropout", "batchnorm", "nasreg")
DATASET_KINDS = ("synthetic", "cifar10", "cifar100")

# Paper-protocol defaults: plain SGD at 0.01, batch 32, 3 repeats.
@dataclass
class ExperimentConfig:
    # [network]
    variant: str = "vanilla"
    scale: int = 1
    bias: bool = True
    l1_coefficient: float = 1e-4
    l2_coefficient: float = 1e-4
    dropout_conv: float = 0.3
    dropout_dense: float = 0.5
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    # [optimizer]
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 30
    # [dataset]
    kind: str = "synthetic"
    data_path: str = "data"
    train_size: int = 5000
    test_size: int = 1000
    classes: int = 10
    noise: float = 0.05
    jitter: float = 0.0
    label_noise: float = 0.0
    contaminate: bool = False
    contaminated_per_side: int = 500
    # [probe]
    probe_size: int = 64
    heatmap_index: int = 0
    heatmap_scale: int = 8
    stripe_cell_width: int = 4
    stripe_cell_height: int = 10
    # [run]
    repeats: int = 3
    seed: int = 1234
    out: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kind not in DATASET_KINDS:
            raise ConfigurationError(
                f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        for name, cond in [
            ("scale", self.scale >= 1),
            ("learning_rate", self.learning_rate > 0),
            ("batch_size", self.batch_size >= 1),
            ("epochs", self.epochs >= 0),
            ("train_size", self.train_size >= 1),
            ("test_size", self.test_size >= 1),
            ("classes", self.classes >= 2),
            ("probe_size", self.probe_size >= 1),
            ("repeats", self.repeats >= 1),
            ("l1_coefficient", self.l1_coefficient >= 0),
            ("l2_coefficient", self.l2_coefficient >= 0),
            ("heatmap_scale", self.heatmap_scale >= 1),
        ]:
            if not cond:
                raise ConfigurationError(f"invalid value for field {name!r}")
        if not 0.0 <= self.dropout_conv < 1.0 or not 0.0 <= self.dropout_dense < 1.0:
            raise ConfigurationError("dropout rates must be in [0, 1)")
        if not 0 <= self.heatmap_index < self.probe_size:
            raise ConfigurationError(
                f"heatmap_index {self.heatmap_index} outside probe set of {self.probe_size}")
        if min(w for w in self.widths()) < 2:
            raise ConfigurationError(
                f"scale {self.scale} shrinks a layer below 2 channels; "
                f"sparsity needs at least 2")

    def widths(self) -> tuple[int, int, int, int, int]:
        base = (256, 256, 512, 512, 1024)
        return tuple(w // self.scale for w in base)


_SECTIONS = {
    "network": ["variant", "scale", "bias", "l1_coefficient", "l2_coefficient",
                "dropout_conv", "dropout_dense", "bn_momentum", "bn_epsilon"],
    "optimizer": ["learning_rate", "batch_size", "epochs"],
    "dataset": ["kind", "data_path", "train_size", "test_size", "classes",
                "noise", "jitter", "label_noise", "contaminate",
                "contaminated_per_side"],
    "probe": ["probe_size", "heatmap_index", "heatmap_scale",
              "stripe_cell_width", "stripe_cell_height"],
    "run": ["repeats", "seed", "out"],
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"field {name!r}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"field {name!r}: {exc}") from None
    return raw


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise ConfigurationError(f"config file not found: {path}")
    values = {}
    known = {name: section for section, names in _SECTIONS.items() for name in names}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"{path}: unknown section [{section}]")
        for name, raw in parser.items(section):
            if name not in known or known[name] != section:
                raise ConfigurationError(f"{path}: unknown field {name!r} in [{section}]")
            values[name] = _parse_value(name, raw)
    return ExperimentConfig(**values)


def save_config(config: ExperimentConfig, path) -> None:
    """Write the fully resolved config; load_config returns an equal object."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w") as f:
        for section, names in _SECTIONS.items():
            f.write(f"[{section}]\n")
            for name in names:
                f.write(f"{name} = {fmt(getattr(config, name))}\n")
            f.write("\n")
