"""Flat key-value run configuration files.

INI-style sections (data, model, reducer, train, attack, eval) whose keys
mirror the typed config fields. Unknown sections or keys are rejected;
parse -> serialize -> parse is the identity. Every key has a documented
default, so an empty file is a valid config.
"""

import configparser
import io
from dataclasses import dataclass, field

from .attacks import AttackConfig
from .errors import ConfigError
from .losses import AdvLossMode, LossWeights, RecoverLossWeights
from .models import ClassifierSpec, GeneratorConfig
from .reducer import ReducerConfig
from .train import TrainConfig

# section -> key -> (type tag, default)
SCHEMA = {
    "data": {
        "root": ("str", "data/mnist"),
        "train_limit": ("int", 0),   # 0 means the full split
        "eval_limit": ("int", 0),
    },
    "model": {
        "arch": ("str", "lenet5"),
        "depth": ("int", 5),
        "num_classes": ("int", 10),
        "base_width": ("int", 16),
        "bottleneck_depth": ("int", 4),
        "recover_depth": ("int", 0),  # 0 means homologous (same as generator)
        "eps_max": ("float", 0.3),
    },
    "reducer": {
        "enabled": ("bool", True),
        "down": ("str", "conv"),
        "up": ("str", "avg"),
        "kernel": ("int", 2),
        "skip": ("bool", True),
    },
    "train": {
        "epochs": ("int", 150),
        "base_lr": ("float", 1e-3),
        "lr_decay": ("float", 0.1),
        "lr_decay_every": ("int", 50),
        "batch_size": ("int", 128),
        "seed": ("int", 0),
        "lambda1": ("float", 10.0),
        "lambda2": ("float", 1.0),
        "adv_mode": ("str", "cw_margin"),
        "kappa": ("float", 0.0),
        "target": ("int", -1),  # targeted_cross_entropy label; -1 = unset
        "alpha": ("float", 1.0),
        "beta": ("float", 0.0),
    },
    "attack": {
        "epsilon": ("float", 8.0 / 255.0),
        "steps": ("int", 1),
        "step_size": ("float", 0.0),
        "random_start": ("bool", False),
    },
    "eval": {
        "batch_size": ("int", 256),
        "transforms": ("str", "none,gaussian_blur,jpeg,center_crop,flip,resize"),
    },
}

_PARSERS = {
    "str": str,
    "int": int,
    "float": float,
    "bool": lambda s: {"true": True, "false": False}[s.lower()],
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in self.values.items():
            merged[section].update(keys)
        self.values = merged

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = value

    # ---- typed views -----------------------------------------------------

    def classifier_spec(self):
        return ClassifierSpec(arch=self.get("model", "arch"),
                              depth=self.get("model", "depth"),
                              num_classes=self.get("model", "num_classes"))

    def reducer_config(self):
        if not self.get("reducer", "enabled"):
            return None
        return ReducerConfig(down_method=self.get("reducer", "down"),
                             up_method=self.get("reducer", "up"),
                             kernel=self.get("reducer", "kernel"),
                             skip=self.get("reducer", "skip"))

    def generator_config(self):
        return GeneratorConfig(in_channels=1,
                               base_width=self.get("model", "base_width"),
                               bottleneck_depth=self.get("model", "bottleneck_depth"),
                               out_bound=self.get("model", "eps_max"))

    def adv_mode(self):
        target = self.get("train", "target")
        return AdvLossMode(kind=self.get("train", "adv_mode"),
                           kappa=self.get("train", "kappa"),
                           target=None if target < 0 else target)

    def train_config(self):
        t = self.values["train"]
        recover_depth = self.get("model", "recover_depth")
        return TrainConfig(
            epochs=t["epochs"], base_lr=t["base_lr"], lr_decay=t["lr_decay"],
            lr_decay_every=t["lr_decay_every"], batch_size=t["batch_size"],
            seed=t["seed"],
            loss_weights=LossWeights(t["lambda1"], t["lambda2"]),
            reducer=self.reducer_config(),
            adv_mode=self.adv_mode(),
            recover_weights=RecoverLossWeights(t["alpha"], t["beta"]),
            generator=self.generator_config(),
            recover_depth=recover_depth if recover_depth > 0 else None,
        )

    def attack_config(self):
        a = self.values["attack"]
        return AttackConfig(epsilon=a["epsilon"], steps=a["steps"],
                            step_size=a["step_size"],
                            random_start=a["random_start"])

    def transform_kinds(self):
        from .evaluate import TransformKind
        names = [s.strip() for s in self.get("eval", "transforms").split(",") if s.strip()]
        return [TransformKind(kind=n) for n in names]


def parse_run_config(text):
    """Parse config text, rejecting unknown sections/keys."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparseable config: {e}")
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            tag = SCHEMA[section][key][0]
            try:
                value = _PARSERS[tag](raw)
            except (KeyError, ValueError):
                raise ConfigError(f"bad {tag} value for [{section}] {key}: {raw!r}")
            values.setdefault(section, {})[key] = value
    return RunConfig(values)


def dump_run_config(cfg):
    """Serialize with every key explicit, in schema order."""
    out = io.StringIO()
    for section in SCHEMA:
        out.write(f"[{section}]\n")
        for key in SCHEMA[section]:
            value = cfg.get(section, key)
            if isinstance(value, bool):
                value = "true" if value else "false"
            out.write(f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()


def load_run_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_run_config(f.read())
