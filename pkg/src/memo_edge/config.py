"""INI-style run configuration with typed, documented defaults.

Every key has a default; unknown sections or keys are rejected so typos
surface immediately instead of silently falling back to defaults.  Seeds are
not part of the file: callers pass them explicitly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Any, Callable

from .inference import InferenceConfig
from .model import ModelConfig
from .synthdata import SceneConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


def _opt(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)

    return inner


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _str(text: str) -> str:
    return text.strip()


# section -> key -> (parser, default text, help)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str, str]]] = {
    "model": {
        "channels": (_ints, "16,32,64,128", "channel count per encoder level"),
        "groups": (int, "8", "GroupNorm groups"),
        "pe_dim": (int, "32", "mask-ratio embedding width"),
    },
    "train": {
        "batch_size": (int, "16", "samples per step"),
        "learning_rate": (float, "5e-5", "AdamW step size for pre-training"),
        "finetune_learning_rate": (float, "2e-5", "AdamW step size when training adapters"),
        "epochs": (int, "1", "passes over the data"),
        "max_steps": (_opt(int), "none", "stop after this many steps"),
        "time_budget": (_opt(float), "none", "stop after this many seconds"),
        "condition_drop_prob": (float, "0.1", "probability of training a sample on the zero image"),
        "loss_normalization": (_str, "ratio", "ratio: 1/(r*H*W); masked_mean: 1/#masked"),
        "weight_decay": (float, "0.01", "decoupled weight decay"),
        "augment": (_bool, "true", "random flips and 90 degree rotations"),
        "lora_rank": (int, "4", "adapter rank in fine-tune mode"),
        "lora_alpha": (_opt(float), "none", "adapter scaling numerator (default: rank)"),
    },
    "infer": {
        "steps": (_opt(int), "10", "unmasking iterations; none runs to completion"),
        "strategy": (_str, "locmax", "locmax, random or topk"),
        "scale": (float, "1.0", "granularity (guidance) scale"),
        "fraction": (_opt(float), "none", "per-step share of pixels for random/topk (default 1/steps)"),
    },
    "eval": {
        "protocol": (_str, "ceval", "ceval or seval"),
        "thresholds": (int, "33", "number of evenly spaced thresholds"),
        "tolerance": (_opt(float), "none", "match distance in pixels (default 0.75% of the diagonal)"),
        "scales": (_opt(_floats), "none", "scales for multi-granularity evaluation"),
    },
    "data": {
        "height": (int, "64", "image height"),
        "width": (int, "64", "image width"),
        "min_shapes": (int, "2", "fewest shapes per scene"),
        "max_shapes": (int, "5", "most shapes per scene"),
        "shape_weights": (_floats, "1,1,1", "relative frequency of ellipse, polygon, rectangle"),
        "min_radius": (float, "4", "smallest shape half-extent"),
        "max_radius": (float, "16", "largest shape half-extent"),
        "min_gap": (_opt(int), "2", "minimum pixel gap between shapes; none allows overlap"),
        "background_gradient": (_bool, "true", "smooth background gradient"),
        "noise_sigma": (float, "0.02", "Gaussian image noise"),
        "blur_sigma": (float, "0.5", "Gaussian image blur"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        for section, keys in SCHEMA.items():
            sec = self.values.setdefault(section, {})
            for key, (parse, default, _) in keys.items():
                sec.setdefault(key, parse(default))

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def model_config(self, seed: int = 0) -> ModelConfig:
        m = self["model"]
        return ModelConfig(channels=m["channels"], groups=m["groups"], pe_dim=m["pe_dim"], seed=seed)

    def training_config(self, finetune: bool = False, seed: int = 0) -> TrainingConfig:
        t = self["train"]
        return TrainingConfig(
            batch_size=t["batch_size"],
            learning_rate=t["finetune_learning_rate"] if finetune else t["learning_rate"],
            epochs=t["epochs"],
            max_steps=t["max_steps"],
            time_budget=t["time_budget"],
            condition_drop_prob=t["condition_drop_prob"],
            loss_normalization=t["loss_normalization"],
            weight_decay=t["weight_decay"],
            augment=t["augment"],
            seed=seed,
        )

    def inference_config(self, seed: int = 0) -> InferenceConfig:
        i = self["infer"]
        return InferenceConfig(steps=i["steps"], strategy=i["strategy"], scale=i["scale"], fraction=i["fraction"], seed=seed)

    def scene_config(self, seed: int = 0) -> SceneConfig:
        d = dict(self["data"])
        d["shape_weights"] = tuple(d["shape_weights"])
        return SceneConfig(**d, seed=seed)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {sorted(SCHEMA)}")
        out = values.setdefault(section, {})
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]; known keys: {sorted(SCHEMA[section])}")
            try:
                out[key] = SCHEMA[section][key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {raw!r} ({exc})") from exc
    return RunConfig(values)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def default_config_text() -> str:
    """Every section and key with its default and a one-line description."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default, doc) in keys.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)
