"""Run configuration: an INI-style ``key = value`` file with four sections.

::

    [arch]    image_size, in_channels, base_channels, depth, latent_dim,
              branch_enabled, branch_channels
    [train]   epochs_stage1, epochs_stage2, batch_size, lr, seed, alpha1, alpha2
    [data]    n_id, n_id_test, n_intra, n_inter_1, n_inter_2, n_inter_3,
              lesion_size, lesion_intensity, noise_std, seed
    [eval]    bootstrap_rounds, score_mode, seed

Keys missing from the file are taken from the named preset; unknown
sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace

from .data import SynthSpec
from .errors import ConfigError
from .models import PRESETS, ArchConfig
from .training import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    bootstrap_rounds: int = 10
    score_mode: str = "dataset"
    seed: int = 0

    def __post_init__(self):
        if self.bootstrap_rounds < 1:
            raise ConfigError("bootstrap_rounds must be >= 1")
        if self.score_mode not in ("dataset", "calibrated"):
            raise ConfigError(f"score_mode must be dataset or calibrated, got {self.score_mode!r}")


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig
    train: TrainConfig
    data: SynthSpec
    eval: EvalConfig

    def to_dict(self):
        return {s: dataclasses.asdict(getattr(self, s)) for s in ("arch", "train", "data", "eval")}

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed):
        return replace(self, train=replace(self.train, seed=seed), data=replace(self.data, seed=seed),
                       eval=replace(self.eval, seed=seed))


RUN_PRESETS = {
    "desk": RunConfig(PRESETS["desk"], TrainConfig(), SynthSpec(image_size=64), EvalConfig()),
    "paper": RunConfig(
        PRESETS["paper"],
        TrainConfig(epochs_stage1=100, epochs_stage2=100),
        SynthSpec(image_size=256, lesion_size=56),
        EvalConfig(),
    ),
}


def _coerce(raw, default, key):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_run_config(text, preset="desk"):
    if preset not in RUN_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(RUN_PRESETS)}")
    base = RUN_PRESETS[preset]
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    sections = {}
    for name in parser.sections():
        if name not in ("arch", "train", "data", "eval"):
            raise ConfigError(f"unknown config section [{name}]")
        current = getattr(base, name)
        fields = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
        updates = {}
        for key, raw in parser.items(name):
            if key not in fields or (name == "data" and key == "image_size"):
                raise ConfigError(f"unknown key {key!r} in section [{name}]")
            updates[key] = _coerce(raw, fields[key], f"{name}.{key}")
        sections[name] = replace(current, **updates)
    cfg = replace(base, **sections)
    if cfg.data.image_size != cfg.arch.image_size:
        cfg = replace(cfg, data=replace(cfg.data, image_size=cfg.arch.image_size))
    return cfg


def load_run_config(path=None, preset="desk", seed=None):
    text = ""
    if path is not None:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    cfg = parse_run_config(text, preset)
    return cfg if seed is None else cfg.with_seed(seed)


def dump_run_config(cfg):
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in values.items()
                  if not (section == "data" and k == "image_size")]
        lines.append("")
    return "\n".join(lines)
