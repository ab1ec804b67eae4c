"""Run configuration: one JSON file describing a full experiment.

A RunConfig nests the generator, tokenizer, encoder and training configs
plus the data split and output locations. Parsing is strict: a key that
no dataclass declares is an error, not a silent default, and every
command writes the fully resolved config next to its outputs so any run
can be reproduced from that file and its seed alone.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from . import numkit as nk
from .model import EncoderConfig
from .synthgen import GenConfig
from .tokenizer import Tokenizer
from .training import TrainConfig


@dataclass
class TokenizerConfig:
    patch_sizes: dict = field(default_factory=lambda: {"spikes": 16, "lfp": 8, "mm": 24})
    k_max: int = 5
    lfp_embed: str = "linear"
    conv_kernel: int = 3
    conv_dilations: tuple = (1, 2, 4)

    def build(self, d, init_seed=0):
        return Tokenizer(
            d=d,
            patch_sizes=dict(self.patch_sizes),
            k_max=self.k_max,
            lfp_embed=self.lfp_embed,
            conv_kernel=self.conv_kernel,
            conv_dilations=tuple(self.conv_dilations),
            init_seed=init_seed,
        )


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=lambda: GenConfig(n_sessions=10))
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split_seed: int = 0
    train_frac: float = 0.8
    sessions: list | None = None  # session ids a command acts on; None = all
    data_dir: str = "data"
    out_dir: str = "out"

    def validate(self):
        self.gen.validate()
        self.train.validate()
        if not (0.0 < self.train_frac < 1.0):
            raise ValueError("train_frac must lie in (0, 1)")
        return self


def _from_mapping(cls, data, where):
    if not isinstance(data, dict):
        raise ValueError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown keys in {where}: {unknown}")
    return cls(**data)


_TUPLE_KEYS = {
    "gen": ("n_neurons_range", "n_lfp_range", "rhythm_freq_range"),
    "tokenizer": ("conv_dilations",),
}


def from_dict(data):
    """Strict dict -> RunConfig; rejects any unrecognized key at any level."""
    if not isinstance(data, dict):
        raise ValueError("run config must be a mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ValueError(f"unknown keys in run config: {unknown}")
    kwargs = {}
    for key, val in data.items():
        if key == "gen":
            val = dict(val)
            for tk in _TUPLE_KEYS["gen"]:
                if tk in val:
                    val[tk] = tuple(val[tk])
            kwargs[key] = _from_mapping(GenConfig, val, "gen")
        elif key == "tokenizer":
            val = dict(val)
            if "conv_dilations" in val:
                val["conv_dilations"] = tuple(val["conv_dilations"])
            kwargs[key] = _from_mapping(TokenizerConfig, val, "tokenizer")
        elif key == "encoder":
            kwargs[key] = _from_mapping(EncoderConfig, val, "encoder")
        elif key == "train":
            val = dict(val)
            if isinstance(val.get("schedule"), dict):
                val["schedule"] = _from_mapping(nk.Schedule, val["schedule"], "train.schedule")
            kwargs[key] = _from_mapping(TrainConfig, val, "train")
        else:
            kwargs[key] = val
    return RunConfig(**kwargs).validate()


def to_dict(cfg):
    out = dataclasses.asdict(cfg)
    # JSON has no tuples; normalize to lists for stable round-trips
    out["gen"]["n_neurons_range"] = list(out["gen"]["n_neurons_range"])
    out["gen"]["n_lfp_range"] = list(out["gen"]["n_lfp_range"])
    out["gen"]["rhythm_freq_range"] = list(out["gen"]["rhythm_freq_range"])
    out["tokenizer"]["conv_dilations"] = list(out["tokenizer"]["conv_dilations"])
    return out


def load(path):
    with open(path) as f:
        return from_dict(json.load(f))


def save(path, cfg):
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def write_resolved(out_dir, cfg):
    """Every command drops the config it actually ran with beside its outputs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    save(path, cfg)
    return path
