"""Experiment configuration: TOML in, validated objects out, lossless echo back to TOML."""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .domains import ToyWorld, decoder_from_dict
from .model import TrainConfig
from .sampler import SamplerConfig
from .schedule import Schedule


class ConfigError(ValueError):
    pass


ANALYSIS_DEFAULTS = {
    "delta": 0.1,
    "trials": 100,
    "field_error": 0.0,
    "encoder": "oracle",
    "delta_scale": 0.0,
    "n_list": [64, 128, 256, 512, 1024, 2048, 4096],
    "n_ref": 16384,
    "convergence_t_start": 0.9,
    "decoder": {"type": "identity"},
    "tasks": ["verify-bound"],
    "samples": 256,
}

MODEL_DEFAULTS = {"oracle": True, "checkpoint": "", "width": 128, "parameterization": "velocity"}

WORLD_DEFAULT = {
    "dim": 1,
    "map1": {"type": "affine", "angle": 0.0, "scale": [1.0], "shift": [0.0]},
    "map2": {"type": "affine", "angle": 0.0, "scale": [1.0], "shift": [0.0]},
    "prior": "gaussian", "prior_scale": 1.0, "mixture_offset": 2.0, "noise1": 0.0, "noise2": 0.0,
}

TOP_LEVEL = {"seed", "output_dir", "strict", "schedule", "world", "model", "train", "sampler", "analysis"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    strict: bool = True
    schedule: Schedule = dc_field(default_factory=Schedule.linear)
    world: ToyWorld = dc_field(default_factory=lambda: ToyWorld.from_dict(WORLD_DEFAULT))
    model: dict = dc_field(default_factory=lambda: dict(MODEL_DEFAULTS))
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    sampler: SamplerConfig = dc_field(default_factory=lambda: SamplerConfig(n_steps=1024, finalize="none"))
    analysis: dict = dc_field(default_factory=lambda: copy.deepcopy(ANALYSIS_DEFAULTS))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "output_dir": self.output_dir, "strict": self.strict,
            "schedule": self.schedule.to_dict(), "world": self.world.to_dict(),
            "model": dict(self.model), "train": self.train.to_dict(),
            "sampler": self.sampler.to_dict(), "analysis": copy.deepcopy(self.analysis),
        }

    def dumps(self) -> str:
        return tomli_w.dumps(_tomlable(self.to_dict()))

    @property
    def decoder(self):
        return decoder_from_dict(self.analysis.get("decoder"))


def _tomlable(obj):
    if isinstance(obj, dict):
        return {k: _tomlable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tomlable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def _line_of(text: Optional[str], key: str) -> str:
    if not text:
        return ""
    leaf = key.split(".")[-1]
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*{re.escape(leaf)}\s*=", line):
            return f" (line {i})"
    return ""


def _section(d, name, text, builder):
    try:
        return builder(d)
    except (ValueError, TypeError, KeyError) as exc:
        key = name
        msg = str(exc)
        for k, v in (d or {}).items():
            if k in msg or (isinstance(v, str) and repr(v) in msg):
                key = f"{name}.{k}"
                break
        raise ConfigError(f"invalid field '{key}'{_line_of(text, key)}: {exc}") from exc


def from_dict(d: dict, text: Optional[str] = None) -> ExperimentConfig:
    unknown = sorted(set(d) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level field '{unknown[0]}'{_line_of(text, unknown[0])}")
    cfg = ExperimentConfig()
    try:
        cfg.seed = int(d.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid field 'seed'{_line_of(text, 'seed')}: {exc}") from exc
    cfg.output_dir = str(d.get("output_dir", "out"))
    cfg.strict = bool(d.get("strict", True))
    cfg.schedule = _section(d.get("schedule", {}), "schedule", text, Schedule.from_dict)
    world = {**copy.deepcopy(WORLD_DEFAULT), **d.get("world", {})}
    if "world" in d and "dim" in d["world"]:
        dim = int(d["world"]["dim"])
        for m in ("map1", "map2"):
            if m not in d["world"]:
                world[m] = {"type": "affine", "angle": 0.0, "scale": [1.0] * dim, "shift": [0.0] * dim}
    cfg.world = _section(world, "world", text, ToyWorld.from_dict)
    model = {**MODEL_DEFAULTS, **d.get("model", {})}
    bad = sorted(set(model) - set(MODEL_DEFAULTS))
    if bad:
        raise ConfigError(f"unknown field 'model.{bad[0]}'{_line_of(text, bad[0])}")
    cfg.model = model
    train = {"seed": cfg.seed, **d.get("train", {})}
    cfg.train = _section(train, "train", text, TrainConfig.from_dict)
    sampler = {"n_steps": 1024, "finalize": "none", "seed": cfg.seed, **d.get("sampler", {})}
    cfg.sampler = _section(sampler, "sampler", text, SamplerConfig.from_dict)
    analysis = {**copy.deepcopy(ANALYSIS_DEFAULTS), **d.get("analysis", {})}
    bad = sorted(set(analysis) - set(ANALYSIS_DEFAULTS))
    if bad:
        raise ConfigError(f"unknown field 'analysis.{bad[0]}'{_line_of(text, bad[0])}")
    if not 0 < float(analysis["delta"]) < 1:
        raise ConfigError(f"invalid field 'analysis.delta'{_line_of(text, 'delta')}: must lie in (0, 1)")
    if analysis["encoder"] not in ("oracle", "perturbed"):
        raise ConfigError(f"invalid field 'analysis.encoder'{_line_of(text, 'encoder')}: "
                          f"expected 'oracle' or 'perturbed'")
    _section(analysis["decoder"], "analysis.decoder", text, decoder_from_dict)
    cfg.analysis = analysis
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return from_dict(d, text)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())
