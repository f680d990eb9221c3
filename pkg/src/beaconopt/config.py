"""Experiment configuration files, dotted-path overrides and bundled presets."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .environment import PropagationParams
from .evaluation import EvalConfig
from .geometry import MapSpec, load_map
from .net import NetConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "BEACONOPT_OUTPUT_ROOT"
PRESETS = ("paper_default", "desk_small", "low_attenuation", "high_noise", "c4", "c16")


class ConfigError(ValueError):
    pass


def preset_path(name: str) -> Path:
    return Path(str(resources.files("beaconopt") / "presets" / f"{name}.json"))


def bundled_map_path(name: str) -> Path:
    return Path(str(resources.files("beaconopt") / "maps" / name))


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        key, value = parse_override(item) if isinstance(item, str) else item
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node[parts[-1]] = value
    return doc


@dataclass
class ExperimentConfig:
    run_name: str
    map_path: Path
    map: MapSpec
    channels: int
    propagation: PropagationParams
    net: NetConfig
    train: TrainConfig
    eval: EvalConfig
    knn: dict
    output_dir: Path
    raw: dict

    @property
    def run_dir(self) -> Path:
        return self.output_dir / self.run_name


def _resolve_map(ref: str, base: Path) -> Path:
    p = Path(ref)
    for cand in (p, base / p, bundled_map_path(p.name)):
        if cand.is_file():
            return cand
    raise ConfigError(f"map file not found: {ref}")


def load_config(path_or_preset, overrides=None, seed: int | None = None) -> ExperimentConfig:
    path = Path(path_or_preset)
    if not path.is_file():
        if str(path_or_preset) in PRESETS:
            path = preset_path(str(path_or_preset))
        else:
            raise ConfigError(f"config file not found: {path_or_preset}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc.setdefault("train", {})["seed"] = seed
    return build_config(doc, path.parent)


def build_config(doc: dict, base: Path = Path(".")) -> ExperimentConfig:
    try:
        map_path = _resolve_map(doc["map"], base)
        spec = load_map(map_path)
        C = int(doc.get("channels", 8))
        netdoc = dict(doc.get("net", {}))
        netdoc["input_dim"] = C
        out_root = os.environ.get(OUTPUT_ROOT_ENV) or doc.get("output_dir", "runs")
        return ExperimentConfig(
            run_name=doc.get("run_name", path_stem(map_path)),
            map_path=map_path,
            map=spec,
            channels=C,
            propagation=PropagationParams.from_dict(doc.get("propagation", {})),
            net=NetConfig(**netdoc),
            train=TrainConfig.from_dict(doc.get("train", {})),
            eval=EvalConfig(**doc.get("eval", {})),
            knn={"rows": 35, "cols": 50, "ks": [1, 5, 10, 20], "seed": 1, **doc.get("knn", {})},
            output_dir=Path(out_root),
            raw=doc,
        )
    except KeyError as exc:
        raise ConfigError(f"missing required config field {exc.args[0]!r}") from None
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def path_stem(p: Path) -> str:
    return Path(p).stem
