"""Experiment configuration: flat ``section.key = value`` text files.

Unknown keys are errors. ``dumps(loads(text))`` is a fixed point.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec, base_task_spec
from .model import NetworkConfig
from .saliency import SALIENCY_METHODS
from .train import Hyperparams

SALIENCY_SOURCES = ("none", *SALIENCY_METHODS, "files", "import")


class ConfigFileError(ValueError):
    pass


@dataclass
class DataSection:
    num_classes: int = 20
    samples_per_class: int = 40
    height: int = 64
    width: int = 64
    subtlety: float = 0.35
    clutter: float = 0.3
    seed: int = 0
    families: int = 4
    folder: str = ""

    def spec(self) -> DatasetSpec:
        return DatasetSpec(self.num_classes, self.samples_per_class, self.height, self.width,
                           self.subtlety, self.clutter, self.seed, self.families)


@dataclass
class NetSection:
    variant: str = "delayed_fusion"
    fusion_level: int = 2
    saliency_depth: int = 2
    saliency_width: float = 1.0
    skip: bool = True
    pool_position: str = "after_fusion"
    init: str = "none"
    freeze_saliency: bool = False


@dataclass
class TrainSection:
    epochs: int = 40
    lr: float = 0.01
    weight_decay: float = 0.003
    momentum: float = 0.9
    batch_size: int = 16

    def hyper(self) -> Hyperparams:
        return Hyperparams(self.epochs, self.lr, self.weight_decay, self.momentum, self.batch_size)


@dataclass
class PretrainSection:
    epochs: int = 15
    lr: float = 0.01
    weight_decay: float = 0.003
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    num_classes: int = 50
    samples_per_class: int = 100
    families: int = 10

    def hyper(self) -> Hyperparams:
        return Hyperparams(self.epochs, self.lr, self.weight_decay, self.momentum, self.batch_size)


@dataclass
class SaliencySection:
    method: str = "none"
    quality: float = 1.0
    folder: str = ""
    sigma_fraction: float = 0.25
    n_thresholds: int = 32
    seed: int = 0


@dataclass
class ProtocolSection:
    k_list: str = "1,2,3,5,10,15,20,25,30,K"
    seeds: int = 5
    name: str = ""

    def ks(self) -> list:
        out = []
        for part in self.k_list.split(","):
            part = part.strip()
            if part == "K":
                out.append("K")
            else:
                try:
                    k = int(part)
                except ValueError:
                    raise ConfigFileError(f"protocol.k_list: bad entry {part!r}") from None
                if k < 1:
                    raise ConfigFileError("protocol.k_list entries must be >= 1")
                out.append(k)
        if not out:
            raise ConfigFileError("protocol.k_list is empty")
        return out


@dataclass
class OutputSection:
    dir: str = "out"


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    saliency: SaliencySection = field(default_factory=SaliencySection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data.folder) if self.data.folder else self.output_dir / "dataset"

    def network(self, num_classes: int | None = None) -> NetworkConfig:
        n = self.net
        pool = n.pool_position if n.variant == "delayed_fusion" else None
        return NetworkConfig(
            variant=n.variant, fusion_level=n.fusion_level, saliency_depth=n.saliency_depth,
            saliency_width=n.saliency_width, skip=n.skip, pool_position=pool,
            num_classes=num_classes or self.data.num_classes,
            height=self.data.height, width=self.data.width, init=n.init,
            freeze_saliency=n.freeze_saliency,
        )

    def base_spec(self) -> DatasetSpec:
        p = self.pretrain
        return base_task_spec(self.data.spec(), p.num_classes, p.samples_per_class, p.families)

    def validate(self, need_dataset: bool = False) -> None:
        if not self.data.folder:
            self.data.spec().validate()
        elif not (Path(self.data.folder) / "index.csv").exists():
            raise ConfigFileError(f"data.folder: no index.csv under {self.data.folder}")
        self.network().validate()
        self.train.hyper().validate()
        self.pretrain.hyper().validate()
        self.protocol.ks()
        if self.protocol.seeds < 1:
            raise ConfigFileError("protocol.seeds must be >= 1")
        s = self.saliency
        if s.method not in SALIENCY_SOURCES:
            raise ConfigFileError(f"saliency.method must be one of {SALIENCY_SOURCES}, got {s.method!r}")
        if not 0.0 <= s.quality <= 1.0:
            raise ConfigFileError("saliency.quality must lie in [0,1]")
        if s.method == "import":
            if not s.folder:
                raise ConfigFileError("saliency.method=import needs saliency.folder")
            if not Path(s.folder).is_dir():
                raise ConfigFileError(f"saliency.folder does not exist: {s.folder}")
        elif s.folder:
            raise ConfigFileError("saliency.folder is only valid with saliency.method=import")
        if self.net.variant != "baseline_rgb" and s.method == "none":
            raise ConfigFileError(f"net.variant={self.net.variant} requires a saliency source (saliency.method)")
        if need_dataset and not (self.dataset_dir / "index.csv").exists():
            raise ConfigFileError(f"no dataset at {self.dataset_dir}; run gen-data first")


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(text: str, kind, key: str):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigFileError(f"{key}: expected a boolean, got {text!r}")
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigFileError(f"{key}: expected an integer, got {text!r}") from None
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigFileError(f"{key}: expected a number, got {text!r}") from None
    return text


def loads(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigFileError(f"line {line_no}: unknown key {key!r}")
        target = getattr(cfg, section)
        hints = typing.get_type_hints(type(target))
        if name not in hints:
            raise ConfigFileError(f"line {line_no}: unknown key {key!r}")
        setattr(target, name, _coerce(value, hints[name], key))
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file not found: {path}")
    return loads(path.read_text())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
