"""Experiment configuration: a sectioned INI file mapped onto dataclasses.

Every key is typed by its default value.  Unknown sections or keys are
errors, and all problems are reported together with ``section.key`` paths
before any compute starts.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources

from .aggregation import RULES, AggregatorConfig
from .dopa import FusionConfig
from .model import ARCHITECTURES


class ConfigError(ValueError):
    """Collected validation problems, one ``section.key: message`` per line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class ExperimentSection:
    name: str = "experiment"
    seed: int = 20


@dataclass
class DatasetSection:
    source: str = "synthetic"  # or "file"
    classes: int = 10
    height: int = 16
    width: int = 16
    channels: int = 1
    per_class: int = 400
    test_per_class: int = 50
    noise: float = 0.15
    train_path: str = ""
    test_path: str = ""


@dataclass
class ModelSection:
    arch: str = "mlp"
    hidden: int = 64


@dataclass
class PartitionSection:
    alpha: float = 0.9
    clients: int = 20


@dataclass
class FederationSection:
    fraction: float = 0.1
    pretrain_rounds: int = 30
    attack_rounds: int = 30
    persistence_rounds: int = 40
    malicious_ids: tuple = (0,)
    benign_epochs: int = 2
    malicious_epochs: int = 5
    lr: float = 0.1
    batch_size: int = 32
    poison_fraction: float = 0.3
    root_size: int = 100
    validation_fraction: float = 0.05

    @property
    def rounds(self):
        return self.pretrain_rounds + self.attack_rounds + self.persistence_rounds

    @property
    def window(self):
        return self.pretrain_rounds, self.pretrain_rounds + self.attack_rounds


@dataclass
class AttackSection:
    enabled: bool = True
    mode: str = "dopa"  # "naive" keeps the fixed initial patch
    target: int = 0
    patch: str = "auto"  # side length, or "auto" to scale with the image
    init_fill: float = 0.5
    K: int = 3
    eta0: float = 0.0  # 0 means "use the federation lr"
    beta: float = 0.2
    eta_delta: float = 0.5
    lam: float = 1.0
    e_sim: int = 1
    e_delta: int = 50
    path_fraction: float = 0.5
    sub_fraction: float = 0.25
    batch_size: int = 32


@dataclass
class OutputsSection:
    dir: str = "runs/experiment"
    checkpoint: bool = True
    trigger: bool = True
    timing: bool = False
    benign_baseline: bool = True


AGG_FIELDS = tuple(f for f in AggregatorConfig.__dataclass_fields__ if f != "seed")


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    federation: FederationSection = field(default_factory=FederationSection)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    outputs: OutputsSection = field(default_factory=OutputsSection)

    @property
    def seed(self):
        return self.experiment.seed

    def replace(self, **changes):
        """Copy with ``{"section.key": value}``-style overrides applied."""
        cfg = dataclasses.replace(self, **{s.name: dataclasses.replace(getattr(self, s.name))
                                           for s in dataclasses.fields(self)})
        for path, value in changes.items():
            section, key = path.split(".")
            sec = getattr(cfg, section)
            if key not in _section_keys(section, sec):
                raise ConfigError([f"{path}: unknown key"])
            object.__setattr__(sec, key, value)
        return cfg


SECTIONS = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def _section_keys(name, sec):
    keys = [f.name for f in dataclasses.fields(sec)]
    if name == "aggregator":
        keys = list(AGG_FIELDS)
    return keys


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(",") if v.strip())
    return text


def render(cfg):
    """INI text for ``cfg``; :func:`parse_text` inverts it exactly."""
    lines = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        lines.append(f"[{name}]")
        for key in _section_keys(name, sec):
            lines.append(f"{key} = {_format(getattr(sec, key))}")
        lines.append("")
    return "\n".join(lines)


def parse_text(text, base_dir="."):
    """Parse INI text into a validated :class:`ExperimentConfig`."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc

    problems = []
    values = {}
    for name in parser.sections():
        if name not in SECTIONS:
            problems.append(f"{name}: unknown section")
            continue
        defaults = getattr(ExperimentConfig(), name)
        allowed = _section_keys(name, defaults)
        values[name] = {}
        for key, raw in parser.items(name):
            if key not in allowed:
                problems.append(f"{name}.{key}: unknown key")
                continue
            try:
                values[name][key] = _parse(raw, getattr(defaults, key))
            except ValueError as exc:
                problems.append(f"{name}.{key}: {exc}")
    if problems:
        raise ConfigError(problems)

    sections = {}
    for name in SECTIONS:
        cls = type(getattr(ExperimentConfig(), name))
        try:
            sections[name] = cls(**values.get(name, {}))
        except ValueError as exc:
            problems.extend(f"{name}.{p.strip()}" for p in str(exc).split(";"))
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**sections)
    validate(cfg, base_dir)
    return cfg


def _resolve(path, base_dir):
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def patch_side(cfg):
    from .datasets import default_patch_size

    if cfg.attack.patch == "auto":
        return default_patch_size(min(cfg.dataset.height, cfg.dataset.width))
    return int(cfg.attack.patch)


def validate(cfg, base_dir="."):
    """Cross-field checks; raises :class:`ConfigError` listing every problem."""
    p = []
    ds, fed, atk = cfg.dataset, cfg.federation, cfg.attack
    if cfg.experiment.seed < 0:
        p.append("experiment.seed: must be >= 0")
    if ds.source not in ("synthetic", "file"):
        p.append("dataset.source: must be 'synthetic' or 'file'")
    if ds.source == "file":
        for key in ("train_path", "test_path"):
            path = getattr(ds, key)
            if not path:
                p.append(f"dataset.{key}: required when source = file")
            elif not os.path.isfile(_resolve(path, base_dir)):
                p.append(f"dataset.{key}: file not found: {path}")
    else:
        if ds.classes < 2:
            p.append("dataset.classes: must be >= 2")
        if min(ds.height, ds.width) < 8 or ds.channels < 1:
            p.append("dataset.height/width: must be >= 8 (channels >= 1)")
        if ds.per_class < 1 or ds.test_per_class < 1:
            p.append("dataset.per_class/test_per_class: must be >= 1")
        if ds.noise < 0:
            p.append("dataset.noise: must be >= 0")
    if cfg.model.arch not in ARCHITECTURES:
        p.append(f"model.arch: expected one of {', '.join(ARCHITECTURES)}")
    if cfg.model.hidden < 1:
        p.append("model.hidden: must be >= 1")
    if not cfg.partition.alpha > 0:
        p.append("partition.alpha: must be > 0")
    if cfg.partition.clients < 1:
        p.append("partition.clients: must be >= 1")
    if not 0 < fed.fraction <= 1:
        p.append("federation.fraction: must be in (0, 1]")
    for key in ("pretrain_rounds", "attack_rounds", "persistence_rounds", "benign_epochs",
                "malicious_epochs", "root_size"):
        if getattr(fed, key) < 0:
            p.append(f"federation.{key}: must be >= 0")
    if fed.lr <= 0 or fed.batch_size < 1:
        p.append("federation.lr/batch_size: lr must be > 0 and batch_size >= 1")
    if not 0 <= fed.poison_fraction <= 1:
        p.append("federation.poison_fraction: must be in [0, 1]")
    if not 0 < fed.validation_fraction <= 1:
        p.append("federation.validation_fraction: must be in (0, 1]")
    if any(not 0 <= i < cfg.partition.clients for i in fed.malicious_ids):
        p.append("federation.malicious_ids: every id must be below partition.clients")
    if cfg.aggregator.rule not in RULES:
        p.append(f"aggregator.rule: unknown tag {cfg.aggregator.rule!r}")
    else:
        from math import ceil

        per_round = max(1, ceil(fed.fraction * cfg.partition.clients - 1e-9))
        need = cfg.aggregator.min_clients()
        if per_round < need:
            what = "2f+3" if cfg.aggregator.rule == "krum" else "zeno_b+1"
            p.append(f"aggregator.{'f' if cfg.aggregator.rule == 'krum' else 'zeno_b'}: "
                     f"{cfg.aggregator.rule} needs {what} = {need} updates per round, "
                     f"but fraction * clients samples only {per_round}")
    if atk.mode not in ("dopa", "naive"):
        p.append("attack.mode: must be 'dopa' or 'naive'")
    if ds.source == "synthetic" and not 0 <= atk.target < ds.classes:
        p.append(f"attack.target: must be a class in [0, {ds.classes})")
    if atk.patch != "auto":
        try:
            side = int(atk.patch)
        except ValueError:
            p.append("attack.patch: must be an integer or 'auto'")
        else:
            if side < 0 or side > min(ds.height, ds.width):
                p.append("attack.patch: must fit inside the image")
    if not 0 <= atk.init_fill <= 1:
        p.append("attack.init_fill: must be in [0, 1]")
    try:
        dopa_config(cfg)
    except ValueError as exc:
        p.extend(f"attack.{s.strip()}" for s in str(exc).split(";"))
    if p:
        raise ConfigError(p)


def dopa_config(cfg):
    from .dopa import DopaConfig

    a = cfg.attack
    return DopaConfig(K=a.K, eta0=a.eta0 if a.eta0 > 0 else cfg.federation.lr, beta=a.beta,
                      eta_delta=a.eta_delta, lam=a.lam, e_sim=a.e_sim, e_delta=a.e_delta,
                      path_fraction=a.path_fraction, sub_fraction=a.sub_fraction,
                      batch_size=a.batch_size, fusion=dataclasses.replace(cfg.fusion))


def preset_path(name):
    return str(resources.files("fedforge").joinpath("presets", f"{name}.cfg"))


def load(path):
    """Read a config file.  A bare preset name (``paper-toy``) is also accepted."""
    if not os.path.exists(path):
        candidate = preset_path(path[:-4] if path.endswith(".cfg") else path)
        if os.path.isfile(candidate):
            path = candidate
        else:
            raise ConfigError([f"config: file not found: {path}"])
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))
