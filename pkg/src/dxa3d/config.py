"""Experiment configuration: nested dataclasses read from an INI-style file.

Each section maps onto one dataclass; values are plain ``key = value`` with
tuples written space-separated::

    [dataset]
    n_samples = 100
    [train]
    epochs = 60
    lr = 1e-3
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .phantom import VOXEL_SIZE_MM, PhantomRanges, RenderConfig
from .regressor import ModelConfig, TrainConfig
from .registration import IOU_THRESHOLD


@dataclass
class DatasetConfig:
    n_samples: int = 100
    seed: int = 0


@dataclass
class SplitConfig:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    scoliosis_fraction: float = 0.2

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")
        if not 0.0 <= self.scoliosis_fraction <= 1.0:
            raise ValueError("scoliosis_fraction must lie in [0, 1]")


@dataclass
class AlignConfig:
    iou_threshold: float = IOU_THRESHOLD
    max_theta: float = 2.0       # degrees
    max_shift: float = 10.0      # pixels
    bend_fraction: float = 0.0   # share of pairs that also get a non-rigid bend
    bend_amplitude: float = 0.0  # pixels at mid-spine


@dataclass
class EvalConfig:
    voxel_size_mm: float = VOXEL_SIZE_MM
    figures: int = 4  # number of test samples drawn as SVG overlays


@dataclass
class RunConfig:
    name: str = "default"
    folds: int = 0                # 0: single train/val run; k: k-fold CV
    sweep_sizes: tuple = ()       # training-set sizes for the size sweep


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    ranges: PhantomRanges = field(default_factory=PhantomRanges)
    render: RenderConfig = field(default_factory=RenderConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)
    output_dir: str = "out"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """One top-level seed drives data, perturbations and training."""
        return replace(
            self,
            dataset=replace(self.dataset, seed=seed),
            train=replace(self.train, seed=seed),
        )


SECTIONS = ("dataset", "ranges", "render", "split", "align", "model", "train", "eval", "run")


def _convert(raw: str, default):
    if isinstance(default, bool):
        v = raw.strip().lower()
        if v not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return v in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = raw.replace(",", " ").split()
        if default and all(isinstance(d, int) for d in default):
            return tuple(int(a) for a in items)
        if not default and items and all(a.lstrip("-").isdigit() for a in items):
            return tuple(int(a) for a in items)
        return tuple(float(a) for a in items)
    return raw.strip()


def _update(obj, section: dict, name: str):
    known = {f.name: f for f in fields(obj)}
    kw = {}
    for key, raw in section.items():
        if key not in known:
            raise KeyError(f"unknown key [{name}] {key}")
        kw[key] = _convert(raw, getattr(obj, key))
    return replace(obj, **kw)


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser()
    if text is not None:
        parser.read_string(text)
    else:
        if not Path(path).exists():
            raise FileNotFoundError(path)
        parser.read(path)
    for name in parser.sections():
        if name == "output":
            cfg = replace(cfg, output_dir=parser[name].get("dir", cfg.output_dir))
            continue
        if name not in SECTIONS:
            raise KeyError(f"unknown section [{name}]")
        cfg = replace(cfg, **{name: _update(getattr(cfg, name), dict(parser[name]), name)})
    return cfg


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = " ".join(str(a) for a in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    lines += ["[output]", f"dir = {cfg.output_dir}", ""]
    return "\n".join(lines)
