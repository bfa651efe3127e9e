"""Experiment configuration: one JSON document describing a full run.

Only the three path entries may be overridden from the environment
(``RNNT_ILM_DATA_DIR``, ``RNNT_ILM_MODEL_DIR``, ``RNNT_ILM_OUT_DIR``).
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

ENV_PATHS = {"data_dir": "RNNT_ILM_DATA_DIR", "model_dir": "RNNT_ILM_MODEL_DIR", "out_dir": "RNNT_ILM_OUT_DIR"}


@dataclass
class Paths:
    data_dir: str = "work/data"
    model_dir: str = "work/models"
    out_dir: str = "work/out"


@dataclass
class TaskSettings:
    """Synthetic in-domain / cross-domain task."""

    vocab_size: int = 20
    feat_dim: int = 8
    noise: float = 0.5
    group: int = 2
    spread: float = 0.3
    successors: int = 2
    peak: float = 0.9
    length_range: Tuple[int, int] = (3, 10)
    durations: Tuple[int, ...] = (1, 2, 3)
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    n_cross_dev: int = 200
    n_cross_test: int = 200
    n_text: int = 20000


@dataclass
class ModelSettings:
    enc_layers: int = 2
    enc_units: int = 32
    subsampling: int = 1
    pred_layers: int = 1
    pred_units: int = 32
    embed_dim: int = 16
    joint_units: int = 32


@dataclass
class OptimSettings:
    lr: float = 0.5
    clip: float = 5.0
    epochs: int = 8
    batch_size: int = 8
    patience: Optional[int] = None


@dataclass
class FusionPresets:
    beam: int = 128
    score_beam: float = 12.0
    recombination: str = "logsumexp"
    hzero_scales: Tuple[float, float] = (0.85, 0.4)
    select_beam: int = 4  # beam used for checkpoint selection on dev


@dataclass
class SweepSettings:
    lm_range: Tuple[float, float] = (0.0, 1.2)
    ilm_range: Tuple[float, float] = (0.0, 0.8)
    step: float = 0.05
    length_rewards: List[float] = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0])


@dataclass
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    task: TaskSettings = field(default_factory=TaskSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    topology: str = "monotonic"
    rnnt_train: OptimSettings = field(default_factory=OptimSettings)
    ilmt_train: OptimSettings = field(default_factory=lambda: OptimSettings(lr=0.1, epochs=5))
    ilmt_alpha: float = 0.2
    lm_order: int = 2
    lm_delta: float = 0.1
    dr_lm_units: int = 32
    dr_lm_train: OptimSettings = field(default_factory=lambda: OptimSettings(epochs=5, batch_size=16))
    mini_ilm_units: int = 16
    mini_ilm_train: OptimSettings = field(default_factory=lambda: OptimSettings(lr=0.1, epochs=20, batch_size=8))
    exact_alpha: float = 1.0
    fusion: FusionPresets = field(default_factory=FusionPresets)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data):
    if not dataclasses.is_dataclass(cls):
        return data
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        sub = _NESTED.get((cls.__name__, name))
        if sub is not None:
            kwargs[name] = _build(sub, value)
        elif isinstance(value, list) and "Tuple" in str(ftype):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    ("ExperimentConfig", "paths"): Paths,
    ("ExperimentConfig", "task"): TaskSettings,
    ("ExperimentConfig", "model"): ModelSettings,
    ("ExperimentConfig", "rnnt_train"): OptimSettings,
    ("ExperimentConfig", "ilmt_train"): OptimSettings,
    ("ExperimentConfig", "dr_lm_train"): OptimSettings,
    ("ExperimentConfig", "mini_ilm_train"): OptimSettings,
    ("ExperimentConfig", "fusion"): FusionPresets,
    ("ExperimentConfig", "sweep"): SweepSettings,
}


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def apply_env(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    for attr, var in ENV_PATHS.items():
        if environ.get(var):
            setattr(cfg.paths, attr, environ[var])
    return cfg


def load_config(path=None, environ=None) -> ExperimentConfig:
    """Defaults, then the JSON file (if any), then path overrides from the environment."""
    cfg = ExperimentConfig()
    if path is not None:
        cfg = from_dict(json.loads(Path(path).read_text()))
    return apply_env(cfg, environ)


def acceptance_preset(seed: int) -> ExperimentConfig:
    """Smaller task and coarser grids that keep a full seed under about five minutes."""
    cfg = ExperimentConfig(seed=seed)
    cfg.task.n_train, cfg.task.n_dev, cfg.task.n_test = 800, 100, 100
    cfg.task.n_cross_dev = cfg.task.n_cross_test = 100
    cfg.task.n_text = 5000
    cfg.rnnt_train.epochs = 7
    cfg.exact_alpha = 2.0
    cfg.fusion.beam, cfg.fusion.score_beam = 4, 8.0
    cfg.sweep = SweepSettings(lm_range=(0.0, 2.0), ilm_range=(0.2, 1.2), step=0.2,
                              length_rewards=[float(r) for r in range(1, 9)])
    return cfg
