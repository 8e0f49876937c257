"""Experiment configuration (YAML) with environment-variable overrides.

Key schema (all keys optional except ``env``)::

    env: balancer                  # balancer | pointgoal
    env_params: {}                 # overrides of the env config dataclass
    seed: 0                        # training seed (victim + STAR); env STARBENCH_SEED overrides
    output_dir: runs/balancer      # env STARBENCH_OUTPUT_DIR overrides
    workers: 1                     # threads across benchmark cells
    victim:
      checkpoint: null             # existing checkpoint, or train one:
      train_steps: 80000
      ppo: {}                      # PpoConfig overrides
    epsilon: auto                  # float, or auto = calibrate so FGSM drops reward by 5-20%
    calibration: {low: 5.0, high: 20.0, start: 0.1, episodes: 6, max_iter: 12}
    norm: linf
    step_counts: [10, 20]
    methods: null                  # subset of benchmark row names; null = full table
    episodes: 20                   # episodes per evaluation seed
    eval_seeds: [10000]            # episode i of seed b uses env seed b + i
    star:
      checkpoint: null
      episodes: 60
      config: {}                   # StarConfig overrides (epsilon is taken from above)
    defense: {steps: 20000, warmup: 4096, lr: 3.0e-4, episodes: 20, eval_method: pgd, eval_steps: 10}
    sweep: {epsilons: [0.25, 0.5, 1.0], methods: [fgsm, pgd], steps: 10}
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from ..envs import ENVS

ENV_SEED = "STARBENCH_SEED"
ENV_OUTPUT = "STARBENCH_OUTPUT_DIR"


class ExperimentConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str = "balancer"
    env_params: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    victim: dict = field(default_factory=dict)
    epsilon: float | str = "auto"
    calibration: dict = field(default_factory=dict)
    norm: str = "linf"
    step_counts: list = field(default_factory=lambda: [10, 20])
    methods: list | None = None
    episodes: int = 20
    eval_seeds: list = field(default_factory=lambda: [10_000])
    star: dict = field(default_factory=dict)
    defense: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.env not in ENVS:
            raise ExperimentConfigError(f"unknown env {self.env!r}; choose from {sorted(ENVS)}")
        if int(self.episodes) < 1:
            raise ExperimentConfigError("episodes must be >= 1")
        if not self.eval_seeds:
            raise ExperimentConfigError("eval_seeds must be non-empty")
        if self.epsilon != "auto":
            try:
                self.epsilon = float(self.epsilon)
            except (TypeError, ValueError):
                raise ExperimentConfigError(f"epsilon must be a number or 'auto', got {self.epsilon!r}") from None
            if self.epsilon < 0:
                raise ExperimentConfigError("epsilon must be >= 0")
        if int(self.workers) < 1:
            raise ExperimentConfigError("workers must be >= 1")
        for key in ("victim", "star"):
            ckpt = getattr(self, key).get("checkpoint")
            if ckpt and not Path(ckpt).exists():
                raise ExperimentConfigError(f"{key} checkpoint {ckpt} does not exist")
        self.eval_seeds = [int(s) for s in self.eval_seeds]
        self.step_counts = [int(n) for n in self.step_counts]

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def victim_setting(self, key: str, default):
        return self.victim.get(key, default)

    def star_setting(self, key: str, default):
        return self.star.get(key, default)


def apply_env_overrides(data: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    data = dict(data)
    if environ.get(ENV_SEED):
        data["seed"] = int(environ[ENV_SEED])
    if environ.get(ENV_OUTPUT):
        data["output_dir"] = environ[ENV_OUTPUT]
    return data


def config_from_dict(data: dict, environ=None) -> ExperimentConfig:
    data = apply_env_overrides(data or {}, environ)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ExperimentConfigError(f"unknown config keys: {unknown}")
    return ExperimentConfig(**data)


def load_config(path: str | Path | None, environ=None, **overrides) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ExperimentConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ExperimentConfigError(f"{path}: top level must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(data, environ)
