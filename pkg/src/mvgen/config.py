"""Run configuration: one TOML file mirrors every stage's settings.

CLI flags override file values; the fully resolved tree is echoed into the
run directory so a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomlkit

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .sampling import SamplerConfig
from .schedule import NoiseSchedule, make_schedule
from .unet import UNetConfig


@dataclass(frozen=True)
class ScheduleParams:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_schedule(self.timesteps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class ClusteringParams:
    clusters: int = 8
    batch_size: int = 256
    max_iters: int = 100
    tol: float = 1e-6


@dataclass(frozen=True)
class TrainingParams:
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 2e-4
    checkpoint_every: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    unet: UNetConfig = field(default_factory=UNetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    clustering: ClusteringParams = field(default_factory=ClusteringParams)
    training: TrainingParams = field(default_factory=TrainingParams)

    def to_dict(self) -> dict:
        sub = self.sampler.timestep_subsequence
        return {
            "seed": self.seed,
            "schedule": {
                "timesteps": self.schedule.timesteps,
                "beta_start": self.schedule.beta_start,
                "beta_end": self.schedule.beta_end,
            },
            "unet": self.unet.to_dict(),
            "sampler": {
                "steps": self.sampler.steps,
                "gamma": self.sampler.gamma,
                "share_initial_noise": self.sampler.share_initial_noise,
                # TOML has no null; an empty list means "use the uniform spread"
                "timestep_subsequence": [] if sub is None else list(sub),
            },
            "clustering": {
                "clusters": self.clustering.clusters,
                "batch_size": self.clustering.batch_size,
                "max_iters": self.clustering.max_iters,
                "tol": self.clustering.tol,
            },
            "training": {
                "iterations": self.training.iterations,
                "batch_size": self.training.batch_size,
                "lr": self.training.lr,
                "checkpoint_every": self.training.checkpoint_every,
            },
        }

    @classmethod
    def from_dict(cls, tree: dict) -> "RunConfig":
        base = cls().to_dict()
        _reject_unknown(tree, base, prefix="")
        merged = _merge(base, tree)
        sampler_kw = dict(merged["sampler"])
        sub = sampler_kw.pop("timestep_subsequence")
        return cls(
            seed=int(merged["seed"]),
            schedule=ScheduleParams(**merged["schedule"]),
            unet=UNetConfig.from_dict(merged["unet"]),
            sampler=SamplerConfig(
                timestep_subsequence=tuple(sub) if sub else None, **sampler_kw
            ),
            clustering=ClusteringParams(**merged["clustering"]),
            training=TrainingParams(**merged["training"]),
        )


def _reject_unknown(tree: dict, known: dict, prefix: str) -> None:
    for key, value in tree.items():
        if key not in known:
            raise ValueError(f"unknown config key '{prefix}{key}'")
        if isinstance(known[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config key '{prefix}{key}' must be a table")
            _reject_unknown(value, known[key], prefix=f"{prefix}{key}.")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict):
            out[key] = _merge(base[key], value)
        else:
            out[key] = value
    return out


def load_run_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        tree = tomllib.load(fh)
    return RunConfig.from_dict(tree)


def with_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-path overrides like {"sampler.gamma": 2.0}; None values
    (unset CLI flags) are skipped."""
    tree = config.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = tree
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node[part]
        if leaf not in node:
            raise ValueError(f"unknown config key '{dotted}'")
        node[leaf] = value
    return RunConfig.from_dict(tree)


def dumps_run_config(config: RunConfig) -> str:
    return tomlkit.dumps(config.to_dict())


def echo_run_config(config: RunConfig, out_dir) -> Path:
    """Write the resolved config into the run directory and return its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.toml"
    path.write_text(dumps_run_config(config), encoding="utf-8")
    return path
