"""Run configuration: every knob of the tracker/mapper in one dataclass.

The JSON config document mirrors this dataclass (with the loss weights
nested under "weights"); unknown keys are rejected so the documented
schema is the whole schema. Two shipped profiles pin the per-dataset
iteration counts: "replica" (track 40 / map 60) and "scannet"
(track 100 / map 30).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field as dc_field

from .losses import LossWeights


@dataclass
class Hyperparameters:
    # tracking learning rates (pose quaternion / translation)
    lr_q: float = 0.0004
    lr_t: float = 0.002
    # mapping learning rates per parameter block
    lr_position: float = 0.0001
    lr_color: float = 0.0025
    lr_rotation: float = 0.001
    lr_opacity: float = 0.05
    lr_scale: float = 0.001
    lr_feature: float = 0.0025
    lr_decoder: float = 0.0025
    # iteration counts and schedules
    iters_track: int = 40
    iters_map: int = 60
    k_init: int = 200
    t_opt: int = 5
    keyframe_every: int = 5
    # field dimensions / limits
    n_sem: int = 8
    max_gaussians: int = 500_000
    # toggles (ablations)
    use_obs_mask: bool = True
    use_unobs_mask: bool = True
    use_dsr: bool = True
    sampler: str = "rskm"  # "rskm" | "lckm"
    random_expand_fraction: float = 0.02  # used when use_unobs_mask is off
    # pruning hygiene (off by default; acceptance runs leave it off)
    prune_enabled: bool = False
    prune_threshold: float = 0.005
    prune_every: int = 20
    # misc
    seed: int = 0
    deterministic: bool = True
    threads: int = 0  # 0 = leave numba's default
    weights: LossWeights = dc_field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        for name in ("lr_q", "lr_t", "lr_position", "lr_color", "lr_rotation",
                     "lr_opacity", "lr_scale", "lr_feature", "lr_decoder"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iters_track < 1 or self.iters_map < 1 or self.k_init < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.t_opt < 1:
            raise ValueError("t_opt must be >= 1")
        if self.sampler not in ("rskm", "lckm"):
            raise ValueError("sampler must be 'rskm' or 'lckm'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "Hyperparameters":
        d = dict(d)
        weights = d.pop("weights", {})
        known = {f.name for f in dataclasses.fields(Hyperparameters)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        wknown = {f.name for f in dataclasses.fields(LossWeights)}
        wunknown = set(weights) - wknown
        if wunknown:
            raise ValueError(f"unknown weight keys: {sorted(wunknown)}")
        return Hyperparameters(weights=LossWeights(**weights), **d)


def profile(name: str) -> Hyperparameters:
    if name == "replica":
        return Hyperparameters(iters_track=40, iters_map=60)
    if name == "scannet":
        return Hyperparameters(iters_track=100, iters_map=30)
    raise ValueError(f"unknown profile {name!r} (expected 'replica' or 'scannet')")


def load_config(path: str) -> Hyperparameters:
    with open(path) as f:
        return Hyperparameters.from_dict(json.load(f))


def save_config(path: str, hyper: Hyperparameters) -> None:
    with open(path, "w") as f:
        json.dump(hyper.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
