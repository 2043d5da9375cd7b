"""Pipeline configuration and the desk/paper profiles.

The paper profile reproduces the reference architecture exactly (360x360
frames, 90x90 blocks, 128 conv filters, 64 ConvLSTM filters, flattened
latent vectors for the density model). The desk profile shrinks blocks and
filter counts so the whole pipeline runs on a laptop-class CPU in minutes;
everything else (window length, scales, smoothing, thresholding) is
identical.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path


@dataclass
class PipelineConfig:
    profile: str = "desk"
    # preprocessing
    block_size: int = 24
    scales: tuple[int, ...] = (1, 2, 3)
    n_windows: int = 1
    # autoencoder (conv_filters must equal 2 * lstm_filters)
    conv_filters: int = 12
    lstm_filters: int = 6
    lr: float = 1e-3
    epochs_phase1: int = 2
    epochs_phase2: int = 4
    batch_frames: int = 128
    batch_instances: int = 16
    max_train_instances: int | None = 480
    train_dropout: bool = True
    # density model
    gmm_components: int = 5
    reduction: str = "spatial-mean-pool"
    em_tol: float = 1e-4
    em_max_iter: int = 200
    # spotting
    normalize: bool = True
    eps_range: float = 0.05
    smooth_block_scores: bool = False

    def __post_init__(self) -> None:
        self.scales = tuple(int(s) for s in self.scales)
        if self.conv_filters != 2 * self.lstm_filters:
            raise ValueError("conv_filters must equal 2 * lstm_filters")
        if self.reduction not in ("none", "spatial-mean-pool"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    @property
    def frame_size(self) -> int:
        return 4 * self.block_size


def desk_config() -> PipelineConfig:
    return PipelineConfig()


def paper_config() -> PipelineConfig:
    return PipelineConfig(
        profile="paper",
        block_size=90,
        conv_filters=128,
        lstm_filters=64,
        epochs_phase1=10,
        epochs_phase2=30,
        batch_instances=16,
        max_train_instances=None,
        reduction="none",
    )


_PROFILES = {"desk": desk_config, "paper": paper_config}


def make_config(profile: str = "desk", overrides: dict | None = None) -> PipelineConfig:
    try:
        cfg = _PROFILES[profile]()
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(_PROFILES)}")
    if overrides:
        known = asdict(cfg)
        unknown = set(overrides) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = replace(cfg, **overrides)
    return cfg


def load_config(path: str | Path | None, profile: str = "desk") -> PipelineConfig:
    """Build a profile config, optionally overridden by keys from a JSON file."""
    overrides = None
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise ValueError("config file must hold a JSON object")
        if "scales" in overrides:
            overrides["scales"] = tuple(overrides["scales"])
    return make_config(profile, overrides)
