"""Seed-deterministic synthetic corpus standing in for licensed footage.

Normal clips combine slowly drifting low-frequency patterns (shared
statistics across clips, clip-specific phases) with periodic blink-like
darkenings in the upper-row blocks. Anomalous clips additionally carry one
short high-frequency, high-amplitude burst confined to a single random
block; its frame span is recorded as the ground-truth segment. Frames are
written as 8-bit PGM files plus a manifest with subject-independent splits.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import ClipEntry, Manifest, frame_name, save_manifest


@dataclass
class SynthConfig:
    n_train_clips: int = 40
    n_test_clips: int = 10
    n_val_clips: int = 0
    train_clip_length: int = 96
    test_clip_length: int = 600
    frame_size: int = 192  # 4x4 grid of 48x48 blocks
    anomaly_rate: float = 0.8  # fraction of test clips given a burst
    burst_frames: tuple[int, int] = (6, 8)
    burst_amplitude: float = 0.45
    frame_period_ms: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.burst_frames
        if lo < 2 or hi < lo:
            raise ValueError("burst duration must span at least 2 frames")
        if self.burst_amplitude <= 0:
            raise ValueError("burst amplitude must be positive")
        if self.frame_size % 4:
            raise ValueError("frame_size must divide into a 4x4 block grid")


def _normal_frames(rng: np.random.Generator, t_len: int, size: int) -> np.ndarray:
    """Smooth drifting background plus periodic blinks in the eye blocks."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    tt = np.arange(t_len, dtype=np.float32)[:, None, None]
    f1 = rng.uniform(0.8, 1.4)
    f2 = rng.uniform(1.0, 1.8)
    p1, p2, p3 = rng.uniform(0, 2 * np.pi, size=3)
    w1 = rng.uniform(0.02, 0.04)
    w2 = rng.uniform(0.015, 0.035)
    frames = (
        0.55
        + 0.16 * np.sin(2 * np.pi * (f1 * xx + 0.6 * f1 * yy) + p1 + w1 * tt)
        + 0.12 * np.sin(2 * np.pi * (f2 * xx - 0.8 * f2 * yy) + p2 + w2 * tt)
        + 0.05 * np.sin(2 * np.pi * (0.5 * yy) + p3 + 0.5 * (w1 + w2) * tt)
    ).astype(np.float32)

    # Blinks: gaussian-in-time darkening of two blobs in blocks 1 and 2.
    bs = size // 4
    period = float(rng.uniform(35.0, 55.0))
    phase = float(rng.uniform(0.0, period))
    centers = [(bs // 2, bs + bs // 2), (bs // 2, 2 * bs + bs // 2)]
    blob = np.zeros((size, size), dtype=np.float32)
    for cy, cx in centers:
        blob += np.exp(-(((np.arange(size)[:, None] - cy) / (0.30 * bs)) ** 2
                         + ((np.arange(size)[None, :] - cx) / (0.38 * bs)) ** 2))
    t_rel = (tt[:, 0, 0] + phase) % period
    envelope = np.exp(-0.5 * ((t_rel - period / 2) / 1.6) ** 2).astype(np.float32)
    frames -= 0.30 * envelope[:, None, None] * blob[None, :, :]

    frames += rng.normal(0.0, 0.004, size=frames.shape).astype(np.float32)
    return frames


def _inject_burst(
    frames: np.ndarray, rng: np.random.Generator, duration: int, amplitude: float
) -> tuple[int, int, int]:
    """Add a high-frequency flickering patch to one random block; returns
    (block_index, onset, offset)."""
    t_len, size, _ = frames.shape
    bs = size // 4
    block = int(rng.integers(0, 16))
    r, q = divmod(block, 4)
    margin = 30
    onset = int(rng.integers(margin, t_len - duration - margin))
    yy, xx = np.mgrid[0:bs, 0:bs].astype(np.float32)
    checker = np.sign(np.sin(2 * np.pi * 4.0 * xx / bs) * np.sin(2 * np.pi * 4.0 * yy / bs))
    mask = np.exp(-(((yy - bs / 2) / (0.28 * bs)) ** 2 + ((xx - bs / 2) / (0.28 * bs)) ** 2))
    patch = (checker * mask).astype(np.float32)
    for k in range(duration):
        t = onset + k
        flicker = 1.0 if k % 2 == 0 else -1.0
        frames[t, r * bs : (r + 1) * bs, q * bs : (q + 1) * bs] += amplitude * flicker * patch
    return block, onset, onset + duration - 1


def _write_clip(clip_dir: Path, frames: np.ndarray) -> None:
    from .manifest import write_pgm

    clip_dir.mkdir(parents=True, exist_ok=True)
    quantized = np.clip(frames, 0.0, 1.0)
    quantized = np.round(quantized * 255.0).astype(np.uint8)
    for t in range(frames.shape[0]):
        write_pgm(clip_dir / frame_name(t), quantized[t])


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write the synthetic corpus and its manifest; returns the manifest path.

    Fully deterministic in cfg.seed: every clip draws from its own child
    stream, so clip count or ordering changes do not ripple.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips: list[ClipEntry] = []

    n_anom = int(round(cfg.anomaly_rate * cfg.n_test_clips))
    pick_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(999,)))
    anomalous = set(pick_rng.permutation(cfg.n_test_clips)[:n_anom].tolist())

    specs = (
        [("train", i, f"tr{i:03d}", cfg.train_clip_length, False) for i in range(cfg.n_train_clips)]
        + [("val", i, f"va{i:03d}", cfg.train_clip_length, False) for i in range(cfg.n_val_clips)]
        + [("test", i, f"te{i:03d}", cfg.test_clip_length, i in anomalous) for i in range(cfg.n_test_clips)]
    )
    split_key = {"train": 0, "val": 1, "test": 2}
    for split, idx, subject, length, with_burst in specs:
        clip_id = f"{split}{idx:03d}"
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(split_key[split], idx))
        )
        frames = _normal_frames(rng, length, cfg.frame_size)
        segments: list[tuple[int, int]] = []
        if with_burst:
            duration = int(rng.integers(cfg.burst_frames[0], cfg.burst_frames[1] + 1))
            _, onset, offset = _inject_burst(frames, rng, duration, cfg.burst_amplitude)
            segments.append((onset, offset))
        rel_dir = f"clips/{clip_id}"
        _write_clip(out_dir / rel_dir, frames)
        clips.append(
            ClipEntry(
                clip_id=clip_id,
                frame_dir=rel_dir,
                frame_period_ms=cfg.frame_period_ms,
                subject_id=subject,
                split=split,
                segments=segments,
            )
        )
    manifest = Manifest(clips=clips, root=out_dir)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
