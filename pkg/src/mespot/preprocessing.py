"""Grid block division and temporal multiscale sampling.

Pre-cropped grayscale frame sequences are cut into a 4x4 grid of equal
blocks; each block sequence is then sub-sampled into fixed-length
(20-step) instances at frame strides S in {1, 2, 3} so that slow and fast
renditions of the same motion both appear in training. The instances for
one block position, pooled over all clips, form that block's bag.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

GRID = 4  # blocks per side; 16 positions total
WINDOW_STEPS = 20  # temporal window length in frames


@dataclass
class FrameSequence:
    """A full pre-cropped clip: frames (T, H, W, 1) scaled to [0, 1]."""

    clip_id: str
    frames: np.ndarray
    frame_period_ms: float = 10.0

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[3] != 1:
            raise ShapeError(f"frames must be (T, H, W, 1), got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class BlockSequence:
    """One spatial block position tracked through time."""

    block_index: int
    frames: np.ndarray

    def __post_init__(self) -> None:
        if not 0 <= self.block_index < GRID * GRID:
            raise ValueError(f"block_index out of range: {self.block_index}")


@dataclass
class Instance:
    """A 20-step sample of one block at temporal scale `scale`."""

    block_index: int
    scale: int
    start: int
    frames: np.ndarray
    clip_id: str = ""

    def __post_init__(self) -> None:
        if self.frames.shape[0] != WINDOW_STEPS:
            raise ShapeError(f"instance must cover {WINDOW_STEPS} steps, got {self.frames.shape[0]}")


@dataclass
class Bag:
    """All sampled instances for one block position."""

    block_index: int
    instances: list[Instance] = field(default_factory=list)

    def add(self, inst: Instance) -> None:
        if inst.block_index != self.block_index:
            raise ValueError("instance belongs to a different block")
        self.instances.append(inst)


def block_divide(seq: FrameSequence, block_size: int | None = None) -> list[BlockSequence]:
    """Split every frame into the 4x4 grid of non-overlapping blocks.

    Block k covers rows bs*(k//4).. and cols bs*(k%4)..; temporal order is
    preserved. The 16 blocks tile the frame exactly, so concatenating them
    reconstructs it.
    """
    t, h, w, c = seq.frames.shape
    if block_size is None:
        if h % GRID or w % GRID or h != w:
            raise ShapeError(f"frames of {h}x{w} do not tile into a {GRID}x{GRID} grid")
        block_size = h // GRID
    if (h, w) != (GRID * block_size, GRID * block_size):
        raise ShapeError(
            f"expected {GRID * block_size}x{GRID * block_size} frames, got {h}x{w}"
        )
    grid = seq.frames.reshape(t, GRID, block_size, GRID, block_size, c)
    blocks = []
    for k in range(GRID * GRID):
        r, q = divmod(k, GRID)
        blocks.append(BlockSequence(k, np.ascontiguousarray(grid[:, r, :, q, :, :])))
    return blocks


def valid_starts(num_frames: int, scale: int) -> int:
    """Number of valid window start frames: start + 19*scale must stay in range."""
    return max(0, num_frames - (WINDOW_STEPS - 1) * scale)


def temporal_multiscale_sample(
    block: BlockSequence,
    n_windows: int,
    scales: tuple[int, ...],
    seed,
    exclude_frames: np.ndarray | None = None,
    clip_id: str = "",
) -> list[Instance]:
    """Sample `n_windows` random 20-step instances per temporal scale.

    Each instance takes frames start, start+S, ..., start+19*S with start
    drawn uniformly from the valid range by a PRNG seeded from `seed`.
    Scales the sequence is too short for are skipped; if every scale is
    skipped the result is empty and a warning is emitted. `exclude_frames`
    is an optional boolean mask of frames that must not appear in any
    instance (labeled anomaly segments in otherwise-normal footage).
    """
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    t = block.frames.shape[0]
    rng = np.random.default_rng(seed)
    out: list[Instance] = []
    for scale in sorted(scales):
        n_valid = valid_starts(t, scale)
        if n_valid == 0:
            continue
        starts = np.arange(n_valid)
        if exclude_frames is not None and exclude_frames.any():
            keep = [
                s for s in starts
                if not exclude_frames[s : s + (WINDOW_STEPS - 1) * scale + 1 : scale].any()
            ]
            starts = np.asarray(keep, dtype=int)
            if starts.size == 0:
                continue
        for _ in range(n_windows):
            start = int(rng.choice(starts))
            idx = start + scale * np.arange(WINDOW_STEPS)
            out.append(
                Instance(
                    block_index=block.block_index,
                    scale=scale,
                    start=start,
                    frames=block.frames[idx].copy(),
                    clip_id=clip_id,
                )
            )
    if not out:
        warnings.warn(
            f"sequence of {t} frames too short for every requested scale {tuple(scales)}",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


def build_bags(
    clips,
    scales: tuple[int, ...] = (1, 2, 3),
    n_windows: int = 1,
    seed: int = 0,
    block_size: int | None = None,
    exclusions: dict[str, list[tuple[int, int]]] | None = None,
) -> list[Bag]:
    """Aggregate per-block instances across clips into 16 bags.

    `clips` may be any iterable of FrameSequence (a generator keeps only one
    clip in memory at a time). The PRNG is split per (clip, block, scale)
    from the master seed, so the result does not depend on iteration order.
    `exclusions` maps clip ids to labeled (onset, offset) segments whose
    frames must stay out of training instances.
    """
    bags = [Bag(k) for k in range(GRID * GRID)]
    n_clips = 0
    for clip_idx, clip in enumerate(clips):
        n_clips += 1
        mask = None
        segs = (exclusions or {}).get(clip.clip_id)
        if segs:
            mask = np.zeros(clip.num_frames, dtype=bool)
            for onset, offset in segs:
                mask[onset : offset + 1] = True
        for block in block_divide(clip, block_size=block_size):
            for scale in sorted(scales):
                child = np.random.SeedSequence(
                    entropy=seed, spawn_key=(clip_idx, block.block_index, scale)
                )
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    instances = temporal_multiscale_sample(
                        block,
                        n_windows,
                        (scale,),
                        child,
                        exclude_frames=mask,
                        clip_id=clip.clip_id,
                    )
                for inst in instances:
                    bags[block.block_index].add(inst)
    if n_clips == 0:
        raise ValueError("clip list is empty")
    return bags
