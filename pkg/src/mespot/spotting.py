"""Inference: slide a 20-step window over a clip, score every block's latent
against its bag density, pool, smooth, threshold, and localize.

The score for frame t is the weighted log-likelihood of the window
[t-19, t]'s final-step latent (frames before 19 inherit the first computable
score). The per-frame video curve is the mean over the 16 block curves,
smoothed with a sigma=10 Gaussian. The adaptive threshold

    T = max(P_sv) - mean(P_sv) + min(P_sv) + 0.5 * std(P_sv)

flags frames scoring below it; maximal flagged runs become (onset, offset)
segments and, inside them, blocks whose own scores drop below T localize the
event spatially. A clip whose smoothed curve has almost no dynamic range
(in min-max-normalized units) is declared event-free instead.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density import GmmModel, reduce_latent_seq, weighted_log_likelihood_batch
from .preprocessing import GRID, WINDOW_STEPS, FrameSequence, block_divide
from .rcae import RcaeModel, _conv_stack_forward, _lstm_forward

SMOOTH_SIGMA = 10.0
SMOOTH_RADIUS = 30  # 3 sigma
DEFAULT_EPS_RANGE = 0.05  # normalized units; below this the clip is event-free

N_BLOCKS = GRID * GRID


@dataclass
class ScoreCurves:
    """Per-clip score curves; `normalized` says whether the stored values are
    min-max mapped to [0, 1] (jointly over block and video curves). The
    affine (norm_lo, norm_hi) recovers raw log-likelihoods."""

    clip_id: str
    p_block: np.ndarray  # (16, T)
    p_video: np.ndarray  # (T,)
    p_sv: np.ndarray  # (T,)
    normalized: bool = False
    norm_lo: float | None = None
    norm_hi: float | None = None

    @property
    def num_frames(self) -> int:
        return self.p_video.shape[0]

    def raw_p_sv(self) -> np.ndarray:
        """The smoothed curve in raw log-likelihood units."""
        if not self.normalized:
            return self.p_sv
        return self.norm_lo + self.p_sv * (self.norm_hi - self.norm_lo)


@dataclass
class SpottingResult:
    clip_id: str
    threshold: float
    segments: list[tuple[int, int]] = field(default_factory=list)
    active_blocks: dict[int, list[int]] = field(default_factory=dict)
    no_event: bool = False


def smooth(p_video: np.ndarray, sigma: float = SMOOTH_SIGMA, radius: int = SMOOTH_RADIUS) -> np.ndarray:
    """Convolve with a normalized 1-D Gaussian (reflect padding at the ends).

    Constant signals are fixed points because the kernel sums to one.
    """
    p = np.asarray(p_video, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("expected a non-empty 1-D score curve")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    if p.size == 1:
        return p.copy()
    padded = np.pad(p, radius, mode="reflect")
    return np.convolve(padded, kernel, mode="valid")


def adaptive_threshold(p_sv: np.ndarray) -> float:
    """max - mean + min + 0.5*std of the smoothed curve (population std)."""
    p = np.asarray(p_sv, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("threshold needs a 1-D curve of length >= 2")
    return float(p.max() - p.mean() + p.min() + 0.5 * p.std())


def score_clip(
    clip: FrameSequence,
    model: RcaeModel,
    gmms: list[GmmModel],
    normalize: bool = True,
    chunk_windows: int = 512,
) -> ScoreCurves:
    """Score every frame of a clip per block with eval-mode encoding.

    For each frame t >= 19, the 20-step window ending at t is encoded per
    block, the final-step latent is reduced and scored against the block's
    mixture; frames 0..18 copy the score at t=19. The video curve is the
    arithmetic mean over blocks; optional joint min-max normalization maps
    block and video curves to [0, 1].
    """
    t_total = clip.num_frames
    if t_total < WINDOW_STEPS:
        raise ValueError(f"clip has {t_total} frames; scoring needs >= {WINDOW_STEPS}")
    if len(gmms) != N_BLOCKS:
        raise ValueError(f"expected {N_BLOCKS} mixture models, got {len(gmms)}")
    arch = model.arch
    reduction = gmms[0].reduction
    n_win = t_total - WINDOW_STEPS + 1
    p_block = np.empty((N_BLOCKS, t_total), dtype=np.float64)
    cell1 = model.cell("enc_lstm1")
    cell2 = model.cell("enc_lstm2")
    for block in block_divide(clip, block_size=arch.block_size):
        frames = block.frames.astype(model.dtype, copy=False)
        a_all, _ = _conv_stack_forward(model, frames, want_cache=False)
        # Window views: (n_win, 20, lh, lw, F) without copying the conv features.
        wins = np.lib.stride_tricks.sliding_window_view(a_all, WINDOW_STEPS, axis=0)
        wins = np.moveaxis(wins, -1, 1)
        scores = np.empty(n_win, dtype=np.float64)
        for lo in range(0, n_win, chunk_windows):
            chunk = np.ascontiguousarray(wins[lo : lo + chunk_windows])
            h1, c1, _ = _lstm_forward(cell1, chunk, want_cache=False)
            h2, _, _ = _lstm_forward(cell2, c1, want_cache=False)
            final = np.concatenate([h1[:, -1], h2[:, -1]], axis=3)
            if reduction == "spatial-mean-pool":
                feats = final.mean(axis=(1, 2), dtype=np.float64)
            else:
                feats = final.reshape(final.shape[0], -1).astype(np.float64)
            scores[lo : lo + chunk.shape[0]] = weighted_log_likelihood_batch(
                feats, gmms[block.block_index]
            )
        p_block[block.block_index, WINDOW_STEPS - 1 :] = scores
        p_block[block.block_index, : WINDOW_STEPS - 1] = scores[0]
    p_video = p_block.mean(axis=0)
    p_sv = smooth(p_video)
    lo = float(min(p_block.min(), p_video.min()))
    hi = float(max(p_block.max(), p_video.max()))
    if normalize:
        span = hi - lo if hi > lo else 1.0
        return ScoreCurves(
            clip_id=clip.clip_id,
            p_block=(p_block - lo) / span,
            p_video=(p_video - lo) / span,
            p_sv=(p_sv - lo) / span,
            normalized=True,
            norm_lo=lo,
            norm_hi=hi if hi > lo else lo + 1.0,
        )
    return ScoreCurves(clip.clip_id, p_block, p_video, p_sv, False, lo, hi)


def _flagged_runs(flagged: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of consecutive True entries as (onset, offset)."""
    runs = []
    start = None
    for t, f in enumerate(flagged):
        if f and start is None:
            start = t
        elif not f and start is not None:
            runs.append((start, t - 1))
            start = None
    if start is not None:
        runs.append((start, len(flagged) - 1))
    return runs


def spot(
    curves: ScoreCurves,
    eps_range: float = DEFAULT_EPS_RANGE,
    smooth_block_scores: bool = False,
) -> SpottingResult:
    """Threshold the smoothed curve into temporal segments and localize the
    active blocks inside them.

    If the smoothed curve's dynamic range (in normalized units) stays below
    `eps_range`, the clip is declared event-free: the threshold formula
    algebraically never falls below the curve minimum, so a flat curve would
    otherwise always flag its shallowest dip.
    """
    p_sv = curves.p_sv
    span = None
    if curves.normalized:
        dyn_range = float(p_sv.max() - p_sv.min())
    else:
        lo = min(curves.p_block.min(), curves.p_video.min())
        hi = max(curves.p_block.max(), curves.p_video.max())
        span = float(hi - lo)
        dyn_range = float(p_sv.max() - p_sv.min()) / span if span > 0 else 0.0
    threshold = adaptive_threshold(p_sv)
    if dyn_range < eps_range:
        return SpottingResult(curves.clip_id, threshold, [], {}, no_event=True)
    flagged = p_sv < threshold
    segments = _flagged_runs(flagged)
    p_block = curves.p_block
    if smooth_block_scores:
        p_block = np.stack([smooth(row) for row in p_block])
    active: dict[int, list[int]] = {}
    for onset, offset in segments:
        for t in range(onset, offset + 1):
            blocks = np.nonzero(p_block[:, t] < threshold)[0].tolist()
            if blocks:
                active[t] = blocks
    return SpottingResult(curves.clip_id, threshold, segments, active, no_event=False)


# ---------------------------------------------------------------------------
# Result serialization
# ---------------------------------------------------------------------------


def write_curves_csv(path: str | Path, curves: ScoreCurves, result: SpottingResult) -> None:
    flagged_frames = set()
    for onset, offset in result.segments:
        flagged_frames.update(range(onset, offset + 1))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "p_video", "p_sv", "threshold", "flagged", "active_blocks"])
        for t in range(curves.num_frames):
            bitmask = 0
            for b in result.active_blocks.get(t, []):
                bitmask |= 1 << b
            writer.writerow(
                [
                    t,
                    f"{curves.p_video[t]:.9g}",
                    f"{curves.p_sv[t]:.9g}",
                    f"{result.threshold:.9g}",
                    int(t in flagged_frames),
                    bitmask,
                ]
            )


def write_result_json(path: str | Path, curves: ScoreCurves, result: SpottingResult) -> None:
    doc = {
        "version": 1,
        "clip_id": result.clip_id,
        "no_event": result.no_event,
        "threshold": result.threshold,
        "segments": [list(seg) for seg in result.segments],
        "active_blocks": {str(t): blocks for t, blocks in sorted(result.active_blocks.items())},
        "normalized": curves.normalized,
        "norm_lo": curves.norm_lo,
        "norm_hi": curves.norm_hi,
        "p_video": [float(v) for v in curves.p_video],
        "p_sv": [float(v) for v in curves.p_sv],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_result_json(path: str | Path) -> tuple[ScoreCurves, SpottingResult]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported result version {doc.get('version')!r} in {path}")
    p_video = np.asarray(doc["p_video"], dtype=np.float64)
    curves = ScoreCurves(
        clip_id=doc["clip_id"],
        p_block=np.zeros((N_BLOCKS, len(p_video))),
        p_video=p_video,
        p_sv=np.asarray(doc["p_sv"], dtype=np.float64),
        normalized=doc["normalized"],
        norm_lo=doc["norm_lo"],
        norm_hi=doc["norm_hi"],
    )
    result = SpottingResult(
        clip_id=doc["clip_id"],
        threshold=doc["threshold"],
        segments=[tuple(seg) for seg in doc["segments"]],
        active_blocks={int(t): blocks for t, blocks in doc["active_blocks"].items()},
        no_event=doc["no_event"],
    )
    return curves, result
