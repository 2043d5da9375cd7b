"""Frame-level detection metrics plus temporal-boundary shift statistics.

Precision/recall compare flagged frames against labeled frames pooled over
all evaluated clips. AUC sweeps a threshold over the negated smoothed score
curve (raw log-likelihood units, comparable across clips) against frame
labels. The boundary shift statistic averages |predicted - ground truth|
onset and offset distances over overlap-matched segment pairs; segments
left unmatched on either side are penalized by their distance to the clip
edge rather than dropped.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import Manifest
from .spotting import ScoreCurves, SpottingResult


@dataclass
class EvalReport:
    precision: float
    recall: float
    auc: float
    mas_ms: float
    mas_std_ms: float
    mad_ms: float
    mas_frames: float
    per_clip: dict[str, dict] = field(default_factory=dict)

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based ROC AUC with average ranks for ties; 0.5 when only one
    class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _segment_frames(segments, n_frames: int) -> np.ndarray:
    mask = np.zeros(n_frames, dtype=bool)
    for onset, offset in segments:
        mask[onset : offset + 1] = True
    return mask


def match_segments(pred, gt):
    """Greedy maximal-overlap matching; each segment used at most once.

    Returns (pairs, unmatched_pred, unmatched_gt) where pairs are
    (pred_segment, gt_segment) tuples.
    """
    overlaps = []
    for pi, p in enumerate(pred):
        for gi, g in enumerate(gt):
            ov = min(p[1], g[1]) - max(p[0], g[0]) + 1
            if ov > 0:
                overlaps.append((ov, pi, gi))
    overlaps.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g, pairs = set(), set(), []
    for _, pi, gi in overlaps:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        pairs.append((pred[pi], gt[gi]))
    unmatched_pred = [p for i, p in enumerate(pred) if i not in used_p]
    unmatched_gt = [g for i, g in enumerate(gt) if i not in used_g]
    return pairs, unmatched_pred, unmatched_gt


def _boundary_shifts(pred, gt, n_frames: int) -> tuple[list[float], list[float]]:
    """Onset and offset |shift| lists in frames, including edge penalties for
    unmatched segments on either side (keeps the statistic symmetric)."""
    pairs, un_pred, un_gt = match_segments(pred, gt)
    q = [abs(p[0] - g[0]) for p, g in pairs]
    u = [abs(p[1] - g[1]) for p, g in pairs]
    for seg in un_pred + un_gt:
        q.append(float(seg[0]))  # distance to clip start
        u.append(float(n_frames - 1 - seg[1]))  # distance to clip end
    return [float(v) for v in q], [float(v) for v in u]


def evaluate(
    spotted: list[tuple[ScoreCurves, SpottingResult]], manifest: Manifest
) -> EvalReport:
    """Score spotting results against manifest labels.

    `spotted` pairs each clip's curves with its spotting result; clip ids
    must exist in the manifest. Precision/recall/AUC are frame-level and
    pooled; shift statistics are averaged over segments with the clip's
    frame period converting frames to milliseconds.
    """
    if not spotted:
        raise ValueError("no spotting results to evaluate")
    tp = fp = fn = 0
    all_scores: list[np.ndarray] = []
    all_labels: list[np.ndarray] = []
    q_ms: list[float] = []
    u_ms: list[float] = []
    q_fr: list[float] = []
    u_fr: list[float] = []
    mad_terms: list[float] = []
    per_clip: dict[str, dict] = {}
    for curves, result in spotted:
        entry = manifest.clip(result.clip_id)
        n = curves.num_frames
        labels = _segment_frames(entry.segments, n)
        flagged = _segment_frames(result.segments, n)
        clip_tp = int((flagged & labels).sum())
        tp += clip_tp
        fp += int((flagged & ~labels).sum())
        fn += int((~flagged & labels).sum())
        all_scores.append(-curves.raw_p_sv())
        all_labels.append(labels)
        q, u = _boundary_shifts(result.segments, entry.segments, n)
        q_fr += q
        u_fr += u
        q_ms += [v * entry.frame_period_ms for v in q]
        u_ms += [v * entry.frame_period_ms for v in u]
        mad_terms += [(off - on + 1) * entry.frame_period_ms for on, off in entry.segments]
        per_clip[result.clip_id] = {
            "n_frames": n,
            "n_flagged": int(flagged.sum()),
            "n_labeled": int(labels.sum()),
            "tp": clip_tp,
            "no_event": result.no_event,
            "segments_pred": [list(s) for s in result.segments],
            "segments_gt": [list(s) for s in entry.segments],
        }
    precision = tp / (tp + fp) if (tp + fp) else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    auc = roc_auc(np.concatenate(all_scores), np.concatenate(all_labels))

    def _mas(q_list, u_list):
        mq = float(np.mean(q_list)) if q_list else 0.0
        mu = float(np.mean(u_list)) if u_list else 0.0
        return 0.5 * (mq + mu)

    shifts = np.array(q_ms + u_ms, dtype=np.float64)
    mas_std = float(shifts.std() / np.sqrt(shifts.size)) if shifts.size else 0.0
    return EvalReport(
        precision=float(precision),
        recall=float(recall),
        auc=float(auc),
        mas_ms=_mas(q_ms, u_ms),
        mas_std_ms=mas_std,
        mad_ms=float(np.mean(mad_terms)) if mad_terms else 0.0,
        mas_frames=_mas(q_fr, u_fr),
        per_clip=per_clip,
    )
