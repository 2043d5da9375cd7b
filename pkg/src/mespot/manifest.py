"""Dataset manifests and frame storage.

Clips are directories of 8-bit grayscale PGM frames (zero-padded numeric
names) referenced from a JSON manifest that carries per-clip metadata:
frame period, subject id, train/val/test split, and labeled anomaly
segments. Training consumers must exclude labeled frames; the loader
enforces subject-independent splits and rejects malformed label sets.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .preprocessing import FrameSequence

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(path: str | Path, frame: np.ndarray) -> None:
    """Write a 2-D uint8 array as a binary (P5) PGM file."""
    frame = np.asarray(frame)
    if frame.ndim != 2 or frame.dtype != np.uint8:
        raise ValueError(f"expected a 2-D uint8 frame, got {frame.shape} {frame.dtype}")
    h, w = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(frame.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary (P5) PGM file into a 2-D uint8 array."""
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if not m:
        raise ManifestError(f"{path} is not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ManifestError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=m.end())
    if pixels.size != h * w:
        raise ManifestError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w)


def frame_name(index: int) -> str:
    return f"frame_{index:06d}.pgm"


@dataclass
class ClipEntry:
    clip_id: str
    frame_dir: str  # relative to the manifest location
    frame_period_ms: float
    subject_id: str
    split: str
    segments: list[tuple[int, int]] = field(default_factory=list)
    n_frames: int = 0  # filled in by validation


@dataclass
class Manifest:
    clips: list[ClipEntry]
    root: Path

    def by_split(self, split: str) -> list[ClipEntry]:
        return [c for c in self.clips if c.split == split]

    def clip(self, clip_id: str) -> ClipEntry:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise KeyError(clip_id)

    def exclusion_map(self) -> dict[str, list[tuple[int, int]]]:
        """Labeled segments per clip id, for training-time frame exclusion."""
        return {c.clip_id: list(c.segments) for c in self.clips if c.segments}


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "clips": [
            {
                "clip_id": c.clip_id,
                "frame_dir": c.frame_dir,
                "frame_period_ms": c.frame_period_ms,
                "subject_id": c.subject_id,
                "split": c.split,
                "segments": [list(s) for s in c.segments],
            }
            for c in manifest.clips
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _validate_clip(entry: ClipEntry, root: Path) -> None:
    clip_dir = root / entry.frame_dir
    if not clip_dir.is_dir():
        raise ManifestError(f"clip {entry.clip_id}: frame directory {clip_dir} missing")
    n = len(list(clip_dir.glob("frame_*.pgm")))
    if n == 0:
        raise ManifestError(f"clip {entry.clip_id}: no frames in {clip_dir}")
    for probe in (0, n - 1):
        if not (clip_dir / frame_name(probe)).exists():
            raise ManifestError(
                f"clip {entry.clip_id}: frame files are not contiguous (missing index {probe})"
            )
    entry.n_frames = n
    last = None
    for onset, offset in sorted(entry.segments):
        if not (0 <= onset <= offset < n):
            raise ManifestError(
                f"clip {entry.clip_id}: segment ({onset}, {offset}) outside 0..{n - 1}"
            )
        if last is not None and onset <= last:
            raise ManifestError(f"clip {entry.clip_id}: overlapping label segments")
        last = offset


def load_manifest(path: str | Path) -> Manifest:
    """Load and validate a manifest: frames present, segments in bounds and
    non-overlapping, splits known, subject ids disjoint across splits."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
    raw_clips = doc.get("clips")
    if not raw_clips:
        raise ManifestError("manifest lists no clips")
    clips = []
    seen = set()
    for rc in raw_clips:
        entry = ClipEntry(
            clip_id=rc["clip_id"],
            frame_dir=rc["frame_dir"],
            frame_period_ms=float(rc["frame_period_ms"]),
            subject_id=rc["subject_id"],
            split=rc["split"],
            segments=[tuple(int(v) for v in s) for s in rc.get("segments", [])],
        )
        if entry.clip_id in seen:
            raise ManifestError(f"duplicate clip id {entry.clip_id}")
        seen.add(entry.clip_id)
        if entry.split not in SPLITS:
            raise ManifestError(f"clip {entry.clip_id}: unknown split {entry.split!r}")
        clips.append(entry)
    manifest = Manifest(clips=clips, root=path.parent)
    for entry in clips:
        _validate_clip(entry, manifest.root)
    subjects = {split: {c.subject_id for c in manifest.by_split(split)} for split in SPLITS}
    for a in SPLITS:
        for b in SPLITS:
            if a < b and subjects[a] & subjects[b]:
                raise ManifestError(
                    f"subject ids shared between {a} and {b} splits: {sorted(subjects[a] & subjects[b])}"
                )
    return manifest


def load_clip(manifest: Manifest, entry: ClipEntry) -> FrameSequence:
    """Read a clip's frames into a (T, H, W, 1) float32 sequence in [0, 1]."""
    clip_dir = manifest.root / entry.frame_dir
    frames = [read_pgm(clip_dir / frame_name(i)) for i in range(entry.n_frames)]
    stack = np.stack(frames).astype(np.float32) / 255.0
    return FrameSequence(
        clip_id=entry.clip_id, frames=stack[..., None], frame_period_ms=entry.frame_period_ms
    )
