import csv
import logging
from dataclasses import dataclass
from typing import Iterable, List, Sequence, TextIO, Tuple

import numpy as np

from attention_core import AttentionMaskSpec, TokenSequence, cosine_sim
from errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentPartition:
    boundaries: Tuple[int, ...]  # frame indices preceded by a boundary
    segments: Tuple[Tuple[int, int], ...]  # visual-token ranges [start, end)
    tokens_per_frame: int

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def n_visual(self) -> int:
        return self.segments[-1][1] if self.segments else 0

    def segment_of(self, index: int) -> int:
        starts = [s for s, _ in self.segments]
        return int(np.searchsorted(starts, index, side="right") - 1)

    def segment_ids(self) -> np.ndarray:
        ids = np.empty(self.n_visual, dtype=np.int64)
        for seg_id, (start, end) in enumerate(self.segments):
            ids[start:end] = seg_id
        return ids

    def signature(self) -> str:
        return ",".join(str(b) for b in self.boundaries) or "-"


def partition_from_boundaries(boundaries: Sequence[int], frames: int, tokens_per_frame: int) -> SegmentPartition:
    cuts = [0] + sorted(boundaries) + [frames]
    segments = tuple((a * tokens_per_frame, b * tokens_per_frame) for a, b in zip(cuts[:-1], cuts[1:]))
    return SegmentPartition(boundaries=tuple(sorted(boundaries)), segments=segments,
                            tokens_per_frame=tokens_per_frame)


def single_segment(frames: int, tokens_per_frame: int) -> SegmentPartition:
    return partition_from_boundaries([], frames, tokens_per_frame)


def frame_pool(seq: TokenSequence) -> np.ndarray:
    """Arithmetic mean of each frame's tokens, shape (F, d)."""
    if seq.tokens_per_frame < 1 or seq.frames < 1:
        raise ShapeError("cannot pool empty frames")
    grouped = seq.visual.astype(np.float64).reshape(seq.frames, seq.tokens_per_frame, seq.hidden_dim)
    return grouped.mean(axis=1)


def detect_boundaries(pooled: np.ndarray, tau_seg: float, tokens_per_frame: int = 1) -> SegmentPartition:
    """Inserts a boundary before frame i when sim(frame i-1, frame i) < tau_seg."""
    if len(pooled) < 1:
        raise ShapeError("need at least one pooled frame")
    if not 0.0 < tau_seg <= 1.0:
        raise ConfigurationError(f"tau_seg must lie in (0, 1], got {tau_seg}", field="prune.tau_seg")
    boundaries = [i for i in range(1, len(pooled)) if cosine_sim(pooled[i - 1], pooled[i]) < tau_seg]
    partition = partition_from_boundaries(boundaries, len(pooled), tokens_per_frame)
    logger.debug(f"Detected {partition.n_segments} segments over {len(pooled)} frames (tau_seg={tau_seg})")
    return partition


def build_segment_mask(partition: SegmentPartition, n_text: int) -> AttentionMaskSpec:
    """Block-diagonal causal mask over visual rows; text rows keep full causal access."""
    if n_text < 1:
        raise ShapeError("segment mask needs at least one text token")
    rows: List[Tuple[Tuple[int, int], ...]] = []
    for start, end in partition.segments:
        rows.extend(((start, i + 1),) for i in range(start, end))
    n_visual = partition.n_visual
    rows.extend(((0, r + 1),) for r in range(n_visual, n_visual + n_text))
    return AttentionMaskSpec(rows=tuple(rows))


def partition_to_csv(partition: SegmentPartition, stream: TextIO):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["frame_index", "segment_id"])
    frames = partition.n_visual // partition.tokens_per_frame
    for frame in range(frames):
        writer.writerow([frame, partition.segment_of(frame * partition.tokens_per_frame)])


def partition_from_rows(rows: Iterable[Sequence[str]], tokens_per_frame: int) -> SegmentPartition:
    """Inverse of partition_to_csv; expects (frame_index, segment_id) rows without header."""
    labels = [int(seg) for _, seg in sorted(((int(f), s) for f, s in rows), key=lambda r: r[0])]
    if not labels:
        raise ShapeError("empty partition CSV")
    boundaries = [i for i in range(1, len(labels)) if labels[i] != labels[i - 1]]
    return partition_from_boundaries(boundaries, len(labels), tokens_per_frame)
