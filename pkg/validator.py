import logging
from collections import Counter
from typing import List

from attention_core import AttentionMaskSpec
from regdedup import PruneResult
from segmask import SegmentPartition

logger = logging.getLogger(__name__)


def validate_mask(mask: AttentionMaskSpec) -> List[str]:
    """
    Checks causality and self-visibility of every row.
    Returns a list of issues (empty when the mask is valid).
    """
    issues = []
    for i, intervals in enumerate(mask.rows):
        if not any(s <= i < e for s, e in intervals):
            issues.append(f"Row {i} does not permit its own column.")
        for s, e in intervals:
            if s < 0 or s >= e:
                issues.append(f"Row {i} has an empty or negative interval [{s}, {e}).")
            elif e > i + 1:
                issues.append(f"Row {i} permits future columns up to {e - 1}.")
    return issues


def validate_segment_mask(mask: AttentionMaskSpec, partition: SegmentPartition) -> List[str]:
    issues = validate_mask(mask)
    n_v = partition.n_visual
    if mask.size < n_v:
        return issues + [f"Mask covers {mask.size} rows but partition has {n_v} visual tokens."]
    ids = partition.segment_ids()
    for i in range(n_v):
        for s, e in mask.rows[i]:
            # Visual rows only see their own segment.
            if s < n_v and (ids[s] != ids[i] or ids[min(e, n_v) - 1] != ids[i]):
                issues.append(f"Visual row {i} (segment {ids[i]}) crosses into another segment via [{s}, {e}).")
    for r in range(n_v, mask.size):
        if mask.rows[r] != ((0, r + 1),):
            issues.append(f"Text row {r} lost full causal access: {mask.rows[r]}.")
    return issues


def validate_partition(partition: SegmentPartition, n_visual: int) -> List[str]:
    issues = []
    expected_start = 0
    for k, (start, end) in enumerate(partition.segments):
        if start != expected_start:
            issues.append(f"Segment {k} starts at {start}, expected {expected_start} (gap or overlap).")
        if end <= start:
            issues.append(f"Segment {k} is empty: [{start}, {end}).")
        if start % partition.tokens_per_frame or end % partition.tokens_per_frame:
            issues.append(f"Segment {k} [{start}, {end}) is not frame-aligned.")
        expected_start = end
    if expected_start != n_visual:
        issues.append(f"Segments cover 0..{expected_start - 1}, expected 0..{n_visual - 1}.")
    return issues


def validate_result(result: PruneResult) -> List[str]:
    """
    Audits provenance of a prune result: each visual index is retained, absorbed or
    dropped exactly once, entries never span segments, and the budget holds.
    """
    issues = []
    retained = result.retained_indices
    absorbed = [i for e in result.entries for i in e.absorbed]
    dupes = [i for i, c in Counter(retained + absorbed).items() if c > 1]
    if dupes:
        issues.append(f"Indices appear in more than one entry: {sorted(dupes)[:10]}.")
    if retained != sorted(retained):
        issues.append("Retained entries are not in ascending index order.")
    dropped = result.dropped_indices
    total = len(retained) + len(absorbed) + len(dropped)
    if total != result.n_visual:
        issues.append(f"Provenance leak: {len(retained)} retained + {len(absorbed)} absorbed + "
                      f"{len(dropped)} dropped = {total}, expected {result.n_visual}.")
    for entry in result.entries:
        segs = {result.partition.segment_of(i) for i in entry.members}
        if len(segs) > 1:
            issues.append(f"Entry {entry.index} absorbs tokens from segments {sorted(segs)}.")
    bound = result.requested_retention + 1.0 / result.n_visual
    if result.achieved_retention > bound + 1e-12:
        issues.append(f"Achieved retention {result.achieved_retention:.4f} exceeds {bound:.4f}.")
    return issues
