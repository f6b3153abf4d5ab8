import concurrent.futures
import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from attention_core import (
    DTYPE,
    ModelWeights,
    ScoreVector,
    TokenSequence,
    causal_mask,
    cosine_matrix,
    cosine_sim,
    forward_layers,
)
from errors import ConfigurationError, ShapeError
from poscalib import DEFAULT_LAMBDA, ProfileLayout, ProfileStore, debias
from segmask import SegmentPartition, build_segment_mask, detect_boundaries, frame_pool, single_segment

logger = logging.getLogger(__name__)

MERGE_MEAN = "mean"
MERGE_KEEP_PIVOT = "keep-pivot"
STAGES = ("selected", "prefiltered", "deduped", "filled")
TIMED_STAGES = ("attn", "filter", "dedup", "fill", "forward")


@dataclass
class PruneConfig:
    retention: float = 0.25
    lam: float = DEFAULT_LAMBDA
    beta: float = 0.008
    tau_seg: float = 0.9
    tau_filter: float = 0.7
    tau_merge: float = 0.8
    tau_cluster: float = 0.4
    prune_layer: int = 1
    merge_rule: str = MERGE_MEAN
    use_segmask: bool = True
    use_debias: bool = True
    use_dedup: bool = True
    workers: int = 1

    def validate(self, num_layers: Optional[int] = None):
        if not 0.0 < self.retention <= 1.0:
            raise ConfigurationError(f"must lie in (0, 1], got {self.retention}", field="prune.retention")
        for name in ("tau_seg", "tau_filter", "tau_merge", "tau_cluster"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigurationError(f"must lie in (0, 1], got {value}", field=f"prune.{name}")
        if self.merge_rule not in (MERGE_MEAN, MERGE_KEEP_PIVOT):
            raise ConfigurationError(f"unknown merge rule '{self.merge_rule}'", field="prune.merge_rule")
        if self.prune_layer < 1 or (num_layers is not None and self.prune_layer > num_layers):
            raise ConfigurationError(f"prune_layer {self.prune_layer} outside 1..{num_layers}", field="prune.prune_layer")
        if self.workers < 1:
            raise ConfigurationError("must be at least 1", field="prune.workers")


@dataclass
class RegisterEntry:
    index: int
    vector: Optional[np.ndarray]
    absorbed: List[int] = field(default_factory=list)
    source: str = "register"  # "register" or "cluster"

    @property
    def members(self) -> List[int]:
        return [self.index] + self.absorbed


@dataclass
class RegisterSet:
    segments: List[List[RegisterEntry]]
    stage: str

    def entries(self) -> List[RegisterEntry]:
        return [e for seg in self.segments for e in seg]

    def indices(self) -> List[int]:
        return sorted(e.index for e in self.entries())

    def counts(self) -> List[int]:
        return [len(seg) for seg in self.segments]


@dataclass
class Cluster:
    members: List[int]
    center: np.ndarray

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class ClusterSet:
    clusters: List[Cluster] = field(default_factory=list)
    diversity: List[float] = field(default_factory=list)


@dataclass
class StageStats:
    counts: Dict[str, List[int]] = field(default_factory=dict)  # stage -> per-segment counts
    shortfall: List[int] = field(default_factory=list)

    def total(self, stage: str) -> int:
        return sum(self.counts.get(stage, []))


@dataclass
class PruneResult:
    pruner: str
    n_visual: int
    requested_retention: float
    entries: List[RegisterEntry]  # retained visual entries in ascending index order
    text: np.ndarray  # text hidden states at the pruning point
    stats: StageStats
    partition: SegmentPartition
    raw_scores: Optional[ScoreVector] = None
    scores: Optional[ScoreVector] = None
    hidden: Optional[np.ndarray] = None  # after the remaining layers, when forwarded
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def retained_indices(self) -> List[int]:
        return [e.index for e in self.entries]

    @property
    def retained_visual(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries]).astype(DTYPE)

    @property
    def achieved_retention(self) -> float:
        return len(self.entries) / self.n_visual

    @property
    def index_map(self) -> Dict[int, int]:
        """Original visual index -> retained slot, for pivots and absorbed tokens."""
        mapping = {}
        for slot, entry in enumerate(self.entries):
            for member in entry.members:
                mapping[member] = slot
        return mapping

    @property
    def absorbed_indices(self) -> List[int]:
        return sorted(i for e in self.entries for i in e.absorbed)

    @property
    def dropped_indices(self) -> List[int]:
        kept = self.index_map
        return [i for i in range(self.n_visual) if i not in kept]

    def retained_sequence(self) -> Tuple[np.ndarray, np.ndarray]:
        """Hidden rows (retained visual then text) and their original positions."""
        positions = np.array(self.retained_indices + list(range(self.n_visual, self.n_visual + len(self.text))))
        return np.concatenate([self.retained_visual, self.text]).astype(DTYPE), positions


class StageTimer:
    """Contiguous laps: the recorded stages always add up to the total."""

    def __init__(self):
        self.start = self._last = time.perf_counter()
        self.laps: Dict[str, float] = {}

    def lap(self, stage: str):
        now = time.perf_counter()
        self.laps[stage] = self.laps.get(stage, 0.0) + (now - self._last)
        self._last = now

    @property
    def total(self) -> float:
        return self._last - self.start


def retention_count(retention: float, n_visual: int) -> int:
    if retention * n_visual < 1:
        raise ConfigurationError(f"retention {retention} keeps no token out of {n_visual}", field="prune.retention")
    return min(n_visual, int(math.floor(retention * n_visual + 0.5)))


def topk_select(scores: ScoreVector, k: int, partition: Optional[SegmentPartition] = None,
                tokens: Optional[np.ndarray] = None) -> RegisterSet:
    """K highest scores, ties to the smaller index, grouped by segment in ascending index order."""
    n = len(scores.values)
    if not 1 <= k <= n:
        raise ShapeError(f"K={k} outside 1..{n}")
    order = np.lexsort((np.arange(n), -scores.values.astype(np.float64)))
    chosen = sorted(int(i) for i in order[:k])
    partition = partition or single_segment(n, 1)
    segments: List[List[RegisterEntry]] = [[] for _ in range(partition.n_segments)]
    for i in chosen:
        vector = None if tokens is None else tokens[i].astype(np.float64)
        segments[partition.segment_of(i)].append(RegisterEntry(index=i, vector=vector))
    return RegisterSet(segments=segments, stage="selected")


def _mean_of(tokens: np.ndarray, members: Sequence[int]) -> np.ndarray:
    return tokens[list(members)].astype(np.float64).mean(axis=0)


def prefilter(tokens: np.ndarray, segment: Tuple[int, int], registers: List[RegisterEntry],
              tau_filter: float, merge_rule: str = MERGE_MEAN) -> Tuple[List[RegisterEntry], List[int]]:
    """Absorbs segment non-registers whose best register similarity exceeds tau_filter.

    Similarities are taken against the registers' original vectors, so the
    outcome does not depend on scan order. Returns (registers, H'_nreg indices).
    """
    start, end = segment
    taken = {m for r in registers for m in r.members}
    candidates = [i for i in range(start, end) if i not in taken]
    if not registers or not candidates:
        return [copy.deepcopy(r) for r in registers], candidates
    sims = cosine_matrix(tokens[candidates], tokens[[r.index for r in registers]])
    best = np.argmax(sims, axis=1)
    updated = [copy.deepcopy(r) for r in registers]
    remaining = []
    for row, i in enumerate(candidates):
        if sims[row, best[row]] > tau_filter:
            updated[best[row]].absorbed.append(i)
        else:
            remaining.append(i)
    for entry in updated:
        entry.absorbed.sort()
        if merge_rule == MERGE_MEAN:
            entry.vector = _mean_of(tokens, entry.members)
        else:
            entry.vector = tokens[entry.index].astype(np.float64)
    return updated, remaining


def dedup(registers: List[RegisterEntry], tau_merge: float, merge_rule: str = MERGE_MEAN) -> List[RegisterEntry]:
    """Single left-to-right pivot scan over registers in ascending index order."""
    ordered = sorted(registers, key=lambda r: r.index)
    if not ordered:
        return []
    pivot = copy.deepcopy(ordered[0])
    survivors = [pivot]
    for entry in ordered[1:]:
        if cosine_sim(pivot.vector, entry.vector) > tau_merge:
            if merge_rule == MERGE_MEAN:
                n_p, n_e = len(pivot.members), len(entry.members)
                pivot.vector = (n_p * pivot.vector + n_e * entry.vector) / (n_p + n_e)
            pivot.absorbed = sorted(pivot.absorbed + entry.members)
        else:
            pivot = copy.deepcopy(entry)
            survivors.append(pivot)
    return survivors


def cluster_scan(tokens: np.ndarray, indices: Sequence[int], tau_cluster: float) -> ClusterSet:
    """Greedy sequential clustering against the running cluster mean."""
    result = ClusterSet()
    current: Optional[Cluster] = None
    for i in indices:
        if current is not None and cosine_sim(current.center, tokens[i]) > tau_cluster:
            current.members.append(i)
            current.center = _mean_of(tokens, current.members)
        else:
            current = Cluster(members=[i], center=tokens[i].astype(np.float64))
            result.clusters.append(current)
    return result


def diversity_score(center: np.ndarray, cluster_size: int, registers: Sequence[np.ndarray], beta: float) -> float:
    if len(registers) == 0:
        raise ShapeError("diversity needs at least one register")
    sims = cosine_matrix(np.asarray(center)[None, :], np.asarray(registers))[0]
    return float(1.0 - sims.mean() + beta * cluster_size)


def postfill(deduped: List[RegisterEntry], clusters: ClusterSet, target_count: int,
             beta: float) -> Tuple[List[RegisterEntry], int]:
    """Adds the most diverse cluster centers until target_count; returns (entries, shortfall)."""
    if target_count < len(deduped):
        raise ValueError(f"target {target_count} below deduplicated count {len(deduped)}")
    need = target_count - len(deduped)
    if need == 0 or not clusters.clusters:
        return sorted(deduped, key=lambda e: e.index), need
    reps = [e.vector for e in deduped]
    clusters.diversity = [diversity_score(c.center, c.size, reps, beta) for c in clusters.clusters]
    ranked = sorted(range(len(clusters.clusters)),
                    key=lambda k: (-clusters.diversity[k], clusters.clusters[k].members[0]))
    filled = list(deduped)
    for k in ranked[:need]:
        cluster = clusters.clusters[k]
        filled.append(RegisterEntry(index=cluster.members[0], vector=cluster.center,
                                    absorbed=list(cluster.members[1:]), source="cluster"))
    return sorted(filled, key=lambda e: e.index), target_count - len(filled)


def _map_segments(fn: Callable, items: Sequence, workers: int) -> List:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def refine_segments(tokens: np.ndarray, partition: SegmentPartition, selected: RegisterSet,
                    config: PruneConfig, stats: StageStats,
                    timer: Optional[StageTimer] = None) -> List[RegisterEntry]:
    """Pre-filter, dedup and post-fill inside every segment; stages run one after another."""
    timer = timer or StageTimer()
    segs = list(range(partition.n_segments))

    def _prefilter(s):
        return prefilter(tokens, partition.segments[s], selected.segments[s], config.tau_filter, config.merge_rule)

    filtered = _map_segments(_prefilter, segs, config.workers)
    stats.counts["prefiltered"] = [len(regs) for regs, _ in filtered]
    timer.lap("filter")

    deduped = _map_segments(lambda s: dedup(filtered[s][0], config.tau_merge, config.merge_rule), segs, config.workers)
    stats.counts["deduped"] = [len(d) for d in deduped]
    timer.lap("dedup")

    def _fill(s):
        clusters = cluster_scan(tokens, filtered[s][1], config.tau_cluster)
        return postfill(deduped[s], clusters, len(selected.segments[s]), config.beta)

    filled = _map_segments(_fill, segs, config.workers)
    stats.counts["filled"] = [len(entries) for entries, _ in filled]
    stats.shortfall = [short for _, short in filled]
    timer.lap("fill")
    for s, short in enumerate(stats.shortfall):
        if short:
            logger.debug(f"Segment {s}: post-fill shortfall of {short} (clusters exhausted)")
    return sorted((e for entries, _ in filled for e in entries), key=lambda e: e.index)


def forward_retained(result: PruneResult, weights: ModelWeights, start_layer: int) -> np.ndarray:
    """Remaining layers under plain causal masking; tokens keep their original RoPE positions."""
    hidden, positions = result.retained_sequence()
    stop = weights.config.num_layers
    if start_layer > stop:
        return hidden
    masks = [causal_mask(len(hidden))] * (stop - start_layer + 1)
    return forward_layers(hidden, positions, weights, masks, start_layer, stop).hidden


def prune_pipeline(seq: TokenSequence, weights: ModelWeights, config: PruneConfig,
                   store: Optional[ProfileStore] = None, forward: bool = True,
                   pruner_id: str = "sharp") -> PruneResult:
    config.validate(weights.config.num_layers)
    timer = StageTimer()
    n_v = seq.n_visual
    k = retention_count(config.retention, n_v)
    layer = config.prune_layer

    if config.use_segmask:
        partition = detect_boundaries(frame_pool(seq), config.tau_seg, seq.tokens_per_frame)
        mask = build_segment_mask(partition, seq.n_text)
    else:
        partition = single_segment(seq.frames, seq.tokens_per_frame)
        mask = causal_mask(seq.length)
    masks = [mask] * layer
    trace = forward_layers(seq.hidden(), np.arange(seq.length), weights, masks, 1, layer,
                           capture_layer=layer, n_visual=n_v)
    raw = trace.scores
    scores = raw
    if config.use_debias:
        layout = ProfileLayout(seq.frames, seq.tokens_per_frame, seq.n_text, layer)
        profile = (store or ProfileStore()).get(weights, layout, masks)
        scores = debias(raw, profile, config.lam, layout)

    tokens = trace.hidden[:n_v]
    selected = topk_select(scores, k, partition, tokens)
    stats = StageStats(counts={"selected": selected.counts()})
    timer.lap("attn")
    logger.debug(f"[{pruner_id}] N_v={n_v} K={k} segments={partition.n_segments} layer={layer}")

    if config.use_dedup:
        entries = refine_segments(tokens, partition, selected, config, stats, timer)
    else:
        entries = selected.entries()
        for stage in STAGES[1:]:
            stats.counts[stage] = selected.counts()
        stats.shortfall = [0] * partition.n_segments
        for stage in ("filter", "dedup", "fill"):
            timer.lap(stage)

    result = PruneResult(pruner=pruner_id, n_visual=n_v, requested_retention=config.retention,
                         entries=sorted(entries, key=lambda e: e.index), text=trace.hidden[n_v:],
                         stats=stats, partition=partition, raw_scores=raw, scores=scores)
    if forward:
        result.hidden = forward_retained(result, weights, layer + 1)
    timer.lap("forward")
    result.timings = dict(timer.laps, total=timer.total)
    return result


def stats_to_csv(result: PruneResult, stream: TextIO):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["stage", "segment_id", "count"])
    for stage in STAGES:
        for seg_id, count in enumerate(result.stats.counts.get(stage, [])):
            writer.writerow([stage, seg_id, count])
    writer.writerow(["achieved_retention", "all", f"{result.achieved_retention:.6f}"])
