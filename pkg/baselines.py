import enum
import logging
from typing import Optional, Sequence

import numpy as np

from attention_core import ModelWeights, TokenSequence, causal_mask, forward_layers
from regdedup import (
    STAGES,
    PruneConfig,
    PruneResult,
    RegisterEntry,
    StageStats,
    StageTimer,
    forward_retained,
    prune_pipeline,
    retention_count,
)
from segmask import single_segment

logger = logging.getLogger(__name__)


class BaselineKind(enum.Enum):
    RAW_TOPK = "raw-attention-topk"
    UNIFORM = "uniform"
    RANDOM = "random"


def prune_raw_topk(seq: TokenSequence, weights: ModelWeights, retention: float,
                   prune_layer: Optional[int] = None, forward: bool = True) -> PruneResult:
    """FastV-style pruning: plain causal mask, raw logits, no refinement."""
    config = PruneConfig(retention=retention, prune_layer=prune_layer or weights.config.prune_layer,
                         use_segmask=False, use_debias=False, use_dedup=False)
    return prune_pipeline(seq, weights, config, forward=forward, pruner_id="fastv")


def _index_result(seq: TokenSequence, indices: Sequence[int], pruner: str, retention: float,
                  weights: Optional[ModelWeights], prune_layer: Optional[int], timer: StageTimer) -> PruneResult:
    n_v = seq.n_visual
    layer = prune_layer or (weights.config.prune_layer if weights is not None else 1)
    if weights is not None:
        hidden = forward_layers(seq.hidden(), np.arange(seq.length), weights,
                                [causal_mask(seq.length)] * layer, 1, layer).hidden
    else:
        hidden = seq.hidden()
    timer.lap("attn")
    entries = [RegisterEntry(index=int(i), vector=hidden[int(i)].astype(np.float64)) for i in sorted(indices)]
    counts = [len(entries)]
    stats = StageStats(counts={stage: list(counts) for stage in STAGES}, shortfall=[0])
    for stage in ("filter", "dedup", "fill"):
        timer.lap(stage)
    result = PruneResult(pruner=pruner, n_visual=n_v, requested_retention=retention, entries=entries,
                         text=hidden[n_v:], stats=stats,
                         partition=single_segment(seq.frames, seq.tokens_per_frame))
    if weights is not None:
        result.hidden = forward_retained(result, weights, layer + 1)
    timer.lap("forward")
    result.timings = dict(timer.laps, total=timer.total)
    return result


def prune_uniform(seq: TokenSequence, retention: float, weights: Optional[ModelWeights] = None,
                  prune_layer: Optional[int] = None) -> PruneResult:
    timer = StageTimer()
    n_v = seq.n_visual
    k = retention_count(retention, n_v)
    indices = [(i * n_v) // k for i in range(k)]
    return _index_result(seq, indices, "uniform", retention, weights, prune_layer, timer)


def prune_random(seq: TokenSequence, retention: float, seed: int, weights: Optional[ModelWeights] = None,
                 prune_layer: Optional[int] = None) -> PruneResult:
    timer = StageTimer()
    k = retention_count(retention, seq.n_visual)
    rng = np.random.default_rng(seed)
    indices = rng.choice(seq.n_visual, size=k, replace=False)
    logger.debug(f"Random baseline seed={seed} kept {k}/{seq.n_visual}")
    return _index_result(seq, indices, "random", retention, weights, prune_layer, timer)
