import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, TextIO

from errors import ConfigurationError, UnreachableBudgetError

logger = logging.getLogger(__name__)

TERA = 1e12


@dataclass(frozen=True)
class FlopsModelParams:
    hidden: int
    ffn: int
    layers: int
    prune_layer: int = 1

    def validate(self):
        for name in ("hidden", "ffn", "layers", "prune_layer"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"must be positive, got {getattr(self, name)}", field=f"flops.{name}")
        if self.prune_layer > self.layers:
            raise ConfigurationError(f"prune_layer {self.prune_layer} exceeds {self.layers} layers",
                                     field="flops.prune_layer")


# 7B language-model dimensions; both presets share the same decoder and differ in visual token count.
PRESETS: Dict[str, FlopsModelParams] = {
    "qwen2-vl-7b": FlopsModelParams(hidden=3584, ffn=18944, layers=28, prune_layer=1),
    "llava-ov-7b": FlopsModelParams(hidden=3584, ffn=18944, layers=28, prune_layer=1),
}
PRESET_VISUAL_TOKENS: Dict[str, int] = {
    "qwen2-vl-7b": 2880,
    "llava-ov-7b": 6272,
}
DEFAULT_PRESET = "llava-ov-7b"

TABLE_RETENTIONS = (1.0, 0.282, 0.235, 0.188, 0.140)
OVERHEAD_STAGES = ("filter", "dedup", "fill", "bias")


@dataclass
class FlopsReport:
    n_visual: int
    retention: float
    retained_tokens: int
    total: float
    full: float
    layer_before: float  # one layer at n = N_v
    layer_after: float  # one layer at the retained count
    overhead: Dict[str, float] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.total / self.full

    @property
    def achieved_retention(self) -> float:
        return self.retained_tokens / self.n_visual

    @property
    def total_tflops(self) -> float:
        return self.total / TERA


def retained_count(n_visual: int, retention: float) -> int:
    return int(math.floor(retention * n_visual + 0.5))


def layer_flops(n: int, params: FlopsModelParams) -> float:
    """4nd^2 projections, 2n^2d scores and weighted values, 2ndm feed-forward."""
    d, m = params.hidden, params.ffn
    return float(4 * n * d * d + 2 * n * n * d + 2 * n * d * m)


def prefill_flops(n_visual: int, params: FlopsModelParams, retention: float = 1.0) -> FlopsReport:
    if not 0.0 < retention <= 1.0:
        raise ConfigurationError(f"must lie in (0, 1], got {retention}", field="prune.retention")
    params.validate()
    kept = retained_count(n_visual, retention)
    before, after = layer_flops(n_visual, params), layer_flops(kept, params)
    ell = params.prune_layer
    total = ell * before + (params.layers - ell) * after
    return FlopsReport(n_visual=n_visual, retention=retention, retained_tokens=kept, total=total,
                       full=params.layers * before, layer_before=before, layer_after=after)


def retention_for_budget(target: float, n_visual: int, params: FlopsModelParams) -> float:
    """Inverse of prefill_flops: the retention whose budget is `target` FLOPs."""
    params.validate()
    before = layer_flops(n_visual, params)
    ell, rest = params.prune_layer, params.layers - params.prune_layer
    full = params.layers * before
    floor_budget = ell * before + rest * layer_flops(1, params)
    if rest == 0:
        if math.isclose(target, full, rel_tol=1e-12):
            return 1.0
        raise UnreachableBudgetError(f"no pruning happens after layer {ell}; only {full:.4g} FLOPs is reachable")
    if not floor_budget * (1 - 1e-12) <= target <= full * (1 + 1e-12):
        raise UnreachableBudgetError(
            f"target {target:.4g} FLOPs outside [{floor_budget:.4g}, {full:.4g}] for N_v={n_visual}")
    per_layer = (target - ell * before) / rest
    d, m = params.hidden, params.ffn
    a, b = 2.0 * d, 4.0 * d * d + 2.0 * d * m
    n = (-b + math.sqrt(b * b + 4.0 * a * per_layer)) / (2.0 * a)
    return min(1.0, n / n_visual)


def refinement_overhead_flops(segment_sizes: Sequence[int], selected: Sequence[int], hidden: int) -> Dict[str, float]:
    """Upper bound on the cosine-similarity work of the per-segment refinement steps.

    One similarity costs 2*hidden FLOPs. Pre-filter compares each non-register with
    every register, dedup compares adjacent registers, the cluster scan compares each
    remaining token once and diversity scores every cluster center against every register.
    """
    sim = 2.0 * hidden
    overhead = {"filter": 0.0, "dedup": 0.0, "fill": 0.0}
    for n, k in zip(segment_sizes, selected):
        rest = n - k
        overhead["filter"] += sim * rest * k
        overhead["dedup"] += sim * max(k - 1, 0)
        overhead["fill"] += sim * rest * (1 + k)
    return overhead


def bias_estimation_flops(n_visual: int, n_text: int, params: FlopsModelParams) -> float:
    # One homogeneous prefill up to the prune layer, text tokens included.
    return params.prune_layer * layer_flops(n_visual + n_text, params)


def table_rows(n_visual: int, params: FlopsModelParams,
               retentions: Iterable[float] = TABLE_RETENTIONS) -> List[FlopsReport]:
    rows = [prefill_flops(n_visual, params, r) for r in retentions]
    for row in rows:
        logger.debug(f"N_v={n_visual} R={row.retention:.3f} -> {row.total_tflops:.3f} TFLOPs")
    return rows


def report_to_csv(reports: Iterable[FlopsReport], stream: TextIO, overhead: Optional[Dict[str, float]] = None,
                  labels: Optional[Sequence[Dict[str, object]]] = None):
    """One row per report; overhead is written per stage in TFLOPs, never folded into total_tflops.

    `labels`, when given, holds one dict per report whose values lead each row.
    """
    reports = list(reports)
    label_keys = list(labels[0]) if labels else []
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(label_keys + ["retention", "retained_tokens", "total_tflops", "ratio"]
                    + [f"overhead_{stage}_tflops" for stage in OVERHEAD_STAGES])
    for i, report in enumerate(reports):
        extra = overhead if overhead is not None else report.overhead
        writer.writerow([labels[i][k] for k in label_keys] + [
            f"{report.retention:.4f}",
            report.retained_tokens,
            f"{report.total_tflops:.4f}",
            f"{report.ratio:.4f}",
        ] + [f"{extra.get(stage, 0.0) / TERA:.6g}" for stage in OVERHEAD_STAGES])
