import argparse
import concurrent.futures
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

import report_generator
from attention_core import ModelWeights, TokenSequence, init_model, key_preimage_direction
from baselines import BaselineKind, prune_random, prune_raw_topk, prune_uniform
from config_loader import ExperimentConfig, PrunerSpec, load_config
from errors import ConfigurationError
from flops import (
    DEFAULT_PRESET,
    PRESET_VISUAL_TOKENS,
    PRESETS,
    FlopsModelParams,
    FlopsReport,
    bias_estimation_flops,
    prefill_flops,
    refinement_overhead_flops,
    report_to_csv,
    retention_for_budget,
    table_rows,
)
from poscalib import ProfileStore
from regdedup import PruneConfig, PruneResult, prune_pipeline, stats_to_csv
from segmask import SegmentPartition, build_segment_mask, partition_to_csv, single_segment
from validator import validate_partition, validate_result, validate_segment_mask
from videogen import dump_sequence, generate, homogeneous, load_sequence, plant_needle

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
DEFAULT_OUTPUT_DIR = "results"
NEEDLE_STREAM = 0x4E44


@dataclass
class MetricsRow:
    trial: str
    pruner: str
    weight_seed: Optional[int]
    data_seed: Optional[int]
    n_visual: Optional[int]
    retention_requested: float
    retention_achieved: float
    needle_retention: float
    segment_coverage: float
    end_bias: float
    flops_ratio: float
    shortfall: float


@dataclass
class TrialOutcome:
    trial: int
    metrics: List[MetricsRow] = field(default_factory=list)
    timings: List[dict] = field(default_factory=list)
    scores: List[dict] = field(default_factory=list)
    flops: List[Tuple[dict, FlopsReport]] = field(default_factory=list)
    issues: List[str] = field(default_factory=list)
    sequence: Optional[TokenSequence] = None
    inspected: Optional[PruneResult] = None


@dataclass
class ExperimentOutcome:
    rows: List[MetricsRow]  # trial rows, then mean/std rows per pruner
    timings: List[dict]
    scores: List[dict]
    issues: List[str]
    win_rates: List[dict]
    flops: List[Tuple[dict, FlopsReport]] = field(default_factory=list)
    first_sequence: Optional[TokenSequence] = None
    inspected: Optional[PruneResult] = None


def needle_retention(result: PruneResult, planted: Sequence[int]) -> float:
    """Fraction of planted indices kept as a pivot or absorbed into a kept entry; 1.0 when none were planted."""
    if not planted:
        return 1.0
    kept = result.index_map
    return sum(1 for i in planted if i in kept) / len(planted)


def bias_concentration(result: PruneResult) -> float:
    """End-bias index: median retained original index over N_v."""
    if not result.entries:
        raise ValueError("bias concentration needs at least one retained token")
    return float(np.median(result.retained_indices)) / result.n_visual


def segment_coverage(result: PruneResult, truth: Optional[SegmentPartition]) -> float:
    if truth is None:
        return math.nan
    hit = {truth.segment_of(i) for i in result.retained_indices}
    return len(hit) / truth.n_segments


def paired_win_rate(rows: Sequence[MetricsRow], a: str, b: str, metric: str,
                    lower_is_better: bool = False) -> float:
    """Share of trials in which pruner `a` strictly beats pruner `b` on `metric`."""
    by_trial: Dict[str, Dict[str, float]] = {}
    for row in rows:
        if row.trial in ("mean", "std"):
            continue
        by_trial.setdefault(row.trial, {})[row.pruner] = getattr(row, metric)
    pairs = [(v[a], v[b]) for v in by_trial.values() if a in v and b in v]
    if not pairs:
        return math.nan
    wins = sum(1 for x, y in pairs if (x < y if lower_is_better else x > y))
    return wins / len(pairs)


def flops_params(config: ExperimentConfig) -> FlopsModelParams:
    model = config.model
    return FlopsModelParams(hidden=model.hidden_dim, ffn=model.ffn_dim, layers=model.num_layers,
                            prune_layer=config.prune.prune_layer)


def needle_positions(seq: TokenSequence, count: int, seed: int) -> List[int]:
    """`count` distinct visual slots drawn from the middle frames (F/4 <= frame < 3F/4)."""
    if count == 0:
        return []
    f, p = seq.frames, seq.tokens_per_frame
    frames = range(f // 4, max(f // 4 + 1, (3 * f) // 4))
    candidates = [fr * p + s for fr in frames for s in range(p)]
    if count > len(candidates):
        raise ConfigurationError(f"{count} needles do not fit in {len(candidates)} middle-frame slots",
                                 field="data.needles")
    rng = np.random.default_rng((seed, NEEDLE_STREAM))
    return sorted(int(i) for i in rng.choice(candidates, size=count, replace=False))


def build_sequence(config: ExperimentConfig, seed: int, weights: ModelWeights,
                   loaded: Optional[TokenSequence] = None) -> Tuple[TokenSequence, Optional[SegmentPartition]]:
    data = config.data
    if data.source == "file":
        seq, truth = loaded, None
    elif data.source == "homogeneous":
        seq = homogeneous(data.frames, data.tokens_per_frame, data.text_len, config.model)
        truth = single_segment(data.frames, data.tokens_per_frame)
    else:
        seq, truth = generate(data.synthetic_spec(seed), config.model)
    if seq.hidden_dim != config.model.hidden_dim:
        raise ConfigurationError(f"sequence has d={seq.hidden_dim}, model has d={config.model.hidden_dim}",
                                 field="model.hidden_dim")
    rng = np.random.default_rng((seed, NEEDLE_STREAM, 1))
    for pos in needle_positions(seq, data.needles, seed):
        if data.align_needles:
            direction = key_preimage_direction(weights, seq, pos)
        else:
            direction = rng.standard_normal(seq.hidden_dim)
        seq = plant_needle(seq, [pos], direction, strength=data.needle_strength)
    return seq, truth


def run_pruner(spec: PrunerSpec, seq: TokenSequence, weights: ModelWeights, prune: PruneConfig,
               seed: int, store: ProfileStore) -> PruneResult:
    layer = prune.prune_layer
    if spec.baseline is BaselineKind.RAW_TOPK:
        return prune_raw_topk(seq, weights, prune.retention, prune_layer=layer)
    if spec.baseline is BaselineKind.UNIFORM:
        return prune_uniform(seq, prune.retention, weights=weights, prune_layer=layer)
    if spec.baseline is BaselineKind.RANDOM:
        return prune_random(seq, prune.retention, seed, weights=weights, prune_layer=layer)
    return prune_pipeline(seq, weights, spec.prune_config(prune), store=store, pruner_id=spec.name)


def check_result(spec: PrunerSpec, result: PruneResult, seq: TokenSequence) -> List[str]:
    issues = validate_result(result) + validate_partition(result.partition, seq.n_visual)
    if "segm" in spec.components:
        issues += validate_segment_mask(build_segment_mask(result.partition, seq.n_text), result.partition)
    return issues


def pruner_overhead(spec: PrunerSpec, result: PruneResult, seq: TokenSequence,
                    params: FlopsModelParams) -> Dict[str, float]:
    """Similarity and bias-estimation FLOPs on top of the prefill budget; empty for baselines."""
    overhead: Dict[str, float] = {}
    if "regd" in spec.components:
        sizes = [end - start for start, end in result.partition.segments]
        overhead.update(refinement_overhead_flops(sizes, result.stats.counts["selected"], params.hidden))
    if "posc" in spec.components:
        overhead["bias"] = bias_estimation_flops(seq.n_visual, seq.n_text, params)
    return overhead


def _score_rows(result: PruneResult, seq: TokenSequence) -> List[dict]:
    kept = set(result.retained_indices)
    raw = result.raw_scores.values if result.raw_scores is not None else None
    ranked = result.scores.values if result.scores is not None else None
    frames = seq.frame_of
    return [{
        "pruner": result.pruner,
        "position": i,
        "frame": int(frames[i]),
        "raw_score": float(raw[i]) if raw is not None else math.nan,
        "debiased_score": float(ranked[i]) if ranked is not None else math.nan,
        "retained": i in kept,
    } for i in range(result.n_visual)]


def run_trial(config: ExperimentConfig, trial: int, weights: ModelWeights, store: ProfileStore,
              loaded: Optional[TokenSequence] = None) -> TrialOutcome:
    seed = config.data.data_seed + trial
    seq, truth = build_sequence(config, seed, weights, loaded)
    outcome = TrialOutcome(trial=trial, sequence=seq)
    params = flops_params(config)
    inspected_is_baseline = True
    for spec in config.pruner_specs():
        result = run_pruner(spec, seq, weights, config.prune, seed, store)
        for issue in check_result(spec, result, seq):
            logger.warning(f"[trial {trial} {spec.name}] {issue}")
            outcome.issues.append(f"trial {trial} {spec.name}: {issue}")
        report = prefill_flops(seq.n_visual, params, result.achieved_retention)
        report.overhead = pruner_overhead(spec, result, seq, params)
        outcome.flops.append(({"trial": trial, "pruner": spec.name}, report))
        # Trial 0's partition and stage counts go to disk; prefer a pipeline variant over a baseline.
        if trial == 0 and (outcome.inspected is None or (inspected_is_baseline and spec.baseline is None)):
            outcome.inspected, inspected_is_baseline = result, spec.baseline is not None
        outcome.metrics.append(MetricsRow(
            trial=str(trial),
            pruner=spec.name,
            weight_seed=config.model.weight_seed,
            data_seed=seed,
            n_visual=seq.n_visual,
            retention_requested=config.prune.retention,
            retention_achieved=result.achieved_retention,
            needle_retention=needle_retention(result, seq.planted),
            segment_coverage=segment_coverage(result, truth),
            end_bias=bias_concentration(result),
            flops_ratio=report.ratio,
            shortfall=float(sum(result.stats.shortfall)),
        ))
        outcome.timings.append(dict(result.timings, trial=trial, pruner=spec.name))
        if trial == 0:
            outcome.scores.extend(_score_rows(result, seq))
    logger.info(f"Trial {trial} done: N_v={seq.n_visual} planted={len(seq.planted)}")
    return outcome


def _nan_stats(values: List[float]) -> Tuple[float, float]:
    clean = [v for v in values if not math.isnan(v)]
    if not clean:
        return math.nan, math.nan
    return float(np.mean(clean)), float(np.std(clean))


def aggregate_rows(rows: Sequence[MetricsRow], pruners: Sequence[str]) -> List[MetricsRow]:
    out = []
    for pruner in pruners:
        mine = [r for r in rows if r.pruner == pruner]
        stats = {c: _nan_stats([getattr(r, c) for r in mine]) for c in report_generator.AGGREGATE_COLUMNS}
        for label, which in (("mean", 0), ("std", 1)):
            out.append(MetricsRow(trial=label, pruner=pruner, weight_seed=mine[0].weight_seed if mine else None,
                                  data_seed=None, n_visual=None,
                                  **{c: stats[c][which] for c in report_generator.AGGREGATE_COLUMNS}))
    return out


def compute_win_rates(rows: Sequence[MetricsRow], pruners: Sequence[str]) -> List[dict]:
    """Every sharp variant against every baseline on needle retention and end bias."""
    ours = [p for p in pruners if p.startswith("sharp")]
    others = [p for p in pruners if not p.startswith("sharp")]
    rates = []
    for a in ours:
        for b in others:
            rates.append({"a": a, "b": b, "metric": "needle_retention",
                          "rate": paired_win_rate(rows, a, b, "needle_retention")})
            rates.append({"a": a, "b": b, "metric": "end_bias",
                          "rate": paired_win_rate(rows, a, b, "end_bias", lower_is_better=True)})
    return rates


def run_experiment(config: ExperimentConfig, store: Optional[ProfileStore] = None) -> ExperimentOutcome:
    config.validate()
    weights = init_model(config.model)
    store = store or ProfileStore(config.profile_cache or None)
    loaded = load_sequence(config.data.path) if config.data.source == "file" else None
    outcomes: Dict[int, TrialOutcome] = {}
    if config.workers > 1 and config.trials > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.workers) as executor:
            future_to_trial = {
                executor.submit(run_trial, config, t, weights, store, loaded): t for t in range(config.trials)
            }
            for future in concurrent.futures.as_completed(future_to_trial):
                trial = future_to_trial[future]
                try:
                    outcomes[trial] = future.result()
                except Exception as e:
                    logger.error(f"Trial {trial} failed: {e}")
                    raise
    else:
        for t in range(config.trials):
            outcomes[t] = run_trial(config, t, weights, store, loaded)

    ordered = [outcomes[t] for t in sorted(outcomes)]
    pruners = [spec.name for spec in config.pruner_specs()]
    rows = [m for o in ordered for m in o.metrics]
    return ExperimentOutcome(
        rows=rows + aggregate_rows(rows, pruners),
        timings=[t for o in ordered for t in o.timings],
        scores=[s for o in ordered for s in o.scores],
        issues=[i for o in ordered for i in o.issues],
        win_rates=compute_win_rates(rows, pruners),
        flops=[f for o in ordered for f in o.flops],
        first_sequence=ordered[0].sequence if ordered else None,
        inspected=ordered[0].inspected if ordered else None,
    )


def write_outputs(outcome: ExperimentOutcome, config: ExperimentConfig, out_dir: str) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    names = ("metrics.csv", "timings.csv", "scores.csv", "flops.csv", "partition.csv", "stats.csv", "summary.md")
    paths = {name: os.path.join(out_dir, name) for name in names}
    report_generator.write_metrics_csv(paths["metrics.csv"], (dataclasses.asdict(r) for r in outcome.rows))
    report_generator.write_timings_csv(paths["timings.csv"], outcome.timings)
    report_generator.write_scores_csv(paths["scores.csv"], outcome.scores)
    with open(paths["flops.csv"], "w", encoding="utf-8", newline="") as f:
        report_to_csv([r for _, r in outcome.flops], f, labels=[label for label, _ in outcome.flops])
    if outcome.inspected is not None:
        with open(paths["partition.csv"], "w", encoding="utf-8", newline="") as f:
            partition_to_csv(outcome.inspected.partition, f)
        with open(paths["stats.csv"], "w", encoding="utf-8", newline="") as f:
            stats_to_csv(outcome.inspected, f)
    else:
        del paths["partition.csv"], paths["stats.csv"]
    report_generator.write_summary(paths["summary.md"], {
        "model": config.model,
        "data": config.data,
        "prune": config.prune,
        "trials": config.trials,
        "means": [r for r in outcome.rows if r.trial == "mean"],
        "win_rates": outcome.win_rates,
        "issues": outcome.issues,
    })
    if config.plots:
        try:
            import plots
            for path in plots.emit_plots(paths["scores.csv"], out_dir):
                paths[os.path.basename(path)] = path
        except Exception as e:
            logger.warning(f"Plotting failed, CSV outputs are unaffected: {e}")
    return paths


def resolve_output_dir(cli_value: Optional[str], config: ExperimentConfig) -> str:
    return cli_value or config.output_dir or os.getenv("SHARP_OUTPUT_DIR") or DEFAULT_OUTPUT_DIR


def cmd_run(args) -> int:
    overrides = {
        "run.pruner": args.pruner,
        "prune.retention": args.retention,
        "run.trials": args.trials,
        "run.plots": True if args.plots else None,
    }
    if args.load_seq:
        overrides.update({"data.source": "file", "data.path": args.load_seq})
    config = load_config(args.config, overrides)
    out_dir = resolve_output_dir(args.out, config)
    outcome = run_experiment(config)
    if args.dump_seq and outcome.first_sequence is not None:
        dump_sequence(outcome.first_sequence, args.dump_seq)
    paths = write_outputs(outcome, config, out_dir)
    logger.info(f"Run complete: {len(outcome.rows)} metric rows in {paths['metrics.csv']}")
    return EXIT_OK


def cmd_flops(args) -> int:
    params = PRESETS[args.preset]
    n_visual = args.n_visual or PRESET_VISUAL_TOKENS[args.preset]
    if args.prune_layer is not None:
        params = dataclasses.replace(params, prune_layer=args.prune_layer)
    if args.budget is not None:
        r = retention_for_budget(args.budget * 1e12, n_visual, params)
        print(f"R={r:.4f} ({round(r * n_visual)} of {n_visual} tokens) for {args.budget} TFLOPs")
        return EXIT_OK
    if args.retention:
        reports = table_rows(n_visual, params, args.retention)
    else:
        reports = table_rows(n_visual, params)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            report_to_csv(reports, f)
        logger.info(f"Wrote FLOPs table to {args.out}")
    else:
        report_to_csv(reports, sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="Enable debug logging")

    parser = argparse.ArgumentParser(description="Shallow-layer visual-token pruning experiments on a toy decoder.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="Run a pruning experiment from a config file")
    run.add_argument("--config", required=True, help="Path to the experiment config (dotted keys)")
    run.add_argument("--out", help="Output directory (default: run.output_dir, then $SHARP_OUTPUT_DIR)")
    run.add_argument("--pruner", help="Comma-separated pruner ids, e.g. 'sharp,fastv' or 'sharp:segm+regd'")
    run.add_argument("--retention", type=float, help="Retention ratio R in (0, 1]")
    run.add_argument("--trials", type=int, help="Number of seeded trials")
    run.add_argument("--dump-seq", help="Write the first trial's sequence to this binary file")
    run.add_argument("--load-seq", help="Read the visual/text sequence from this binary file")
    run.add_argument("--plots", action="store_true", help="Also render PNG plots from scores.csv")
    run.set_defaults(handler=cmd_run)

    flops = sub.add_parser("flops", parents=[common], help="Print the prefill FLOPs budget table")
    flops.add_argument("--preset", choices=sorted(PRESETS), default=DEFAULT_PRESET)
    flops.add_argument("--n-visual", type=int, help="Visual token count before pruning (default: the preset's)")
    flops.add_argument("--prune-layer", type=int, help="Override the preset's prune layer")
    flops.add_argument("--retention", type=float, nargs="*", help="Retention ratios to tabulate")
    flops.add_argument("--budget", type=float, help="Solve for the retention matching this many TFLOPs")
    flops.add_argument("--out", help="CSV path (default: stdout)")
    flops.set_defaults(handler=cmd_flops)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        return args.handler(args)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"Run failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
