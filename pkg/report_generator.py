import csv
import logging
import math
import os
from typing import Any, Dict, Iterable, Mapping, Sequence

from jinja2 import Environment, FileSystemLoader

logger = logging.getLogger(__name__)

# Bump when a column is added, removed or reordered.
SCHEMA_VERSION = 1
METRIC_COLUMNS = [
    "trial", "pruner", "weight_seed", "data_seed", "n_visual", "retention_requested",
    "retention_achieved", "needle_retention", "segment_coverage", "end_bias", "flops_ratio", "shortfall",
]
TIMING_COLUMNS = ["trial", "pruner", "attn", "filter", "dedup", "fill", "forward", "total"]
SCORE_COLUMNS = ["pruner", "position", "frame", "raw_score", "debiased_score", "retained"]
# Metric columns averaged into the mean/std rows.
AGGREGATE_COLUMNS = [
    "retention_requested", "retention_achieved", "needle_retention", "segment_coverage",
    "end_bias", "flops_ratio", "shortfall",
]

TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")


def format_value(value: Any) -> str:
    """Fixed formatting so that identical runs produce identical bytes."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def write_rows(path: str, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> int:
    count = 0
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(c)) for c in columns])
            count += 1
    logger.info(f"Wrote {count} rows to {path}")
    return count


def write_metrics_csv(path: str, rows: Iterable[Mapping[str, Any]]) -> int:
    return write_rows(path, METRIC_COLUMNS, rows)


def write_timings_csv(path: str, rows: Iterable[Mapping[str, Any]]) -> int:
    return write_rows(path, TIMING_COLUMNS, rows)


def write_scores_csv(path: str, rows: Iterable[Mapping[str, Any]]) -> int:
    return write_rows(path, SCORE_COLUMNS, rows)


def render_summary(context: Dict[str, Any], template_name: str = "summary.md.j2") -> str:
    env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), keep_trailing_newline=True,
                      trim_blocks=True, lstrip_blocks=True)
    env.filters["fmt"] = format_value
    return env.get_template(template_name).render(schema_version=SCHEMA_VERSION, **context)


def write_summary(path: str, context: Dict[str, Any]) -> str:
    text = render_summary(context)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    logger.info(f"Wrote summary to {path}")
    return text

