"""Missing-view evaluation protocol: suites, reports, and overhead probes.

A suite is a list of named mask settings.  Each setting is evaluated by
streaming every scene through the model with that setting's mask plan
resolved per sample, accumulating one confusion matrix, and summarizing
it as a report row.  Metric values are deterministic given the model and
seeds; wall-clock and memory figures are measured but kept out of the
default renderings so report files stay byte-stable across reruns.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np
import psutil

from .errors import ParameterError
from .metrics import (
    ConfusionAccumulator,
    geometric_defined,
    geometric_iou,
    miou,
    per_class_iou,
)
from .rings import RING_NAMES_6, MaskPlan, resolve_mask
from .scenes import CLASS_NAMES, N_SEMANTIC

SUITES = ("standard", "single-view", "dropout")
DROPOUT_COUNTS = (1, 3, 5)
REPORT_FORMATS = ("text", "csv", "json")


def view_label(index: int) -> str:
    return RING_NAMES_6[index].replace("_", " ").title()


@dataclass
class ProtocolReport:
    """Aggregated evaluation of one (setting, method) pair."""

    setting: str
    method: str
    n_samples: int
    geometric_iou: float
    geometric_defined: bool
    miou: float  # None when every class is undefined
    class_ious: list  # length K, None entries where undefined
    latency_ms_median: float
    latency_ms_p95: float
    peak_rss_mb: float
    decoder_invocations: int


def _settings_for(suite: str, seed: int, ks=DROPOUT_COUNTS) -> list:
    if suite == "standard":
        return [("standard", MaskPlan.deterministic([]))]
    if suite == "single-view":
        return [(view_label(v), MaskPlan.deterministic([v])) for v in range(6)]
    if suite == "dropout":
        for k in ks:
            if not 1 <= int(k) <= 5:
                raise ParameterError(f"dropout count {k} must lie in 1..5")
        return [(f"k={k}", MaskPlan.stochastic(k=int(k), seed=seed + int(k))) for k in ks]
    raise ParameterError(f"unknown suite {suite!r}; expected one of {SUITES}")


def _evaluate_setting(state, scenes, setting: str, plan: MaskPlan, method: str) -> ProtocolReport:
    acc = ConfusionAccumulator(N_SEMANTIC + 1)
    latencies = []
    rss_peak = 0
    proc = psutil.Process()
    calls_before = state.decoder.invocations if state.decoder is not None else 0
    for sample in scenes:
        masked = resolve_mask(plan, sample.sample_id)
        t0 = time.perf_counter()
        pred = state.infer(sample.images, masked)
        latencies.append((time.perf_counter() - t0) * 1000.0)
        acc.update(pred.astype(np.int64), sample.grid.labels.astype(np.int64))
        rss_peak = max(rss_peak, proc.memory_info().rss)
    calls = (state.decoder.invocations if state.decoder is not None else 0) - calls_before
    lat = np.sort(np.asarray(latencies))
    return ProtocolReport(
        setting=setting,
        method=method,
        n_samples=len(scenes),
        geometric_iou=geometric_iou(acc),
        geometric_defined=geometric_defined(acc),
        miou=miou(acc),
        class_ious=per_class_iou(acc)[1:],
        latency_ms_median=float(np.median(lat)),
        latency_ms_p95=float(lat[min(len(lat) - 1, int(round(0.95 * (len(lat) - 1))))]),
        peak_rss_mb=rss_peak / 2**20,
        decoder_invocations=int(calls),
    )


def run_protocol(state, scenes, suite: str, seed: int = 0, method: str = "", ks=DROPOUT_COUNTS) -> list:
    """One report per setting of the chosen suite, in suite order."""
    if not scenes:
        raise ParameterError("protocol needs at least one scene")
    return [
        _evaluate_setting(state, scenes, name, plan, method)
        for name, plan in _settings_for(suite, seed, ks)
    ]


def run_masked_aggregate(state, scenes, seed: int = 0, method: str = "") -> ProtocolReport:
    """One pooled report over every dropout setting (k=1,3,5 combined).

    All per-sample predictions from the three dropout settings stream into
    a single confusion matrix, giving one masked-condition number per
    method for ablation comparisons.
    """
    if not scenes:
        raise ParameterError("protocol needs at least one scene")
    acc = ConfusionAccumulator(N_SEMANTIC + 1)
    latencies = []
    rss_peak = 0
    proc = psutil.Process()
    calls_before = state.decoder.invocations if state.decoder is not None else 0
    for _, plan in _settings_for("dropout", seed):
        for sample in scenes:
            masked = resolve_mask(plan, sample.sample_id)
            t0 = time.perf_counter()
            pred = state.infer(sample.images, masked)
            latencies.append((time.perf_counter() - t0) * 1000.0)
            acc.update(pred.astype(np.int64), sample.grid.labels.astype(np.int64))
            rss_peak = max(rss_peak, proc.memory_info().rss)
    calls = (state.decoder.invocations if state.decoder is not None else 0) - calls_before
    lat = np.sort(np.asarray(latencies))
    return ProtocolReport(
        setting="masked",
        method=method,
        n_samples=len(scenes) * len(DROPOUT_COUNTS),
        geometric_iou=geometric_iou(acc),
        geometric_defined=geometric_defined(acc),
        miou=miou(acc),
        class_ious=per_class_iou(acc)[1:],
        latency_ms_median=float(np.median(lat)),
        latency_ms_p95=float(lat[min(len(lat) - 1, int(round(0.95 * (len(lat) - 1))))]),
        peak_rss_mb=rss_peak / 2**20,
        decoder_invocations=int(calls),
    )


def run_ablation(states: dict, scenes, seed: int = 0) -> list:
    """One pooled-masked row per named model, in dict order."""
    return [
        run_masked_aggregate(state, scenes, seed=seed, method=method)
        for method, state in states.items()
    ]


def measure_overhead(state, scenes, seed: int = 0, method: str = "") -> list:
    """Latency/memory/decoder-call rows for 0..5 missing views."""
    if not scenes:
        raise ParameterError("overhead measurement needs at least one scene")
    reports = []
    for k in range(6):
        plan = MaskPlan.deterministic([]) if k == 0 else MaskPlan.stochastic(k=k, seed=seed + k)
        reports.append(_evaluate_setting(state, scenes, f"k={k}", plan, method))
    return reports


# -- rendering ---------------------------------------------------------------

_METRIC_COLUMNS = ["iou", "miou"] + [f"iou_{CLASS_NAMES[k]}" for k in range(1, N_SEMANTIC + 1)]
_TIMING_COLUMNS = ["latency_ms_median", "latency_ms_p95", "peak_rss_mb"]


def report_columns(include_timing: bool = False) -> list:
    cols = ["setting", "method", "samples"] + _METRIC_COLUMNS + ["decoder_calls", "defined"]
    if include_timing:
        cols += _TIMING_COLUMNS
    return cols


def _scale(value):
    return None if value is None else round(100.0 * value, 2)


def report_rows(reports, include_timing: bool = False) -> list:
    """Report cells in the fixed column order; metric values are IoU x100."""
    rows = []
    for r in reports:
        row = [r.setting, r.method, r.n_samples, _scale(r.geometric_iou), _scale(r.miou)]
        row += [_scale(v) for v in r.class_ious]
        row += [r.decoder_invocations, bool(r.geometric_defined)]
        if include_timing:
            row += [
                round(r.latency_ms_median, 2),
                round(r.latency_ms_p95, 2),
                round(r.peak_rss_mb, 2),
            ]
        rows.append(row)
    return rows


def _cell_text(value):
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def _render_table(cols: list, rows: list, fmt: str) -> str:
    if fmt not in REPORT_FORMATS:
        raise ParameterError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")
    if fmt == "json":
        return json.dumps({"columns": cols, "rows": rows}, indent=2, sort_keys=False) + "\n"
    if fmt == "csv":
        out = [",".join(cols)]
        for row in rows:
            out.append(",".join("" if v is None else _cell_text(v) for v in row))
        return "\n".join(out) + "\n"
    cells = [[_cell_text(v) for v in row] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) if cells else len(c) for i, c in enumerate(cols)]
    lines = [
        "  ".join(c.ljust(widths[i]) for i, c in enumerate(cols)).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(cols))).rstrip(),
    ]
    for row in cells:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(len(cols))).rstrip())
    return "\n".join(lines) + "\n"


def render_report(reports, fmt: str = "text", include_timing: bool = False) -> str:
    """Fixed-order table over the report rows; bit-stable given the inputs."""
    return _render_table(report_columns(include_timing), report_rows(reports, include_timing), fmt)


def csv_from_json(text: str) -> str:
    """Rebuild the CSV rendering from a JSON rendering, numerically exact."""
    return render_from_json(text, "csv")


def render_from_json(text: str, fmt: str) -> str:
    """Re-render a stored JSON report in any supported format."""
    blob = json.loads(text)
    return _render_table(blob["columns"], blob["rows"], fmt)


def plot_data(reports) -> dict:
    """Per-setting metric series for external plotting tools."""
    return {
        "settings": [r.setting for r in reports],
        "methods": [r.method for r in reports],
        "geometric_iou": [_scale(r.geometric_iou) for r in reports],
        "miou": [_scale(r.miou) for r in reports],
        "class_iou": {
            CLASS_NAMES[k]: [_scale(r.class_ious[k - 1]) for r in reports]
            for k in range(1, N_SEMANTIC + 1)
        },
        "decoder_calls": [r.decoder_invocations for r in reports],
    }
