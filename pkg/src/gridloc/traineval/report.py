"""
Comparison reports between evaluation runs.

The first run is the baseline; every other run is compared against it.
Tables are polars DataFrames written as CSV, plus one JSON document with all
of them; ``render_html`` builds a self-contained page from report sections.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import polars as pl

from ..errors import InputError
from .evaluate import EvalResult

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("label", "AP", "AP@.5", "AP@.75", "AP@.8", "AP@.9", "AP_small", "AP_large")
_COLUMN_THRESHOLDS = {"AP@.5": 0.5, "AP@.75": 0.75, "AP@.8": 0.8, "AP@.9": 0.9}
GAIN_THRESHOLD = 0.8


@dataclass
class AblationReport:
    labels: list[str]
    results: list[EvalResult]
    summary: pl.DataFrame
    deltas: pl.DataFrame
    category_gains: pl.DataFrame

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "baseline": self.labels[0],
            "summary": self.summary.to_dicts(),
            "deltas": self.deltas.to_dicts(),
            "category_gains": self.category_gains.to_dicts(),
            "runs": [r.to_dict() for r in self.results],
        }

    def write(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.summary.write_csv(out_dir / "summary.csv")
        self.deltas.write_csv(out_dir / "deltas.csv")
        self.category_gains.write_csv(out_dir / "category_gains.csv")
        path = out_dir / "report.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        logger.info("wrote report to %s", out_dir)
        return path

    def delta(self, label: str, threshold: Optional[float] = None) -> float:
        """AP gain of ``label`` over the baseline, mean AP when no threshold is given."""
        row = self.deltas.filter(pl.col("label") == label)
        if row.is_empty():
            raise KeyError(f"no run labelled {label!r} (have {self.labels[1:]})")
        column = "AP" if threshold is None else f"AP@{threshold:.2f}"
        return float(row[column][0])


def _metric(result: EvalResult, column: str) -> float:
    if column == "AP":
        return result.ap
    if column == "AP_small":
        return result.ap_small
    if column == "AP_large":
        return result.ap_large
    try:
        return result.ap_at(_COLUMN_THRESHOLDS[column])
    except KeyError:
        return math.nan


def ablation_report(results: Sequence[EvalResult], labels: Optional[Sequence[str]] = None) -> AblationReport:
    """
    Summary row per run; per-threshold AP deltas of each run vs the first;
    per-category gain of the last run vs the first, sorted descending.
    """
    results = list(results)
    if len(results) < 2:
        raise InputError(f"ablation_report needs at least 2 runs, got {len(results)}")
    labels = list(labels) if labels is not None else [r.label or f"run{k}" for k, r in enumerate(results)]
    if len(labels) != len(results):
        raise InputError(f"{len(labels)} labels for {len(results)} runs")
    base = results[0]
    for label, r in zip(labels[1:], results[1:]):
        if set(r.categories) != set(base.categories):
            raise InputError(f"run {label!r} has categories {r.categories}, baseline has {base.categories}")
        if tuple(r.thresholds) != tuple(base.thresholds):
            raise InputError(f"run {label!r} was evaluated at different IoU thresholds")

    summary = pl.DataFrame(
        [{"label": label, **{c: _metric(r, c) for c in SUMMARY_COLUMNS[1:]}} for label, r in zip(labels, results)]
    )

    delta_rows = []
    for label, r in zip(labels[1:], results[1:]):
        row = {"label": label, "AP": r.ap - base.ap}
        for t in base.thresholds:
            row[f"AP@{t:.2f}"] = r.ap_at(t) - base.ap_at(t)
        delta_rows.append(row)
    deltas = pl.DataFrame(delta_rows)

    challenger = results[-1]
    has_gain_threshold = any(abs(t - GAIN_THRESHOLD) < 1e-9 for t in base.thresholds)
    gain_rows = []
    for category in base.categories:
        row = {"category": category, "gain": challenger.category_ap(category) - base.category_ap(category)}
        if has_gain_threshold:
            row[f"gain@{GAIN_THRESHOLD}"] = (
                challenger.category_ap(category, GAIN_THRESHOLD) - base.category_ap(category, GAIN_THRESHOLD)
            )
        gain_rows.append(row)
    gains = pl.DataFrame(gain_rows).fill_nan(None).sort("gain", descending=True, nulls_last=True)

    return AblationReport(labels, results, summary, deltas, gains)


# =============================================================================
# HTML
# =============================================================================

def _table_html(df: pl.DataFrame) -> str:
    head = "".join(f"<th>{c}</th>" for c in df.columns)
    body = ""
    for row in df.iter_rows():
        cells = "".join(
            f"<td>{100 * v:+.1f}</td>" if isinstance(v, float) and not math.isnan(v)
            else "<td>n/a</td>" if v is None or isinstance(v, float) else f"<td>{v}</td>"
            for v in row
        )
        body += f"<tr>{cells}</tr>"
    return f"<table><thead><tr>{head}</tr></thead><tbody>{body}</tbody></table>"


def _embed(fig, section_id: str) -> str:
    """Figure fragment with a fixed div id so the same report renders to the same bytes."""
    return fig.to_html(full_html=False, include_plotlyjs=False, div_id=f"{section_id}-plot")


def report_sections(report: AblationReport, loss_curves: Optional[dict[str, pl.DataFrame]] = None) -> list[dict]:
    from ..viz import plots

    sections = [
        {
            "title": "Summary",
            "id": "summary",
            "content": _table_html(report.summary) + '<p class="note">AP values in points (x100).</p>',
            "plot": _embed(plots.plot_ap_vs_iou(report.results, report.labels), "summary"),
        },
        {
            "title": "Gains over baseline",
            "id": "deltas",
            "content": _table_html(report.deltas),
            "plot": _embed(plots.plot_threshold_gains(report), "deltas"),
        },
        {
            "title": "Per-category gains",
            "id": "categories",
            "content": _table_html(report.category_gains),
            "plot": _embed(plots.plot_category_gains(report.category_gains), "categories"),
        },
    ]
    if loss_curves:
        sections.append({
            "title": "Training loss",
            "id": "loss",
            "content": "",
            "plot": _embed(plots.plot_loss_curves(loss_curves), "loss"),
        })
    return sections


def render_html(sections: list[dict], title: str = "Localization ablation", meta: str = "") -> str:
    nav_items = "".join(f'<a href="#{s["id"]}">{s["title"]}</a>' for s in sections)
    sections_html = ""
    for section in sections:
        sections_html += f"""
        <section id="{section['id']}">
            <h2>{section['title']}</h2>
            {section['content']}
            {section['plot']}
        </section>
        """
    return f"""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>{title}</title>
    <script src="https://cdn.plot.ly/plotly-3.3.0.min.js"></script>
    <style>
        body {{ font-family: 'Segoe UI', system-ui, sans-serif; color: #1e293b; background: #fafafa;
               max-width: 1100px; margin: 0 auto; padding: 20px; }}
        header {{ background: #0c4a6e; color: white; padding: 30px; border-radius: 12px; margin-bottom: 24px; }}
        nav {{ display: flex; gap: 12px; margin-bottom: 24px; }}
        section {{ background: white; padding: 24px; border-radius: 8px; margin-bottom: 24px; }}
        table {{ border-collapse: collapse; font-size: 0.9rem; }}
        th, td {{ border-bottom: 1px solid #e2e8f0; padding: 6px 10px; text-align: right; }}
        .note {{ font-size: 0.85rem; color: #64748b; font-style: italic; }}
    </style>
</head>
<body>
    <header>
        <h1>{title}</h1>
        <div class="meta">{meta}</div>
    </header>
    <nav>{nav_items}</nav>
    {sections_html}
</body>
</html>"""


def write_html_report(report: AblationReport, path: Path, title: str = "Localization ablation",
                      loss_curves: Optional[dict[str, pl.DataFrame]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    datasets = ", ".join(sorted({r.dataset_id for r in report.results if r.dataset_id})) or "unknown"
    meta = f"Dataset: {datasets} | Runs: {', '.join(report.labels)} | Baseline: {report.labels[0]}"
    path.write_text(render_html(report_sections(report, loss_curves), title, meta), encoding="utf-8")
    return path
