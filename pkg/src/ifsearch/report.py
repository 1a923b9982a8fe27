"""Evaluation reports: delimited table, JSON document, and figures.

``write_report`` always emits ``report.tsv`` (per-query rows plus a
final mean row) and ``report.json`` (the full report, machine-readable).
When rankings and ground truth are supplied it also renders two figures
under ``figures/``: per-query precision-recall curves and a per-query AP
bar chart.  Rendering is skipped silently only when figures are
disabled explicitly; a missing plotting backend is an error.

All text outputs are byte-deterministic for identical inputs.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

from .evaluation import EvalReport, precision_recall_curve
from .search import Ranking
from .tensor_store import GroundTruth

_REPORT_COLUMNS = ("query_id", "ap", "num_relevant", "num_retrieved", "flagged")


def report_as_dict(report: EvalReport) -> dict:
    return {
        "stage": report.stage,
        "mean_ap": report.mean_ap,
        "num_queries": len(report.per_query),
        "flagged_queries": list(report.flagged_queries),
        "localization": (
            None
            if report.localization is None
            else {
                "hits": report.localization.hits,
                "total": report.localization.total,
                "threshold": report.localization.threshold,
                "accuracy": report.localization.accuracy,
            }
        ),
        "per_query": [
            {
                "query_id": q.query_id,
                "ap": q.ap,
                "num_relevant": q.num_relevant,
                "num_retrieved": q.num_retrieved,
                "flagged": q.flagged,
            }
            for q in report.per_query
        ],
    }


def render_report_table(report: EvalReport) -> str:
    """Per-query TSV with a trailing ``mean`` row carrying the mAP."""
    lines = ["\t".join(_REPORT_COLUMNS)]
    for q in report.per_query:
        lines.append(
            "\t".join(
                (
                    q.query_id,
                    format(q.ap, ".17g"),
                    str(q.num_relevant),
                    str(q.num_retrieved),
                    "yes" if q.flagged else "no",
                )
            )
        )
    lines.append("\t".join(("mean", format(report.mean_ap, ".17g"), "", "", "")))
    return "".join(line + "\n" for line in lines)


def _render_figures(
    out_dir: Path,
    report: EvalReport,
    rankings: Sequence[Ranking],
    ground_truth: Mapping[str, GroundTruth],
) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    figures_dir = out_dir / "figures"
    figures_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    for ranking in rankings:
        truth = ground_truth[ranking.query_id]
        recall, precision = precision_recall_curve(ranking.image_ids, truth)
        ax.plot(recall, precision, linewidth=1.0, label=ranking.query_id)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"precision-recall per query ({report.stage})")
    if len(rankings) <= 12:
        ax.legend(fontsize="x-small", loc="lower left")
    fig.tight_layout()
    pr_path = figures_dir / "pr_curves.png"
    fig.savefig(pr_path, dpi=100)
    plt.close(fig)
    written.append(pr_path)

    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    ids = [q.query_id for q in report.per_query]
    aps = [q.ap for q in report.per_query]
    ax.bar(range(len(ids)), aps, color="tab:blue")
    ax.axhline(report.mean_ap, color="tab:red", linewidth=1.0, linestyle="--",
               label=f"mAP = {report.mean_ap:.3f}")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=90, fontsize="x-small")
    ax.set_ylabel("average precision")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"AP per query ({report.stage})")
    ax.legend()
    fig.tight_layout()
    ap_path = figures_dir / "ap_per_query.png"
    fig.savefig(ap_path, dpi=100)
    plt.close(fig)
    written.append(ap_path)
    return written


def write_report(
    report: EvalReport,
    out_dir,
    *,
    rankings: Sequence[Ranking] | None = None,
    ground_truth: Mapping[str, GroundTruth] | None = None,
    figures: bool = True,
) -> list[Path]:
    """Write report files under ``out_dir``; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    tsv_path = out_dir / "report.tsv"
    tsv_path.write_text(render_report_table(report))
    written.append(tsv_path)

    json_path = out_dir / "report.json"
    json_path.write_text(
        json.dumps(report_as_dict(report), indent=2, sort_keys=True) + "\n"
    )
    written.append(json_path)

    if figures and rankings is not None and ground_truth is not None:
        if not isinstance(ground_truth, Mapping):
            ground_truth = {gt.query_id: gt for gt in ground_truth}
        written.extend(_render_figures(out_dir, report, rankings, ground_truth))
    return written
