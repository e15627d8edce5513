"""Render an aggregation run to files: delimited data plus a capture
timeline figure."""

from __future__ import annotations

import csv
import pathlib

import matplotlib

matplotlib.use("Agg")

import matplotlib.dates as mdates
import matplotlib.pyplot as plt

from .aggregation import AggregateReport

MEMENTO_COLUMNS = (
    "uri_m",
    "datetime",
    "rel",
    "source",
    "status_code",
    "content_type",
    "last_modified",
    "damage",
    "access_type",
)

SOURCE_COLUMNS = ("source_id", "outcome", "status", "elapsed_ms", "mementos", "uri_p", "detail")


def _memento_rows(report: AggregateReport):
    for record in report.timemap.mementos:
        content = record.content
        yield {
            "uri_m": record.uri_m,
            "datetime": record.datetime.key,
            "rel": record.rel,
            "source": record.extensions.get("via", ""),
            "status_code": content.status_code if content and content.status_code is not None else "",
            "content_type": content.content_type if content and content.content_type else "",
            "last_modified": content.last_modified.key if content and content.last_modified else "",
            "damage": record.damage if record.damage is not None else "",
            "access_type": record.access.type if record.access and record.access.type else "",
        }


def write_report(report: AggregateReport, out_dir: str | pathlib.Path) -> dict[str, pathlib.Path]:
    """Write mementos.csv, sources.csv, and timeline.png under ``out_dir``.

    Returns the paths keyed by artifact name. The figure is written even
    when the aggregation found nothing, so scripted runs always produce
    the same file set.
    """
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "mementos": out / "mementos.csv",
        "sources": out / "sources.csv",
        "timeline": out / "timeline.png",
    }

    counts: dict[str, int] = {}
    for record in report.timemap.mementos:
        source = str(record.extensions.get("via", ""))
        counts[source] = counts.get(source, 0) + 1

    with paths["mementos"].open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MEMENTO_COLUMNS)
        writer.writeheader()
        for row in _memento_rows(report):
            writer.writerow(row)

    with paths["sources"].open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SOURCE_COLUMNS)
        writer.writeheader()
        for result in report.per_source:
            writer.writerow(
                {
                    "source_id": result.source_id,
                    "outcome": result.outcome.value,
                    "status": result.status if result.status is not None else "",
                    "elapsed_ms": f"{result.elapsed_ms:.1f}",
                    "mementos": counts.get(result.source_id, 0),
                    "uri_p": result.uri_p or "",
                    "detail": result.detail or "",
                }
            )

    _write_timeline(report, paths["timeline"])
    return paths


def _write_timeline(report: AggregateReport, path: pathlib.Path) -> None:
    sources = sorted({str(r.extensions.get("via", "")) or "(unattributed)" for r in report.timemap.mementos})
    fig, ax = plt.subplots(figsize=(9, max(2.0, 0.6 * max(len(sources), 1) + 1.2)))
    try:
        if report.timemap.mementos:
            lanes = {source: n for n, source in enumerate(sources)}
            for source in sources:
                xs = [
                    r.datetime.instant
                    for r in report.timemap.mementos
                    if (str(r.extensions.get("via", "")) or "(unattributed)") == source
                ]
                ax.plot(
                    xs, [lanes[source]] * len(xs), linestyle="none", marker="o",
                    markersize=7, alpha=0.8, label=source,
                )
            ax.set_yticks(range(len(sources)))
            ax.set_yticklabels(sources)
            ax.set_ylim(-0.6, len(sources) - 0.4)
            ax.xaxis.set_major_formatter(mdates.DateFormatter("%Y-%m-%d"))
            fig.autofmt_xdate()
        else:
            ax.text(0.5, 0.5, "no mementos found", ha="center", va="center", transform=ax.transAxes)
            ax.set_xticks([])
            ax.set_yticks([])
        ax.set_title(f"Captures of {report.timemap.original.value}")
        ax.set_xlabel("capture datetime")
        fig.tight_layout()
        fig.savefig(path, dpi=110)
    finally:
        plt.close(fig)


__all__ = ["write_report", "MEMENTO_COLUMNS", "SOURCE_COLUMNS"]
