"""Write metric reports and ablation tables as JSON, CSV, text and PNG figures."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import COLUMNS, DISPLAY, MetricsReport  # noqa: E402
from .simharness import AblationTable  # noqa: E402

# PNG metadata would otherwise carry the matplotlib version string
_PNG_META = {"Software": None}

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 9,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.spines.right": False,
    "axes.spines.top": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (5.0, 3.2),
    "savefig.dpi": 150,
}


def write_metrics(report: MetricsReport, out_dir, stem: str = "metrics", figure: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}.csv",
        "txt": out_dir / f"{stem}.txt",
    }
    paths["json"].write_text(report.to_json() + "\n", encoding="utf-8")
    paths["csv"].write_text(report.to_csv(), encoding="utf-8")
    paths["txt"].write_text(report.to_table(), encoding="utf-8")
    if figure:
        paths["png"] = out_dir / f"{stem}.png"
        plot_metrics(report, paths["png"])
    return paths


def plot_metrics(report: MetricsReport, path) -> None:
    with plt.rc_context(STYLE):
        fig, (ax, ax_c) = plt.subplots(1, 2, gridspec_kw={"width_ratios": [6, 1]}, figsize=(6.4, 3.0))
        values = [getattr(report, c) for c in COLUMNS[:-1]]
        ax.bar(DISPLAY[:-1], values, color="tab:blue")
        ax.set_ylim(0, 1)
        ax.set_ylabel("score")
        ax.tick_params(axis="x", rotation=30)
        ax_c.bar([DISPLAY[-1]], [report.cider], color="tab:orange")
        ax_c.set_ylim(0, max(1.0, report.cider * 1.1))
        fig.suptitle(f"Caption metrics (n = {report.n_cases})")
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)


def table_csv(table: AblationTable) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=table.columns, lineterminator="\n")
    writer.writeheader()
    for row in table.rows:
        writer.writerow(row)
    return buf.getvalue()


def table_text(table: AblationTable) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r[c]) for c in table.columns] for r in table.rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(table.columns)]
    lines = [" | ".join(c.rjust(w) for c, w in zip(table.columns, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


# x column and plotted y columns per ablation
_PLOTS = {
    "conversation_length": ("max_questions", ["finding_recall", "bleu1", "rouge_l"]),
    "data_size": ("n_cases", ["precision", "pair_coverage"]),
}


def plot_ablation(table: AblationTable, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if table.kind == "selection_strategy":
            labels = table.column("strategy")
            x = range(len(labels))
            ax.bar([i - 0.2 for i in x], table.column("precision"), width=0.4, label="precision")
            ax.bar([i + 0.2 for i in x], table.column("selection_ratio"), width=0.4, label="selection ratio")
            ax.set_xticks(list(x), labels, rotation=20)
            ax.set_ylim(0, 1.05)
        elif table.kind == "icl_count":
            for strategy, marker in (("random", "o"), ("similarity", "s")):
                rows = [r for r in table.rows if r["strategy"] == strategy]
                ax.plot([r["k"] for r in rows], [r["example_overlap"] for r in rows], marker=marker, label=strategy)
            ax.set_xticks(sorted(set(table.column("k"))))
            ax.set_xlabel("few-shot examples (k)")
            ax.set_ylabel("finding overlap with query")
        else:
            xcol, ycols = _PLOTS[table.kind]
            for ycol in ycols:
                ax.plot(table.column(xcol), table.column(ycol), marker="o", label=ycol)
            ax.set_xticks(table.column(xcol))
            ax.set_xlabel(xcol.replace("_", " "))
        ax.set_title(table.kind.replace("_", " "))
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)


def write_ablation(table: AblationTable, out_dir, figure: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    stem = out_dir / table.kind
    paths = {
        "json": stem.with_suffix(".json"),
        "csv": stem.with_suffix(".csv"),
        "txt": stem.with_suffix(".txt"),
    }
    paths["json"].write_text(json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8")
    paths["csv"].write_text(table_csv(table), encoding="utf-8")
    paths["txt"].write_text(table_text(table), encoding="utf-8")
    if figure:
        paths["png"] = stem.with_suffix(".png")
        plot_ablation(table, paths["png"])
    return paths
