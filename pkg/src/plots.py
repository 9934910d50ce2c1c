from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from errors import MissingArtifact  # noqa: E402

# stable element ids, no timestamp: identical inputs give identical SVG bytes
SVG_RC = {"svg.hashsalt": "engage-report", "svg.fonttype": "none"}


@dataclass
class ReportResult:
    figures: List[Path] = field(default_factory=list)
    notices: List[str] = field(default_factory=list)


def read_artifact(artifact_dir: Path, name: str, **kwargs) -> pd.DataFrame:
    path = Path(artifact_dir) / name
    if not path.exists():
        raise MissingArtifact(f"required artifact not found: {path}")
    return pd.read_csv(path, **kwargs)


def _save(fig, out_path: Path) -> Path:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path


def monthly_trends_svg(trends: pd.DataFrame, out_path: Path) -> Path:
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7.0, 5.0), sharex=True)
    top.plot(trends["month"], trends["active_enrollments"], marker="o")
    top.set_ylabel("Active enrollments")
    bottom.plot(trends["month"], trends["mean_sessions_per_active"], marker="o", color="tab:orange")
    bottom.set_ylabel("Sessions per active")
    bottom.set_xlabel("Month")
    for ax in (top, bottom):
        ax.grid(axis="y", linestyle=":", linewidth=0.5, alpha=0.7)
    bottom.tick_params(axis="x", rotation=45)
    return _save(fig, out_path)


def centroid_heatmap_svg(centroids: pd.DataFrame, out_path: Path) -> Path:
    """Rows are clusters (labelled by engagement type), columns the core features."""
    values = centroids.drop(columns=["cluster", "engagement_type"], errors="ignore")
    rows = centroids.get("engagement_type", centroids.get("cluster", pd.Series(range(len(values)))))
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * values.shape[1], 1.2 + 0.6 * values.shape[0]))
    matrix = values.to_numpy(dtype=float)
    bound = float(np.nanmax(np.abs(matrix))) if np.isfinite(matrix).any() else 1.0
    image = ax.imshow(matrix, cmap="RdBu_r", vmin=-bound, vmax=bound, aspect="auto")
    ax.set_xticks(range(values.shape[1]), labels=list(values.columns), rotation=45, ha="right")
    ax.set_yticks(range(values.shape[0]), labels=[str(r) for r in rows])
    for (i, j), v in np.ndenumerate(matrix):
        if np.isfinite(v):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7)
    fig.colorbar(image, ax=ax, shrink=0.8)
    return _save(fig, out_path)


def weekly_distribution_svg(weekly: pd.DataFrame, out_path: Path) -> Path:
    table = weekly.pivot(index="week", columns="engagement_type", values="sessions").fillna(0)
    fig, ax = plt.subplots(figsize=(7.0, 3.5))
    for engagement_type in table.columns:
        ax.plot(table.index, table[engagement_type], marker=".", label=str(engagement_type))
    ax.set_xlabel("Academic week")
    ax.set_ylabel("Sessions")
    ax.legend(fontsize=8)
    ax.grid(axis="y", linestyle=":", linewidth=0.5, alpha=0.7)
    return _save(fig, out_path)


def type_shares_svg(shares: pd.DataFrame, dimension: str, out_path: Path) -> Path:
    subset = shares[shares["dimension"] == dimension]
    values = sorted(subset["value"].unique())
    types = sorted(subset["engagement_type"].unique())
    width = 0.8 / max(len(values), 1)
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(types), 3.5))
    for offset, value in enumerate(values):
        rows = subset[subset["value"] == value].set_index("engagement_type").reindex(types)
        x = np.arange(len(types)) + offset * width
        proportion = rows["proportion"].to_numpy(dtype=float)
        errors = np.vstack([proportion - rows["lo"].to_numpy(dtype=float), rows["hi"].to_numpy(dtype=float) - proportion])
        ax.bar(x, proportion, width, yerr=np.nan_to_num(errors), capsize=3, label=str(value))
    ax.set_xticks(np.arange(len(types)) + width * (len(values) - 1) / 2, labels=types)
    ax.set_ylabel("Share of sessions")
    ax.set_ylim(0, 1)
    ax.legend(title=dimension, fontsize=8)
    return _save(fig, out_path)


def transition_heatmap_svg(counts: pd.DataFrame, out_path: Path, title: str = "") -> Path:
    """Cells read 'prob (count)'; rows with no outgoing transitions stay blank."""
    states = list(counts.columns)
    matrix = counts.to_numpy(dtype=float)
    totals = matrix.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(totals > 0, matrix / np.where(totals > 0, totals, 1), np.nan)
    fig, ax = plt.subplots(figsize=(1.5 + 1.1 * len(states), 1.2 + 0.9 * len(states)))
    ax.imshow(np.nan_to_num(probs), cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(states)), labels=states, rotation=45, ha="right")
    ax.set_yticks(range(len(states)), labels=states)
    ax.set_xlabel("To")
    ax.set_ylabel("From")
    for (i, j), p in np.ndenumerate(probs):
        if np.isfinite(p):
            color = "white" if p > 0.6 else "black"
            ax.text(j, i, f"{p:.2f}\n({int(matrix[i, j])})", ha="center", va="center", fontsize=7, color=color)
    if title:
        ax.set_title(title)
    return _save(fig, out_path)


def render_transitions(counts: pd.DataFrame, out_path: Path) -> Path:
    with plt.rc_context(SVG_RC):
        return transition_heatmap_svg(counts, out_path)


def render_report(artifact_dir: Path) -> ReportResult:
    """Build every figure from the CSV artifacts of a finished run."""
    artifact_dir = Path(artifact_dir)
    figures_dir = artifact_dir / "figures"
    result = ReportResult()

    trends = read_artifact(artifact_dir, "monthly_trends.csv")
    centroids = read_artifact(artifact_dir, "centroids.csv")
    weekly = read_artifact(artifact_dir, "weekly_distribution.csv")
    shares = read_artifact(artifact_dir, "type_shares.csv")
    transitions = read_artifact(artifact_dir, "transitions_counts.csv", index_col=0)

    with plt.rc_context(SVG_RC):
        result.figures.append(monthly_trends_svg(trends, figures_dir / "monthly_trends.svg"))
        result.figures.append(centroid_heatmap_svg(centroids, figures_dir / "centroid_heatmap.svg"))
        result.figures.append(weekly_distribution_svg(weekly, figures_dir / "weekly_distribution.svg"))
        for dimension in sorted(shares["dimension"].unique()):
            subset = shares[shares["dimension"] == dimension]
            if subset["n"].min() == 0:
                result.notices.append(f"type shares by {dimension}: empty subgroup, chart omitted")
                continue
            result.figures.append(type_shares_svg(shares, dimension, figures_dir / f"type_shares_{dimension}.svg"))
        result.figures.append(transition_heatmap_svg(transitions, figures_dir / "transitions.svg"))

        for path in sorted((artifact_dir / "subgroups").glob("*_counts.csv")):
            counts = pd.read_csv(path, index_col=0)
            name = path.name[: -len("_counts.csv")]
            if counts.to_numpy().sum() == 0:
                result.notices.append(f"subgroup {name}: no transitions, chart omitted")
                continue
            result.figures.append(transition_heatmap_svg(counts, figures_dir / f"transitions_{name}.svg", title=name))
    return result
