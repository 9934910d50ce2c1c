from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from errors import EmptyInput, RankDeficient, SingleCluster
from features import CORE_FEATURES
from ingest import Corpus, Discipline, Selectivity
from sessionizer import Session
from stats import group_compare, proportion_ci

SUBGROUP_DIMENSIONS = ("discipline", "selectivity")

# group 1 of each contrast; estimates read "group 1 minus the rest"
CONTRAST_LEVELS = {
    "discipline": Discipline.STEM.value,
    "selectivity": Selectivity.HIGHLY_SELECTIVE.value,
}


def adoption_table(corpus: Corpus, sessions: Sequence[Session]) -> pd.DataFrame:
    """One row per enrollment, padded with non-adopters up to each class's size."""
    n_sessions: Dict[str, int] = {}
    class_of: Dict[str, str] = {}
    for session in sessions:
        n_sessions[session.enrollment_id] = n_sessions.get(session.enrollment_id, 0) + 1
        class_of[session.enrollment_id] = session.class_id
    for turn in corpus.turns:
        class_of.setdefault(turn.enrollment_id, turn.class_id)

    context = corpus.context
    rows = []
    for class_id in sorted(context.classes):
        enrolled = sorted(e for e, c in class_of.items() if c == class_id)
        padding = max(context.classes[class_id].size - len(enrolled), 0)
        enrolled += [f"{class_id}:nonadopter{i:05d}" for i in range(padding)]
        for enrollment_id in enrolled:
            count = n_sessions.get(enrollment_id, 0)
            rows.append(
                {
                    "enrollment_id": enrollment_id,
                    "class_id": class_id,
                    "student_id": context.student_of(enrollment_id),
                    "discipline": context.discipline_of(class_id).value,
                    "selectivity": context.selectivity_of(class_id).value,
                    "adopted": int(count > 0),
                    "n_sessions": count,
                }
            )
    return pd.DataFrame(
        rows,
        columns=["enrollment_id", "class_id", "student_id", "discipline", "selectivity", "adopted", "n_sessions"],
    )


def usage_summary(adoption: pd.DataFrame) -> Dict[str, float]:
    adopters = adoption.loc[adoption["adopted"] == 1, "n_sessions"]
    summary = {
        "n_enrollments": int(len(adoption)),
        "n_adopters": int(len(adopters)),
        "adoption_rate": float(adoption["adopted"].mean()) if len(adoption) else float("nan"),
    }
    if len(adopters):
        p25, median, p75 = np.percentile(adopters, [25, 50, 75])
    else:
        p25 = median = p75 = float("nan")
    summary.update({"sessions_p25": float(p25), "sessions_median": float(median), "sessions_p75": float(p75)})
    return summary


def monthly_trends(sessions: Sequence[Session]) -> pd.DataFrame:
    frame = pd.DataFrame(
        {
            "month": [s.start.strftime("%Y-%m") for s in sessions],
            "enrollment_id": [s.enrollment_id for s in sessions],
        }
    )
    grouped = frame.groupby("month").agg(
        active_enrollments=("enrollment_id", "nunique"),
        sessions=("enrollment_id", "size"),
    )
    grouped["mean_sessions_per_active"] = grouped["sessions"] / grouped["active_enrollments"]
    return grouped.reset_index()


def weekly_distribution(features: pd.DataFrame, labels: pd.Series) -> pd.DataFrame:
    frame = pd.DataFrame({"week": features["week_progress"], "engagement_type": labels.reindex(features.index)})
    counts = frame.groupby(["week", "engagement_type"]).size().rename("sessions").reset_index()
    return counts.sort_values(["week", "engagement_type"], kind="mergesort").reset_index(drop=True)


def session_frame(
    sessions: Sequence[Session],
    corpus: Corpus,
    features: pd.DataFrame,
    labels: pd.Series,
) -> pd.DataFrame:
    """Session-level analysis table: context columns, engagement type and core features."""
    context = corpus.context
    meta = pd.DataFrame(
        [
            {
                "session_id": s.session_id,
                "enrollment_id": s.enrollment_id,
                "class_id": s.class_id,
                "student_id": context.student_of(s.enrollment_id),
                "discipline": context.discipline_of(s.class_id).value,
                "selectivity": context.selectivity_of(s.class_id).value,
            }
            for s in sessions
        ],
        columns=["session_id", "enrollment_id", "class_id", "student_id", "discipline", "selectivity"],
    ).set_index("session_id")
    meta = meta.loc[meta.index.intersection(features.index, sort=False)]
    meta["engagement_type"] = labels.reindex(meta.index)
    return meta.join(features[list(CORE_FEATURES)])


def type_shares(frame: pd.DataFrame, dimensions: Sequence[str] = SUBGROUP_DIMENSIONS) -> pd.DataFrame:
    """Share of each engagement type per subgroup, with class-clustered 95% CIs."""
    types = sorted(frame["engagement_type"].unique())
    rows = []
    for dimension in dimensions:
        for value in sorted(frame[dimension].unique()):
            subset = frame[frame[dimension] == value]
            for engagement_type in types:
                indicator = (subset["engagement_type"] == engagement_type).astype(float)
                row = {
                    "dimension": dimension,
                    "value": value,
                    "engagement_type": engagement_type,
                    "proportion": float(indicator.mean()),
                    "lo": np.nan,
                    "hi": np.nan,
                    "n": len(subset),
                    "G": subset["class_id"].nunique(),
                }
                try:
                    ci = proportion_ci(indicator.to_numpy(), subset["class_id"].to_numpy())
                    row.update(lo=ci.lo, hi=ci.hi)
                except (SingleCluster, RankDeficient):
                    pass
                rows.append(row)
    return pd.DataFrame(rows, columns=["dimension", "value", "engagement_type", "proportion", "lo", "hi", "n", "G"])


@dataclass
class ComparisonSet:
    rows: List[Dict] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)

    def add(self, outcome: str, contrast: str, values, flag, clusters_1, clusters_2=None) -> None:
        try:
            self.rows.append(group_compare(values, flag, clusters_1, clusters_2).row(outcome, contrast))
        except (EmptyInput, SingleCluster, RankDeficient) as e:
            self.skipped.append(f"{outcome} / {contrast}: {type(e).__name__}")


def _clusters(frame: pd.DataFrame, two_way: bool):
    if two_way:
        return frame["student_id"].to_numpy(), frame["class_id"].to_numpy()
    return frame["class_id"].to_numpy(), None


def _contrast(dimension: str) -> str:
    level = CONTRAST_LEVELS[dimension]
    return f"{dimension}: {level} vs rest"


def contextual_comparisons(
    adoption: pd.DataFrame,
    sessions: pd.DataFrame,
    dimensions: Sequence[str] = SUBGROUP_DIMENSIONS,
    two_way: bool = False,
) -> ComparisonSet:
    out = ComparisonSet()
    adopters = adoption[adoption["adopted"] == 1]

    for dimension in dimensions:
        level = CONTRAST_LEVELS[dimension]
        contrast = _contrast(dimension)
        out.add("adopted", contrast, adoption["adopted"], adoption[dimension] == level, *_clusters(adoption, two_way))
        out.add(
            "n_sessions_per_adopter",
            contrast,
            adopters["n_sessions"],
            adopters[dimension] == level,
            *_clusters(adopters, two_way),
        )
        for engagement_type in sorted(sessions["engagement_type"].unique()):
            out.add(
                f"share:{engagement_type}",
                contrast,
                (sessions["engagement_type"] == engagement_type).astype(float),
                sessions[dimension] == level,
                *_clusters(sessions, two_way),
            )

    for type_0, type_1 in combinations(sorted(sessions["engagement_type"].unique()), 2):
        pair = sessions[sessions["engagement_type"].isin([type_0, type_1])]
        for feature in CORE_FEATURES:
            out.add(
                feature,
                f"type: {type_1} vs {type_0}",
                pair[feature],
                pair["engagement_type"] == type_1,
                *_clusters(pair, two_way),
            )
    return out
