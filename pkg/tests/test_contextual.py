from datetime import date, datetime, timedelta, timezone

import numpy as np
import pandas as pd
import pytest
import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from contextual import (
    ComparisonSet,
    adoption_table,
    contextual_comparisons,
    monthly_trends,
    session_frame,
    type_shares,
    usage_summary,
    weekly_distribution,
)
from features import CORE_FEATURES
from ingest import Calendar, ClassMeta, ContextMeta, ConversationTurn, InstitutionMeta, build_corpus
from sessionizer import Session

CST = timezone(timedelta(hours=8))


def make_session(session_id, enrollment_id, class_id, month=9, day=3):
    stamp = datetime(2024, month, day, 10, 0, tzinfo=CST)
    turn = ConversationTurn(
        turn_id=f"{session_id}-t0",
        enrollment_id=enrollment_id,
        class_id=class_id,
        timestamp=stamp,
        prompt_text="hello",
    )
    return Session(session_id=session_id, enrollment_id=enrollment_id, class_id=class_id, turns=(turn,))


@pytest.fixture
def sessions():
    return [
        make_session("e1:00000", "e1", "c1"),
        make_session("e1:00001", "e1", "c1", month=10),
        make_session("e2:00000", "e2", "c1"),
        make_session("e3:00000", "e3", "c2", month=10),
        make_session("e3:00001", "e3", "c2", month=10, day=9),
        make_session("e3:00002", "e3", "c2", month=10, day=20),
    ]


@pytest.fixture
def corpus(sessions):
    context = ContextMeta(
        classes={
            "c1": ClassMeta(discipline="STEM", institution_id="i1", size=4),
            "c2": ClassMeta(discipline="NonSTEM", institution_id="i2", size=3),
        },
        institutions={
            "i1": InstitutionMeta(selectivity="HighlySelective"),
            "i2": InstitutionMeta(selectivity="LessSelective"),
        },
        students={"e1": "s1", "e3": "s1"},
    )
    calendar = Calendar(semester_start=date(2024, 9, 2), semester_end=date(2024, 12, 20))
    return build_corpus([t for s in sessions for t in s.turns], context, [], calendar)


@pytest.fixture
def features(sessions):
    rng = np.random.default_rng(0)
    frame = pd.DataFrame(
        rng.random((len(sessions), len(CORE_FEATURES))),
        index=pd.Index([s.session_id for s in sessions], name="session_id"),
        columns=list(CORE_FEATURES),
    )
    frame["week_progress"] = [1, 5, 1, 5, 6, 7]
    return frame


@pytest.fixture
def labels(sessions):
    return pd.Series(["Deep", "Shallow", "Shallow", "Deep", "Deep", "Shallow"], index=[s.session_id for s in sessions])


class TestAdoption:

    @pytest.mark.unit
    def test_pads_non_adopters(self, corpus, sessions):
        adoption = adoption_table(corpus, sessions)

        assert len(adoption) == 7
        assert adoption.loc[adoption["class_id"] == "c1", "adopted"].tolist() == [1, 1, 0, 0]
        assert adoption["enrollment_id"].tolist()[2] == "c1:nonadopter00000"
        assert adoption.set_index("enrollment_id").loc["e3", "n_sessions"] == 3
        assert adoption.set_index("enrollment_id").loc["e3", "student_id"] == "s1"

    @pytest.mark.unit
    def test_usage_summary(self, corpus, sessions):
        summary = usage_summary(adoption_table(corpus, sessions))

        assert summary["n_enrollments"] == 7
        assert summary["n_adopters"] == 3
        assert summary["adoption_rate"] == pytest.approx(3 / 7)
        assert summary["sessions_median"] == 2.0

    @pytest.mark.unit
    def test_usage_summary_without_adopters(self):
        adoption = pd.DataFrame({"adopted": [0, 0], "n_sessions": [0, 0]})

        summary = usage_summary(adoption)

        assert summary["n_adopters"] == 0
        assert np.isnan(summary["sessions_median"])


class TestTrends:

    @pytest.mark.unit
    def test_monthly(self, sessions):
        trends = monthly_trends(sessions)

        assert trends["month"].tolist() == ["2024-09", "2024-10"]
        assert trends["active_enrollments"].tolist() == [2, 2]
        assert trends["sessions"].tolist() == [2, 4]
        assert trends["mean_sessions_per_active"].tolist() == [1.0, 2.0]

    @pytest.mark.unit
    def test_weekly(self, features, labels):
        weekly = weekly_distribution(features, labels)

        assert list(weekly.columns) == ["week", "engagement_type", "sessions"]
        assert weekly["sessions"].sum() == 6
        week_one = weekly[weekly["week"] == 1].set_index("engagement_type")["sessions"]
        assert week_one.to_dict() == {"Deep": 1, "Shallow": 1}


class TestSessionFrame:

    @pytest.mark.unit
    def test_columns_and_rows(self, sessions, corpus, features, labels):
        frame = session_frame(sessions, corpus, features.drop(index="e2:00000"), labels)

        assert "e2:00000" not in frame.index
        assert frame.loc["e3:00000", "discipline"] == "NonSTEM"
        assert frame.loc["e1:00000", "selectivity"] == "HighlySelective"
        assert frame.loc["e1:00000", "engagement_type"] == "Deep"
        assert set(CORE_FEATURES) <= set(frame.columns)

    @pytest.mark.unit
    def test_type_shares(self, sessions, corpus, features, labels):
        frame = session_frame(sessions, corpus, features, labels)

        shares = type_shares(frame, ["discipline"])

        stem = shares[shares["value"] == "STEM"].set_index("engagement_type")
        assert stem.loc["Deep", "proportion"] == pytest.approx(1 / 3)
        assert stem.loc["Deep", "n"] == 3
        # one class per subgroup: no interval
        assert np.isnan(stem.loc["Deep", "lo"])
        assert shares.groupby("value")["proportion"].sum().tolist() == pytest.approx([1.0, 1.0])

    @pytest.mark.unit
    def test_single_session_subgroup_has_no_interval(self):
        frame = pd.DataFrame({
            "engagement_type": ["Deep", "Shallow", "Deep", "Shallow"],
            "discipline": ["STEM", "STEM", "STEM", "NonSTEM"],
            "class_id": ["c1", "c2", "c3", "c4"],
        })

        shares = type_shares(frame, ["discipline"])

        lone = shares[shares["value"] == "NonSTEM"].set_index("engagement_type")
        assert lone.loc["Shallow", "proportion"] == 1.0
        assert lone["n"].tolist() == [1, 1]
        assert lone["lo"].isna().all()
        stem = shares[shares["value"] == "STEM"]
        assert stem["lo"].notna().all()


class TestComparisons:

    @pytest.mark.unit
    def test_skips_are_recorded(self):
        comparisons = ComparisonSet()

        comparisons.add("x", "c", [1.0, 2.0], [1, 1], ["a", "b"])
        comparisons.add("x", "c", [1.0, 2.0, 3.0], [0, 1, 1], ["a", "a", "a"])

        assert comparisons.rows == []
        assert comparisons.skipped == ["x / c: EmptyInput", "x / c: SingleCluster"]

    @pytest.mark.unit
    def test_outcomes_and_contrasts(self, sessions, corpus, features, labels):
        adoption = adoption_table(corpus, sessions)
        frame = session_frame(sessions, corpus, features, labels)

        result = contextual_comparisons(adoption, frame, ["discipline"])

        outcomes = {(row["outcome"], row["contrast"]) for row in result.rows}
        assert ("adopted", "discipline: STEM vs rest") in outcomes
        assert ("n_sessions_per_adopter", "discipline: STEM vs rest") in outcomes
        assert ("share:Deep", "discipline: STEM vs rest") in outcomes
        assert {f for f, c in outcomes if c == "type: Shallow vs Deep"} == set(CORE_FEATURES)
        assert result.skipped == []

    @pytest.mark.unit
    def test_two_way_uses_students_and_classes(self, sessions, corpus, features, labels):
        adoption = adoption_table(corpus, sessions)
        frame = session_frame(sessions, corpus, features, labels)

        result = contextual_comparisons(adoption, frame, ["discipline"], two_way=True)

        adopted = [row for row in result.rows if row["outcome"] == "adopted"]
        assert adopted
        assert adopted[0]["G"] == 2
