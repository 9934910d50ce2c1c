from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from statistics import fmean
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from joblib import Parallel, delayed

from errors import SessionOutsideCalendar
from ingest import ActivityEvent, Calendar, ConversationTurn, Corpus, EventKind, ScheduleBlock
from lexicon import CompiledLexicon
from sessionizer import Session
from text_utils import count_words

CORE_FEATURES = (
    "num_turns",
    "avg_minutes_per_turn",
    "avg_words_per_prompt",
    "copy_paste_events",
    "direct_answer_requests",
    "understanding_queries",
    "week_progress",
    "exam_period_indicator",
    "time_of_day",
    "in_class_indicator",
)

EXTENDED_FEATURES = (
    "minutes_since_prev_class",
    "minutes_until_next_class",
    "minutes_since_assignment_release",
    "minutes_until_assignment_deadline",
)

COUNT_FEATURES = ("num_turns", "copy_paste_events", "direct_answer_requests", "understanding_queries")


@dataclass(frozen=True)
class EngagementFeatures:
    num_turns: int
    avg_minutes_per_turn: float
    avg_words_per_prompt: float
    copy_paste_events: int
    direct_answer_requests: int
    understanding_queries: int
    week_progress: int
    exam_period_indicator: float
    time_of_day: float
    in_class_indicator: float


@dataclass(frozen=True)
class TemporalFeatures:
    week_progress: int
    exam_period_indicator: float
    time_of_day: float
    in_class_indicator: float


@dataclass(frozen=True)
class ExtendedFeatures:
    minutes_since_prev_class: Optional[float] = None
    minutes_until_next_class: Optional[float] = None
    minutes_since_assignment_release: Optional[float] = None
    minutes_until_assignment_deadline: Optional[float] = None

    @property
    def is_complete(self) -> bool:
        return all(v is not None for v in asdict(self).values())


def count_turns(session: Session) -> int:
    return session.num_turns


def _minutes(delta) -> float:
    return delta.total_seconds() / 60.0


def avg_minutes_per_turn(session: Session) -> float:
    if session.num_turns < 2:
        return 0.0
    return _minutes(session.end - session.start) / (session.num_turns - 1)


def avg_words_per_prompt(session: Session) -> float:
    return fmean(count_words(t.prompt_text) for t in session.turns)


def detect_copy_paste(turn: ConversationTurn, lexicon: CompiledLexicon) -> int:
    text = turn.prompt_text
    return (
        int(turn.has_image_upload)
        + int(lexicon.has_copy_paste_keyword(text))
        + int(lexicon.has_structured_text(text))
        + int(count_words(text) >= lexicon.long_prompt_threshold)
    )


def detect_direct_answer(turn: ConversationTurn, lexicon: CompiledLexicon) -> int:
    return int(lexicon.asks_direct_answer(turn.prompt_text))


def detect_understanding(turn: ConversationTurn, lexicon: CompiledLexicon) -> int:
    return int(lexicon.asks_understanding(turn.prompt_text))


def _fraction(flags: List[bool]) -> float:
    return sum(flags) / len(flags)


def temporal_features(
    session: Session,
    calendar: Calendar,
    schedule: Sequence[ScheduleBlock],
) -> TemporalFeatures:
    start: datetime = session.start
    if not calendar.covers(start.date()):
        raise SessionOutsideCalendar(session.session_id)
    return TemporalFeatures(
        week_progress=calendar.week_of(start.date()),
        exam_period_indicator=_fraction(
            [calendar.week_of(t.timestamp.date()) in calendar.exam_weeks for t in session.turns]
        ),
        time_of_day=start.hour + start.minute / 60.0,
        in_class_indicator=_fraction(
            [any(block.contains(t.timestamp) for block in schedule) for t in session.turns]
        ),
    )


def extended_features(session: Session, events: Sequence[ActivityEvent]) -> ExtendedFeatures:
    start = session.start
    meetings = [e for e in events if e.kind == EventKind.CLASS_MEETING]
    releases = [e for e in events if e.kind == EventKind.ASSIGNMENT_RELEASE]
    deadlines = [e for e in events if e.kind == EventKind.ASSIGNMENT_DEADLINE]

    ended_before = [e.end for e in meetings if e.end <= start]
    starting_after = [e.start for e in meetings if e.start >= start]
    released = [e.start for e in releases if e.start <= start]
    due = [e.start for e in deadlines if e.start >= start]

    return ExtendedFeatures(
        minutes_since_prev_class=_minutes(start - max(ended_before)) if ended_before else None,
        minutes_until_next_class=_minutes(min(starting_after) - start) if starting_after else None,
        minutes_since_assignment_release=_minutes(start - max(released)) if released else None,
        minutes_until_assignment_deadline=_minutes(min(due) - start) if due else None,
    )


def featurize(
    session: Session,
    corpus: Corpus,
    lexicon: CompiledLexicon,
    events: Optional[Sequence[ActivityEvent]] = None,
) -> Tuple[EngagementFeatures, Optional[ExtendedFeatures]]:
    schedule = corpus.context.classes[session.class_id].class_schedule
    temporal = temporal_features(session, corpus.calendar, schedule)
    if events is None:
        events = corpus.events_for(session.class_id)

    core = EngagementFeatures(
        num_turns=count_turns(session),
        avg_minutes_per_turn=avg_minutes_per_turn(session),
        avg_words_per_prompt=avg_words_per_prompt(session),
        copy_paste_events=sum(detect_copy_paste(t, lexicon) for t in session.turns),
        direct_answer_requests=sum(detect_direct_answer(t, lexicon) for t in session.turns),
        understanding_queries=sum(detect_understanding(t, lexicon) for t in session.turns),
        **asdict(temporal),
    )
    extended = extended_features(session, events) if events else None
    return core, extended


@dataclass
class FeatureTable:
    frame: pd.DataFrame
    outside_calendar: List[str]


def featurize_sessions(
    sessions: Sequence[Session],
    corpus: Corpus,
    lexicon: CompiledLexicon,
    threads: int = 1,
) -> FeatureTable:
    events_by_class: Dict[str, List[ActivityEvent]] = {}
    for event in corpus.events:
        events_by_class.setdefault(event.class_id, []).append(event)

    def one(session: Session):
        try:
            return featurize(session, corpus, lexicon, events_by_class.get(session.class_id, []))
        except SessionOutsideCalendar:
            return None

    results = Parallel(n_jobs=threads, prefer="threads")(delayed(one)(s) for s in sessions)

    rows = []
    outside = []
    for session, result in zip(sessions, results):
        if result is None:
            outside.append(session.session_id)
            continue
        core, extended = result
        row = {"session_id": session.session_id, **asdict(core)}
        row.update(asdict(extended) if extended else dict.fromkeys(EXTENDED_FEATURES))
        rows.append(row)

    frame = pd.DataFrame(rows, columns=["session_id", *CORE_FEATURES, *EXTENDED_FEATURES])
    frame = frame.set_index("session_id")
    frame[list(EXTENDED_FEATURES)] = frame[list(EXTENDED_FEATURES)].astype(float)
    return FeatureTable(frame=frame, outside_calendar=outside)


def write_features(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, float_format="%.10g", lineterminator="\n")
    return path
