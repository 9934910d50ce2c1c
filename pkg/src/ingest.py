import json
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from enum import Enum
from itertools import groupby
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple

from joblib import Parallel, delayed
from pydantic import (
    AwareDatetime,
    BaseModel,
    ConfigDict,
    Field,
    PositiveInt,
    ValidationError,
    model_validator,
)

from errors import InputError, MalformedRecord, MissingField, UnresolvedClass


class Discipline(Enum):
    STEM = "STEM"
    NON_STEM = "NonSTEM"


class Selectivity(Enum):
    HIGHLY_SELECTIVE = "HighlySelective"
    LESS_SELECTIVE = "LessSelective"


class EventKind(Enum):
    CLASS_MEETING = "ClassMeeting"
    ASSIGNMENT_RELEASE = "AssignmentRelease"
    ASSIGNMENT_DEADLINE = "AssignmentDeadline"
    EXAM_WINDOW = "ExamWindow"


def _pin_offset(value: datetime) -> datetime:
    # Fixed-offset tzinfo keeps equality, hashing and isoformat() stable.
    return value.replace(microsecond=0, tzinfo=timezone(value.utcoffset()))


@dataclass(frozen=True)
class ConversationTurn:
    turn_id: str
    enrollment_id: str
    class_id: str
    timestamp: datetime
    prompt_text: str
    response_text: str = ""
    page_context: Optional[str] = None
    has_image_upload: bool = False


class TurnRecord(BaseModel):
    model_config = ConfigDict(extra="ignore")

    turn_id: str
    enrollment_id: str
    class_id: str
    ts: AwareDatetime
    prompt: str
    response: str = ""
    page: Optional[str] = None
    image: bool = False

    def to_turn(self) -> ConversationTurn:
        return ConversationTurn(
            turn_id=self.turn_id,
            enrollment_id=self.enrollment_id,
            class_id=self.class_id,
            timestamp=_pin_offset(self.ts),
            prompt_text=self.prompt,
            response_text=self.response,
            page_context=self.page,
            has_image_upload=self.image,
        )


class ScheduleBlock(BaseModel):
    model_config = ConfigDict(frozen=True)

    weekday: int = Field(ge=0, le=6)
    start_minute: int = Field(ge=0, le=1440)
    end_minute: int = Field(ge=0, le=1440)

    @model_validator(mode="after")
    def _check_order(self) -> "ScheduleBlock":
        if self.start_minute >= self.end_minute:
            raise ValueError("schedule block must have start_minute < end_minute")
        return self

    def contains(self, moment: datetime) -> bool:
        minute = moment.hour * 60 + moment.minute
        return moment.weekday() == self.weekday and self.start_minute <= minute < self.end_minute


class ClassMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    discipline: Discipline
    institution_id: str
    class_schedule: Tuple[ScheduleBlock, ...] = ()
    size: PositiveInt


class InstitutionMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    selectivity: Selectivity


class ContextMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    classes: Dict[str, ClassMeta]
    institutions: Dict[str, InstitutionMeta]
    # enrollment_id -> student_id, only needed for student-level clustering
    students: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_institutions(self) -> "ContextMeta":
        for class_id, meta in self.classes.items():
            if meta.institution_id not in self.institutions:
                raise ValueError(f"class '{class_id}' references unknown institution '{meta.institution_id}'")
        return self

    def discipline_of(self, class_id: str) -> Discipline:
        return self.classes[class_id].discipline

    def selectivity_of(self, class_id: str) -> Selectivity:
        return self.institutions[self.classes[class_id].institution_id].selectivity

    def student_of(self, enrollment_id: str) -> str:
        return self.students.get(enrollment_id, enrollment_id)


class ActivityEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    class_id: str
    kind: EventKind
    start: AwareDatetime
    end: Optional[AwareDatetime] = None

    @model_validator(mode="after")
    def _check_span(self) -> "ActivityEvent":
        if self.kind in (EventKind.CLASS_MEETING, EventKind.EXAM_WINDOW) and self.end is None:
            raise ValueError(f"{self.kind.value} events need both start and end")
        if self.end is not None and self.end <= self.start:
            raise ValueError("event end must be after start")
        return self


class Calendar(BaseModel):
    model_config = ConfigDict(frozen=True)

    semester_start: date
    semester_end: date
    exam_weeks: frozenset[int] = frozenset()

    @model_validator(mode="after")
    def _check_range(self) -> "Calendar":
        if self.semester_end < self.semester_start:
            raise ValueError("semester_end precedes semester_start")
        return self

    @property
    def n_weeks(self) -> int:
        return self.week_of(self.semester_end)

    def week_of(self, day: date) -> int:
        return 1 + (day - self.semester_start).days // 7

    def covers(self, day: date) -> bool:
        return self.semester_start <= day <= self.semester_end


class ContextDocument(BaseModel):
    classes: Dict[str, ClassMeta]
    institutions: Dict[str, InstitutionMeta]
    students: Dict[str, str] = Field(default_factory=dict)
    events: List[ActivityEvent] = Field(default_factory=list)
    calendar: Calendar

    def split(self) -> Tuple[ContextMeta, List[ActivityEvent], Calendar]:
        context = ContextMeta(classes=self.classes, institutions=self.institutions, students=self.students)
        return context, list(self.events), self.calendar


@dataclass(frozen=True)
class Corpus:
    turns: Tuple[ConversationTurn, ...]
    context: ContextMeta
    events: Tuple[ActivityEvent, ...]
    calendar: Calendar

    def by_enrollment(self) -> Iterator[Tuple[str, List[ConversationTurn]]]:
        for enrollment_id, group in groupby(self.turns, key=lambda t: t.enrollment_id):
            yield enrollment_id, list(group)

    def events_for(self, class_id: str) -> List[ActivityEvent]:
        return [e for e in self.events if e.class_id == class_id]


@dataclass
class ParseResult:
    turns: List[ConversationTurn] = field(default_factory=list)
    skipped: int = 0
    problems: List[str] = field(default_factory=list)


@dataclass
class ValidationReport:
    duplicate_turn_ids: List[str] = field(default_factory=list)
    out_of_window: List[str] = field(default_factory=list)
    empty_prompts: List[str] = field(default_factory=list)

    @property
    def counts(self) -> Dict[str, int]:
        return {
            "duplicate_turn_ids": len(self.duplicate_turn_ids),
            "out_of_window": len(self.out_of_window),
            "empty_prompts": len(self.empty_prompts),
        }

    @property
    def is_clean(self) -> bool:
        return not any(self.counts.values())


def parse_record(line: str, line_no: Optional[int] = None) -> ConversationTurn:
    try:
        return TurnRecord.model_validate_json(line).to_turn()
    except ValidationError as e:
        for err in e.errors():
            if err["type"] == "missing":
                raise MissingField(str(err["loc"][0]), line_no) from e
        raise MalformedRecord(e.errors()[0]["msg"], line_no) from e


def parse_turns(stream: Iterable[str]) -> ParseResult:
    result = ParseResult()
    try:
        for line_no, line in enumerate(stream, 1):
            if not line.strip():
                continue
            try:
                result.turns.append(parse_record(line, line_no))
            except MalformedRecord as e:
                result.skipped += 1
                result.problems.append(str(e))
    except (OSError, UnicodeDecodeError) as e:
        raise InputError(f"unreadable turn stream: {e}") from e
    return result


def parse_turn_file(path: Path) -> ParseResult:
    try:
        with open(path, "r", encoding="utf-8") as f:
            result = parse_turns(f)
    except FileNotFoundError as e:
        raise InputError(f"turn log not found: {path}") from e
    result.problems = [f"{path}: {p}" for p in result.problems]
    return result


def parse_turn_files(paths: List[Path], threads: int = 1) -> ParseResult:
    shards = Parallel(n_jobs=threads, prefer="threads")(delayed(parse_turn_file)(p) for p in paths)
    merged = ParseResult()
    for shard in shards:
        merged.turns.extend(shard.turns)
        merged.skipped += shard.skipped
        merged.problems.extend(shard.problems)
    return merged


def serialize_turn(turn: ConversationTurn) -> str:
    return json.dumps(
        {
            "turn_id": turn.turn_id,
            "enrollment_id": turn.enrollment_id,
            "class_id": turn.class_id,
            "ts": turn.timestamp.isoformat(),
            "prompt": turn.prompt_text,
            "response": turn.response_text,
            "page": turn.page_context,
            "image": turn.has_image_upload,
        },
        ensure_ascii=False,
    )


def load_context(path: Path) -> Tuple[ContextMeta, List[ActivityEvent], Calendar]:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise InputError(f"context document not found: {path}") from e
    return ContextDocument.model_validate_json(raw).split()


def _sort_key(turn: ConversationTurn):
    return (turn.enrollment_id, turn.timestamp, turn.turn_id)


def build_corpus(
    turns: Iterable[ConversationTurn],
    context: ContextMeta,
    events: Iterable[ActivityEvent],
    calendar: Calendar,
) -> Corpus:
    turns = list(turns)
    for turn in turns:
        if turn.class_id not in context.classes:
            raise UnresolvedClass(turn.class_id)
    events = sorted(events, key=lambda e: (e.class_id, e.start, e.kind.value))
    return Corpus(
        turns=tuple(sorted(turns, key=_sort_key)),
        context=context,
        events=tuple(events),
        calendar=calendar,
    )


def validate_corpus(corpus: Corpus) -> ValidationReport:
    report = ValidationReport()
    id_counts = Counter(t.turn_id for t in corpus.turns)
    report.duplicate_turn_ids = sorted(tid for tid, n in id_counts.items() if n > 1)
    for turn in corpus.turns:
        if not corpus.calendar.covers(turn.timestamp.date()):
            report.out_of_window.append(turn.turn_id)
        if not turn.prompt_text.strip() and not turn.has_image_upload:
            report.empty_prompts.append(turn.turn_id)
    return report


def drop_out_of_window(corpus: Corpus) -> Tuple[Corpus, int]:
    kept = tuple(t for t in corpus.turns if corpus.calendar.covers(t.timestamp.date()))
    return replace(corpus, turns=kept), len(corpus.turns) - len(kept)


def enrollment_ids(corpus: Corpus) -> Set[str]:
    return {t.enrollment_id for t in corpus.turns}
