import copy
import json
from datetime import date, datetime, timedelta, timezone

import pytest
from faker import Faker
from pydantic import ValidationError
import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import InputError, MalformedRecord, MissingField, UnresolvedClass
from ingest import (
    ActivityEvent,
    Calendar,
    ConversationTurn,
    Discipline,
    ScheduleBlock,
    Selectivity,
    build_corpus,
    drop_out_of_window,
    load_context,
    parse_record,
    parse_turn_file,
    parse_turn_files,
    parse_turns,
    serialize_turn,
    validate_corpus,
)

CST = timezone(timedelta(hours=8))


def record(**overrides):
    base = {
        "turn_id": "t1",
        "enrollment_id": "e1",
        "class_id": "c1",
        "ts": "2024-09-03T10:00:00+08:00",
        "prompt": "How does recursion work?",
    }
    base.update(overrides)
    return json.dumps({k: v for k, v in base.items() if v is not None}, ensure_ascii=False)


@pytest.fixture
def context_document():
    return {
        "classes": {
            "c1": {
                "discipline": "STEM",
                "institution_id": "i1",
                "class_schedule": [{"weekday": 0, "start_minute": 540, "end_minute": 630}],
                "size": 30,
            },
            "c2": {"discipline": "NonSTEM", "institution_id": "i2", "size": 12},
        },
        "institutions": {"i1": {"selectivity": "HighlySelective"}, "i2": {"selectivity": "LessSelective"}},
        "events": [
            {
                "class_id": "c1",
                "kind": "ClassMeeting",
                "start": "2024-09-02T09:00:00+08:00",
                "end": "2024-09-02T10:30:00+08:00",
            }
        ],
        "calendar": {"semester_start": "2024-09-02", "semester_end": "2024-12-20", "exam_weeks": [8, 16]},
    }


@pytest.fixture
def context_path(tmp_path, context_document):
    path = tmp_path / "context.json"
    path.write_text(json.dumps(context_document), encoding="utf-8")
    return path


def make_turn(turn_id, enrollment_id="e1", class_id="c1", minute=0, prompt="hello", day=3):
    return ConversationTurn(
        turn_id=turn_id,
        enrollment_id=enrollment_id,
        class_id=class_id,
        timestamp=datetime(2024, 9, day, 10, 0, tzinfo=CST) + timedelta(minutes=minute),
        prompt_text=prompt,
    )


class TestParseRecord:

    @pytest.mark.unit
    def test_valid_record(self):
        turn = parse_record(record(response="Recursion is...", page="p1", image=True))

        assert turn.turn_id == "t1"
        assert turn.enrollment_id == "e1"
        assert turn.prompt_text == "How does recursion work?"
        assert turn.response_text == "Recursion is..."
        assert turn.page_context == "p1"
        assert turn.has_image_upload is True

    @pytest.mark.unit
    def test_defaults_for_optional_fields(self):
        turn = parse_record(record())

        assert turn.response_text == ""
        assert turn.page_context is None
        assert turn.has_image_upload is False

    @pytest.mark.unit
    def test_keeps_record_offset_and_drops_microseconds(self):
        turn = parse_record(record(ts="2024-09-03T10:00:00.750-05:00"))

        assert turn.timestamp.utcoffset() == timedelta(hours=-5)
        assert turn.timestamp.microsecond == 0
        assert turn.timestamp.hour == 10

    @pytest.mark.unit
    def test_missing_prompt(self):
        with pytest.raises(MissingField) as exc:
            parse_record(record(prompt=None), line_no=7)

        assert exc.value.field == "prompt"
        assert exc.value.line_no == 7

    @pytest.mark.unit
    def test_naive_timestamp_is_malformed(self):
        with pytest.raises(MalformedRecord):
            parse_record(record(ts="2024-09-03T10:00:00"))

    @pytest.mark.unit
    def test_not_json(self):
        with pytest.raises(MalformedRecord):
            parse_record("{not json")

    @pytest.mark.unit
    def test_unknown_keys_ignored(self):
        turn = parse_record(record(model="tutor-v2"))

        assert turn.turn_id == "t1"

    @pytest.mark.unit
    def test_serialized_turn_parses_back(self):
        original = parse_record(record(prompt="解释一下递归", page="ch3", image=True))

        assert parse_record(serialize_turn(original)) == original


class TestParseStream:

    @pytest.mark.unit
    def test_skips_bad_lines_and_blank_lines(self):
        lines = [record(turn_id="a"), "", "garbage", record(turn_id="b", prompt=None), record(turn_id="c")]

        result = parse_turns(lines)

        assert [t.turn_id for t in result.turns] == ["a", "c"]
        assert result.skipped == 2
        assert any("line 3" in p for p in result.problems)
        assert any("prompt" in p for p in result.problems)

    @pytest.mark.unit
    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            parse_turn_file(tmp_path / "nope.jsonl")

    @pytest.mark.unit
    def test_multiple_files_keep_order(self, tmp_path):
        paths = []
        for shard in range(3):
            path = tmp_path / f"turns{shard}.jsonl"
            path.write_text(
                "\n".join(record(turn_id=f"s{shard}-{i}") for i in range(4)) + "\n", encoding="utf-8"
            )
            paths.append(path)

        single = parse_turn_files(paths, threads=1)
        threaded = parse_turn_files(paths, threads=3)

        assert [t.turn_id for t in single.turns] == [t.turn_id for t in threaded.turns]
        assert len(single.turns) == 12

    @pytest.mark.unit
    def test_free_text_prompts_survive(self):
        fake = Faker(["en_US", "zh_CN"])
        Faker.seed(11)
        prompts = [fake.paragraph(nb_sentences=3) for _ in range(100)]

        result = parse_turns(record(turn_id=f"t{i}", prompt=p) for i, p in enumerate(prompts))

        assert result.skipped == 0
        assert [t.prompt_text for t in result.turns] == prompts


class TestContext:

    @pytest.mark.unit
    def test_load_context(self, context_path):
        context, events, calendar = load_context(context_path)

        assert context.discipline_of("c1") == Discipline.STEM
        assert context.selectivity_of("c2") == Selectivity.LESS_SELECTIVE
        assert context.student_of("e9") == "e9"
        assert len(events) == 1
        assert calendar.exam_weeks == frozenset({8, 16})

    @pytest.mark.unit
    def test_missing_context(self, tmp_path):
        with pytest.raises(InputError):
            load_context(tmp_path / "missing.json")

    @pytest.mark.unit
    def test_unknown_institution_rejected(self, tmp_path, context_document):
        context_document["classes"]["c1"]["institution_id"] = "nowhere"
        path = tmp_path / "context.json"
        path.write_text(json.dumps(context_document), encoding="utf-8")

        with pytest.raises(ValidationError):
            load_context(path)

    @pytest.mark.unit
    def test_class_meeting_needs_end(self):
        with pytest.raises(ValidationError):
            ActivityEvent(class_id="c1", kind="ClassMeeting", start=datetime(2024, 9, 2, 9, tzinfo=CST))

    @pytest.mark.unit
    def test_deadline_without_end_is_fine(self):
        event = ActivityEvent(class_id="c1", kind="AssignmentDeadline", start=datetime(2024, 9, 9, 23, tzinfo=CST))

        assert event.end is None

    @pytest.mark.unit
    def test_week_numbering(self):
        calendar = Calendar(semester_start=date(2024, 9, 2), semester_end=date(2024, 12, 20))

        assert calendar.week_of(date(2024, 9, 2)) == 1
        assert calendar.week_of(date(2024, 9, 8)) == 1
        assert calendar.week_of(date(2024, 9, 9)) == 2
        assert calendar.covers(date(2024, 12, 20))
        assert not calendar.covers(date(2024, 9, 1))

    @pytest.mark.unit
    def test_schedule_block(self):
        block = ScheduleBlock(weekday=0, start_minute=540, end_minute=630)

        assert block.contains(datetime(2024, 9, 2, 9, 0, tzinfo=CST))
        assert not block.contains(datetime(2024, 9, 2, 10, 30, tzinfo=CST))
        assert not block.contains(datetime(2024, 9, 3, 9, 30, tzinfo=CST))

    @pytest.mark.unit
    def test_schedule_block_order(self):
        with pytest.raises(ValidationError):
            ScheduleBlock(weekday=0, start_minute=600, end_minute=600)


class TestCorpus:

    @pytest.mark.unit
    def test_build_sorts_by_enrollment_time_and_id(self, context_path):
        context, events, calendar = load_context(context_path)
        turns = [
            make_turn("b", minute=5),
            make_turn("z", enrollment_id="e0", class_id="c2"),
            make_turn("a", minute=5),
            make_turn("c", minute=0),
        ]

        corpus = build_corpus(turns, context, events, calendar)

        assert [t.turn_id for t in corpus.turns] == ["z", "c", "a", "b"]
        assert [e for e, _ in corpus.by_enrollment()] == ["e0", "e1"]

    @pytest.mark.unit
    def test_rebuilding_is_a_no_op(self, context_path):
        context, events, calendar = load_context(context_path)
        turns = [make_turn("b", minute=5), make_turn("a", minute=5), make_turn("c", minute=0)]

        once = build_corpus(turns, context, events, calendar)
        twice = build_corpus(once.turns, once.context, once.events, once.calendar)

        assert twice == once

    @pytest.mark.unit
    def test_unresolved_class(self, context_path):
        context, events, calendar = load_context(context_path)

        with pytest.raises(UnresolvedClass):
            build_corpus([make_turn("a", class_id="c404")], context, events, calendar)

    @pytest.mark.unit
    def test_validation_report(self, context_path):
        context, events, calendar = load_context(context_path)
        turns = [
            make_turn("dup"),
            make_turn("dup", minute=1),
            make_turn("early", day=1),
            make_turn("blank", minute=2, prompt="   "),
        ]
        corpus = build_corpus(turns, context, events, calendar)

        before = copy.deepcopy(corpus)

        report = validate_corpus(corpus)

        assert corpus == before
        assert report.duplicate_turn_ids == ["dup"]
        assert report.out_of_window == ["early"]
        assert report.empty_prompts == ["blank"]
        assert not report.is_clean

    @pytest.mark.unit
    def test_drop_out_of_window(self, context_path):
        context, events, calendar = load_context(context_path)
        corpus = build_corpus([make_turn("early", day=1), make_turn("ok")], context, events, calendar)

        kept, dropped = drop_out_of_window(corpus)

        assert dropped == 1
        assert [t.turn_id for t in kept.turns] == ["ok"]
