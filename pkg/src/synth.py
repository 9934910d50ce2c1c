import json
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, NonNegativeFloat, PositiveInt, model_validator

from errors import NonAbsorbing
from features import CORE_FEATURES
from ingest import ConversationTurn, serialize_turn
from procmine import END, START, StateSequence
from sessionizer import BoundarySet

MAX_SEQUENCE_STATES = 10_000
ANCHORS_PER_TOPIC = 3
BODY_TOKENS_PER_TOPIC = 12
BODY_TOKENS_PER_PROMPT = 4


class StyleProfile(BaseModel):
    extra_turns_mean: NonNegativeFloat = 2.0
    filler_words: int = Field(default=4, ge=0)
    cue: Optional[str] = None
    image_rate: float = Field(default=0.0, ge=0.0, le=1.0)


def _default_styles() -> Dict[str, StyleProfile]:
    return {
        "Deep": StyleProfile(extra_turns_mean=6.0, filler_words=20, cue="why does"),
        "Shallow": StyleProfile(extra_turns_mean=0.5, filler_words=2, cue="give me the answer to"),
        "Routine": StyleProfile(extra_turns_mean=2.0, filler_words=6),
        "Exam": StyleProfile(extra_turns_mean=2.0, filler_words=40, cue="as follows", image_rate=0.5),
    }


def _default_style_chain() -> Dict[str, Dict[str, float]]:
    return {
        START: {"Deep": 0.2, "Shallow": 0.3, "Routine": 0.3, "Exam": 0.2},
        "Deep": {"Deep": 0.5, "Shallow": 0.2, "Routine": 0.2, "Exam": 0.1},
        "Shallow": {"Deep": 0.1, "Shallow": 0.5, "Routine": 0.3, "Exam": 0.1},
        "Routine": {"Deep": 0.1, "Shallow": 0.2, "Routine": 0.6, "Exam": 0.1},
        "Exam": {"Deep": 0.1, "Shallow": 0.2, "Routine": 0.2, "Exam": 0.5},
    }


class SynthSpec(BaseModel):
    seed: int = 0
    n_enrollments: PositiveInt = 50
    n_classes: PositiveInt = 4
    sessions_median: float = Field(default=5.0, gt=0)
    sessions_sigma: NonNegativeFloat = 1.2
    max_sessions: PositiveInt = 60
    min_turns_per_session: int = Field(default=2, ge=1)
    gap_threshold_minutes: float = Field(default=15.0, gt=0)
    margin_minutes: float = Field(default=1.0, gt=0)
    boundary_mode: Literal["time", "topic", "mixed"] = "mixed"
    topic_vocab: Literal["disjoint", "shared"] = "disjoint"
    cue_rate: float = Field(default=0.35, ge=0.0, le=1.0)
    page_context_rate: float = Field(default=0.5, ge=0.0, le=1.0)
    styles: Dict[str, StyleProfile] = Field(default_factory=_default_styles)
    style_chain: Dict[str, Dict[str, float]] = Field(default_factory=_default_style_chain)
    semester_start: date = date(2024, 9, 2)
    n_weeks: PositiveInt = 16
    exam_weeks: List[int] = Field(default_factory=lambda: [8, 16])
    utc_offset_hours: int = Field(default=8, ge=-12, le=14)
    stem_share: float = Field(default=0.5, ge=0.0, le=1.0)
    non_adopter_share: float = Field(default=0.4, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check(self) -> "SynthSpec":
        if self.boundary_mode != "time" and self.topic_vocab == "shared":
            raise ValueError("topic boundaries need a disjoint topic vocabulary")
        if self.margin_minutes >= self.gap_threshold_minutes:
            raise ValueError("margin must be smaller than the gap threshold")
        for source, row in self.style_chain.items():
            if source != START and source not in self.styles:
                raise ValueError(f"style chain row '{source}' is not a style")
            unknown = set(row) - set(self.styles)
            if unknown:
                raise ValueError(f"style chain row '{source}' targets unknown styles {sorted(unknown)}")
            if sum(row.values()) <= 0:
                raise ValueError(f"style chain row '{source}' has no mass")
        return self

    @property
    def semester_end(self) -> date:
        return self.semester_start + timedelta(days=7 * self.n_weeks - 1)

    @property
    def tz(self) -> timezone:
        return timezone(timedelta(hours=self.utc_offset_hours))


class ClusterSpec(BaseModel):
    seed: int = 0
    n: PositiveInt = 2000
    k: PositiveInt = 4
    n_features: PositiveInt = 10
    separation: float = Field(default=10.0, gt=0)
    spread: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "ClusterSpec":
        if self.k > self.n_features:
            raise ValueError("need at least as many features as clusters")
        return self


@dataclass
class SegmentedLogs:
    turns: List[ConversationTurn] = field(default_factory=list)
    gold: Dict[str, BoundarySet] = field(default_factory=dict)
    # planted session id -> style label
    labels: Dict[str, str] = field(default_factory=dict)
    enrollment_classes: Dict[str, str] = field(default_factory=dict)


def _class_id(index: int) -> str:
    return f"c{index:03d}"


def _draw_session_count(rng: np.random.Generator, spec: SynthSpec) -> int:
    raw = rng.lognormal(np.log(spec.sessions_median), spec.sessions_sigma)
    return int(np.clip(round(raw), 1, spec.max_sessions))


def _draw_styles(rng: np.random.Generator, spec: SynthSpec, n: int) -> List[str]:
    styles = []
    current = START
    for _ in range(n):
        row = spec.style_chain.get(current) or spec.style_chain[START]
        names = sorted(row)
        weights = np.array([row[name] for name in names], dtype=float)
        current = names[rng.choice(len(names), p=weights / weights.sum())]
        styles.append(current)
    return styles


class _TopicPool:
    def __init__(self, shared: bool):
        self.shared = shared
        self.next_id = 0

    def take(self) -> Tuple[int, int]:
        """(vocabulary pool, page serial) for the next planted session."""
        serial = self.next_id
        self.next_id += 1
        return (0 if self.shared else serial), serial


def _prompt(rng: np.random.Generator, pool: int, profile: StyleProfile, cue: bool) -> str:
    anchors = [f"w{pool}a{j}" for j in range(ANCHORS_PER_TOPIC)]
    body = rng.choice(BODY_TOKENS_PER_TOPIC, size=BODY_TOKENS_PER_PROMPT, replace=False)
    words = anchors + [f"w{pool}b{j}" for j in sorted(body)]
    # filler repeats anchors: longer prompts, same token set
    words += [anchors[j % ANCHORS_PER_TOPIC] for j in range(profile.filler_words)]
    if cue and profile.cue:
        words = profile.cue.split() + words
    return " ".join(words)


def gen_segmented_logs(spec: SynthSpec) -> SegmentedLogs:
    rng = np.random.default_rng(spec.seed)
    pools = _TopicPool(shared=spec.topic_vocab == "shared")
    threshold = spec.gap_threshold_minutes * 60
    margin = spec.margin_minutes * 60
    semester_seconds = 7 * spec.n_weeks * 86400
    origin = datetime.combine(spec.semester_start, datetime.min.time(), tzinfo=spec.tz)
    out = SegmentedLogs()

    for index in range(spec.n_enrollments):
        enrollment_id = f"e{index:05d}"
        class_id = _class_id(index % spec.n_classes)
        out.enrollment_classes[enrollment_id] = class_id
        n_sessions = _draw_session_count(rng, spec)
        styles = _draw_styles(rng, spec, n_sessions)
        sizes = [
            spec.min_turns_per_session + int(rng.poisson(spec.styles[s].extra_turns_mean)) for s in styles
        ]
        if spec.boundary_mode == "time":
            kinds = ["time"] * (n_sessions - 1)
        elif spec.boundary_mode == "topic":
            kinds = ["topic"] * (n_sessions - 1)
        else:
            kinds = ["time" if flip else "topic" for flip in rng.random(n_sessions - 1) < 0.5]

        # time boundaries share the slack so every enrollment stays inside the semester
        n_time = kinds.count("time")
        budget = 0.7 * semester_seconds
        weights = rng.exponential(size=n_time)
        slack = iter(weights / weights.sum() * budget * rng.uniform(0.3, 1.0) if n_time else [])
        clock = float(rng.uniform(0.02, 0.2) * semester_seconds)

        stream: List[ConversationTurn] = []
        boundaries = []
        for ordinal, (style, size) in enumerate(zip(styles, sizes)):
            if ordinal:
                boundaries.append(len(stream))
                if kinds[ordinal - 1] == "time":
                    clock += threshold + margin + next(slack)
                else:
                    clock += rng.uniform(30, threshold - margin)
            pool, serial = pools.take()
            profile = spec.styles[style]
            page = f"page-{serial:06d}" if rng.random() < spec.page_context_rate else None
            cue = rng.random() < spec.cue_rate
            for turn_no in range(size):
                if turn_no:
                    clock += rng.uniform(30, threshold - margin)
                stamp = origin + timedelta(seconds=int(clock))
                stream.append(
                    ConversationTurn(
                        turn_id=f"{enrollment_id}-t{len(stream):05d}",
                        enrollment_id=enrollment_id,
                        class_id=class_id,
                        timestamp=stamp,
                        prompt_text=_prompt(rng, pool, profile, cue and turn_no == 0),
                        response_text=f"reply on w{pool}a0",
                        page_context=page,
                        has_image_upload=bool(rng.random() < profile.image_rate),
                    )
                )
            out.labels[f"{enrollment_id}:{ordinal:05d}"] = style
        out.turns.extend(stream)
        out.gold[enrollment_id] = BoundarySet.of(boundaries, len(stream))
    return out


def gen_clustered_features(spec: ClusterSpec) -> Tuple[pd.DataFrame, np.ndarray]:
    """Gaussian blobs on a regular simplex: every pair of centers is ``separation`` apart."""
    rng = np.random.default_rng(spec.seed)
    centers = np.zeros((spec.k, spec.n_features))
    if spec.k > 1:
        centers[np.arange(spec.k), np.arange(spec.k)] = spec.separation / np.sqrt(2)
    labels = rng.integers(spec.k, size=spec.n)
    points = centers[labels] + rng.normal(0.0, spec.spread, size=(spec.n, spec.n_features))
    columns = list(CORE_FEATURES) if spec.n_features == len(CORE_FEATURES) else [
        f"x{j}" for j in range(spec.n_features)
    ]
    index = pd.Index([f"s{i:06d}" for i in range(spec.n)], name="session_id")
    return pd.DataFrame(points, index=index, columns=columns), labels


def _check_absorbing(states: Sequence[str], probs: np.ndarray) -> None:
    end = states.index(END)
    # states that can reach End, walking edges backwards
    reaches_end = {end}
    changed = True
    while changed:
        changed = False
        for i in range(len(states)):
            if i not in reaches_end and any(probs[i, j] > 0 for j in reaches_end):
                reaches_end.add(i)
                changed = True
    # every state reachable from Start must be able to finish
    seen, frontier = {0}, [0]
    while frontier:
        i = frontier.pop()
        if i not in reaches_end:
            raise NonAbsorbing(f"End is unreachable from state '{states[i]}'")
        for j in np.flatnonzero(probs[i] > 0):
            if j != end and j not in seen:
                seen.add(int(j))
                frontier.append(int(j))


def gen_markov_sequences(matrix: pd.DataFrame, n: int, seed: int) -> List[StateSequence]:
    """Sample ``n`` sequences from a chain given as a from/to probability frame.

    The frame's index and columns list the same states, Start first and End last.
    """
    states = list(matrix.index)
    if list(matrix.columns) != states or states[0] != START or states[-1] != END:
        raise ValueError("matrix must be square over (Start, ..., End)")
    probs = matrix.to_numpy(dtype=float)
    if (probs < 0).any():
        raise ValueError("transition probabilities must be non-negative")
    for i, state in enumerate(states[:-1]):
        if abs(probs[i].sum() - 1.0) > 1e-9:
            raise ValueError(f"row '{state}' is not stochastic")
    _check_absorbing(states, probs)

    rng = np.random.default_rng(seed)
    end = len(states) - 1
    sequences = []
    for index in range(n):
        path = [0]
        while path[-1] != end:
            if len(path) >= MAX_SEQUENCE_STATES:
                raise NonAbsorbing(f"sequence exceeded {MAX_SEQUENCE_STATES} states")
            path.append(int(rng.choice(len(states), p=probs[path[-1]])))
        sequences.append(StateSequence(f"s{index:05d}", tuple(states[i] for i in path)))
    return sequences


def _context_document(spec: SynthSpec, logs: SegmentedLogs) -> Dict:
    rng = np.random.default_rng(spec.seed + 1)
    enrolled: Dict[str, int] = {}
    for class_id in logs.enrollment_classes.values():
        enrolled[class_id] = enrolled.get(class_id, 0) + 1

    classes, events = {}, []
    for index in range(spec.n_classes):
        class_id = _class_id(index)
        active = enrolled.get(class_id, 0)
        weekday = index % 5
        classes[class_id] = {
            "discipline": "STEM" if rng.random() < spec.stem_share else "NonSTEM",
            "institution_id": f"inst{index % 2}",
            "class_schedule": [{"weekday": weekday, "start_minute": 540, "end_minute": 630}],
            "size": max(1, int(np.ceil(active / (1 - spec.non_adopter_share)))),
        }
        first_meeting = spec.semester_start + timedelta(days=weekday)
        for week in range(spec.n_weeks):
            day = first_meeting + timedelta(days=7 * week)
            start = datetime.combine(day, datetime.min.time(), tzinfo=spec.tz) + timedelta(minutes=540)
            events.append(
                {"class_id": class_id, "kind": "ClassMeeting", "start": start.isoformat(),
                 "end": (start + timedelta(minutes=90)).isoformat()}
            )
            if week % 2 == 0:
                events.append({"class_id": class_id, "kind": "AssignmentRelease", "start": start.isoformat()})
                due = start + timedelta(days=13, hours=14)
                events.append({"class_id": class_id, "kind": "AssignmentDeadline", "start": due.isoformat()})

    # roughly one student in four takes two classes
    students = {}
    n_students = max(1, (3 * spec.n_enrollments) // 4)
    for enrollment_id in sorted(logs.enrollment_classes):
        students[enrollment_id] = f"st{int(enrollment_id[1:]) % n_students:05d}"

    return {
        "classes": classes,
        "institutions": {"inst0": {"selectivity": "HighlySelective"}, "inst1": {"selectivity": "LessSelective"}},
        "students": students,
        "events": events,
        "calendar": {
            "semester_start": spec.semester_start.isoformat(),
            "semester_end": spec.semester_end.isoformat(),
            "exam_weeks": sorted(spec.exam_weeks),
        },
    }


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_bundle(spec: SynthSpec, out_dir: Path) -> Dict[str, Path]:
    """Write a corpus in the ingest formats plus gold sidecars that the pipeline never reads."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logs = gen_segmented_logs(spec)
    paths = {
        "turns": out_dir / "turns.jsonl",
        "context": out_dir / "context.json",
        "config": out_dir / "config.json",
        "gold_boundaries": out_dir / "gold_boundaries.json",
        "gold_labels": out_dir / "gold_labels.json",
    }
    with open(paths["turns"], "w", encoding="utf-8", newline="\n") as f:
        for turn in logs.turns:
            f.write(serialize_turn(turn) + "\n")
    _dump(paths["context"], _context_document(spec, logs))
    _dump(
        paths["config"],
        {
            "turns": ["turns.jsonl"],
            "context": "context.json",
            "seed": spec.seed,
            "segmentation": {"gap_threshold_minutes": spec.gap_threshold_minutes},
            "output_dir": "out",
        },
    )
    _dump(
        paths["gold_boundaries"],
        {e: {"n_turns": b.n_turns, "boundaries": list(b.indices)} for e, b in sorted(logs.gold.items())},
    )
    _dump(paths["gold_labels"], dict(sorted(logs.labels.items())))
    return paths


def load_gold_boundaries(path: Path) -> Dict[str, BoundarySet]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {e: BoundarySet.of(v["boundaries"], v["n_turns"]) for e, v in raw.items()}
