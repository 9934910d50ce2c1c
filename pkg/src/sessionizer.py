from dataclasses import dataclass
from datetime import datetime
from typing import Dict, FrozenSet, Iterable, List, Optional, Protocol, Sequence, Tuple

from joblib import Parallel, delayed
from pydantic import BaseModel, Field

from errors import MismatchedStreamLength
from ingest import ConversationTurn, Corpus
from text_utils import jaccard, token_set


class SegmentationConfig(BaseModel):
    gap_threshold_minutes: float = Field(default=15.0, gt=0)
    topic_stage_enabled: bool = True
    heuristic_similarity_threshold: float = Field(default=0.12, ge=0.0, le=1.0)
    min_turns_for_topic_split: int = Field(default=3, ge=2)
    include_responses: bool = False


@dataclass(frozen=True)
class Session:
    session_id: str
    enrollment_id: str
    class_id: str
    turns: Tuple[ConversationTurn, ...]

    def __post_init__(self):
        if not self.turns:
            raise ValueError(f"session {self.session_id} has no turns")

    @property
    def start(self) -> datetime:
        return self.turns[0].timestamp

    @property
    def end(self) -> datetime:
        return self.turns[-1].timestamp

    @property
    def num_turns(self) -> int:
        return len(self.turns)


@dataclass(frozen=True)
class BoundarySet:
    """Gap i means a new session starts at turn i (0-based), so 1 <= i <= n_turns - 1.

    ``evaluable`` restricts which gaps count when this set is used as gold;
    None means every gap is evaluable.
    """

    indices: Tuple[int, ...]
    n_turns: int
    evaluable: Optional[FrozenSet[int]] = None

    def __post_init__(self):
        if list(self.indices) != sorted(set(self.indices)):
            raise ValueError("boundary indices must be sorted and unique")
        if any(i < 1 or i >= self.n_turns for i in self.indices):
            raise ValueError(f"boundary index out of range for {self.n_turns} turns")

    @classmethod
    def of(cls, indices: Iterable[int], n_turns: int, evaluable: Optional[Iterable[int]] = None) -> "BoundarySet":
        return cls(
            indices=tuple(sorted(set(indices))),
            n_turns=n_turns,
            evaluable=None if evaluable is None else frozenset(evaluable),
        )

    @property
    def n_gaps(self) -> int:
        return max(self.n_turns - 1, 0)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class SegmentationScore:
    precision: float
    recall: float
    f1: float
    true_positives: int = 0
    n_predicted: int = 0
    n_gold: int = 0


class TopicDetector(Protocol):
    def detect(self, session_id: str, texts: Sequence[str]) -> List[int]:
        ...

    def detect_many(self, requests: Dict[str, List[str]]) -> Dict[str, Optional[List[int]]]:
        """None for a key means the detector could not answer for it."""
        ...


def heuristic_topic_similarity(prompt_a: str, prompt_b: str) -> float:
    return jaccard(token_set(prompt_a), token_set(prompt_b))


class HeuristicTopicDetector:
    def __init__(self, similarity_threshold: float = 0.12):
        self.similarity_threshold = similarity_threshold

    def detect(self, session_id: str, texts: Sequence[str]) -> List[int]:
        sets = [token_set(t) for t in texts]
        return [
            i for i in range(1, len(sets))
            if jaccard(sets[i - 1], sets[i]) < self.similarity_threshold
        ]

    def detect_many(self, requests: Dict[str, List[str]]) -> Dict[str, Optional[List[int]]]:
        return {key: self.detect(key, texts) for key, texts in requests.items()}


def _gap_exceeds(previous: ConversationTurn, current: ConversationTurn, threshold_seconds: float) -> bool:
    return (current.timestamp - previous.timestamp).total_seconds() > threshold_seconds


def _time_chunks(turns: Sequence[ConversationTurn], gap_threshold_minutes: float) -> List[List[ConversationTurn]]:
    if not turns:
        return []
    enrollments = {t.enrollment_id for t in turns}
    if len(enrollments) > 1:
        raise ValueError(f"segmentation expects one enrollment, got {len(enrollments)}")
    threshold_seconds = gap_threshold_minutes * 60.0
    chunks = [[turns[0]]]
    for previous, current in zip(turns, turns[1:]):
        if _gap_exceeds(previous, current, threshold_seconds):
            chunks.append([current])
        else:
            chunks[-1].append(current)
    return chunks


def _session_id(enrollment_id: str, ordinal: int) -> str:
    return f"{enrollment_id}:{ordinal:05d}"


def _to_sessions(chunks: List[List[ConversationTurn]]) -> List[Session]:
    return [
        Session(
            session_id=_session_id(chunk[0].enrollment_id, ordinal),
            enrollment_id=chunk[0].enrollment_id,
            class_id=chunk[0].class_id,
            turns=tuple(chunk),
        )
        for ordinal, chunk in enumerate(chunks)
    ]


def segment_time(turns: Sequence[ConversationTurn], gap_threshold_minutes: float) -> List[Session]:
    return _to_sessions(_time_chunks(turns, gap_threshold_minutes))


def _detector_texts(turns: Sequence[ConversationTurn], include_responses: bool) -> List[str]:
    if include_responses:
        return [f"{t.prompt_text}\n{t.response_text}" for t in turns]
    return [t.prompt_text for t in turns]


def _resolve_boundaries(
    requests: Dict[str, List[str]],
    detector: TopicDetector,
    config: SegmentationConfig,
    fallbacks: Optional[List[str]],
) -> Dict[str, BoundarySet]:
    if not requests:
        return {}
    answers = detector.detect_many(requests)
    heuristic = HeuristicTopicDetector(config.heuristic_similarity_threshold)
    resolved = {}
    # Keyed by request, never by arrival order.
    for key in sorted(requests):
        texts = requests[key]
        found = answers.get(key)
        if found is None:
            found = heuristic.detect(key, texts)
            if fallbacks is not None:
                fallbacks.append(key)
        resolved[key] = BoundarySet.of((i for i in found if 1 <= i < len(texts)), len(texts))
    return resolved


def detect_topic_boundaries(
    session: Session,
    detector: TopicDetector,
    config: SegmentationConfig,
    fallbacks: Optional[List[str]] = None,
) -> BoundarySet:
    if session.num_turns < config.min_turns_for_topic_split:
        return BoundarySet.of((), session.num_turns)
    texts = _detector_texts(session.turns, config.include_responses)
    return _resolve_boundaries({session.session_id: texts}, detector, config, fallbacks)[session.session_id]


def _split_at(chunk: List[ConversationTurn], boundaries: BoundarySet) -> List[List[ConversationTurn]]:
    cuts = [0, *boundaries.indices, len(chunk)]
    return [chunk[a:b] for a, b in zip(cuts, cuts[1:])]


def _topic_requests(
    chunks_by_enrollment: List[List[List[ConversationTurn]]],
    config: SegmentationConfig,
) -> Dict[str, List[str]]:
    requests = {}
    for chunks in chunks_by_enrollment:
        for ordinal, chunk in enumerate(chunks):
            if len(chunk) >= config.min_turns_for_topic_split:
                key = _session_id(chunk[0].enrollment_id, ordinal)
                requests[key] = _detector_texts(chunk, config.include_responses)
    return requests


def _combine(
    chunks_by_enrollment: List[List[List[ConversationTurn]]],
    config: SegmentationConfig,
    detector: TopicDetector,
    fallbacks: Optional[List[str]],
) -> List[List[Session]]:
    if not config.topic_stage_enabled:
        return [_to_sessions(chunks) for chunks in chunks_by_enrollment]
    resolved = _resolve_boundaries(_topic_requests(chunks_by_enrollment, config), detector, config, fallbacks)
    out = []
    for chunks in chunks_by_enrollment:
        pieces = []
        for ordinal, chunk in enumerate(chunks):
            key = _session_id(chunk[0].enrollment_id, ordinal)
            pieces.extend(_split_at(chunk, resolved[key]) if key in resolved else [chunk])
        out.append(_to_sessions(pieces))
    return out


def segment_combined(
    turns: Sequence[ConversationTurn],
    config: SegmentationConfig,
    detector: TopicDetector,
    fallbacks: Optional[List[str]] = None,
) -> List[Session]:
    chunks = _time_chunks(turns, config.gap_threshold_minutes)
    if not chunks:
        return []
    return _combine([chunks], config, detector, fallbacks)[0]


def segment_corpus(
    corpus: Corpus,
    config: SegmentationConfig,
    detector: TopicDetector,
    threads: int = 1,
    fallbacks: Optional[List[str]] = None,
) -> List[Session]:
    streams = [turns for _, turns in corpus.by_enrollment()]
    chunks_by_enrollment = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_time_chunks)(turns, config.gap_threshold_minutes) for turns in streams
    )
    sessions = []
    for per_enrollment in _combine(chunks_by_enrollment, config, detector, fallbacks):
        sessions.extend(per_enrollment)
    return sessions


def evaluate_segmentation(predicted: BoundarySet, gold: BoundarySet, n_gaps: int) -> SegmentationScore:
    if predicted.n_gaps != n_gaps or gold.n_gaps != n_gaps:
        raise MismatchedStreamLength(
            f"predicted covers {predicted.n_gaps} gaps, gold {gold.n_gaps}, expected {n_gaps}"
        )
    pred = set(predicted.indices)
    true = set(gold.indices)
    if gold.evaluable is not None:
        pred &= gold.evaluable
        true &= gold.evaluable
    return score_counts(len(pred & true), len(pred), len(true))


def score_counts(true_positives: int, n_predicted: int, n_gold: int) -> SegmentationScore:
    if n_predicted:
        precision = true_positives / n_predicted
    else:
        precision = 1.0 if n_gold == 0 else 0.0
    if n_gold:
        recall = true_positives / n_gold
    else:
        recall = 1.0 if n_predicted == 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return SegmentationScore(precision, recall, f1, true_positives, n_predicted, n_gold)


def pooled_score(scores: Iterable[SegmentationScore]) -> SegmentationScore:
    tp = n_pred = n_gold = 0
    for s in scores:
        tp += s.true_positives
        n_pred += s.n_predicted
        n_gold += s.n_gold
    return score_counts(tp, n_pred, n_gold)


def gold_from_page_context(turns: Sequence[ConversationTurn]) -> BoundarySet:
    boundaries = []
    evaluable = []
    for i in range(1, len(turns)):
        before, after = turns[i - 1].page_context, turns[i].page_context
        if before is None or after is None:
            continue
        evaluable.append(i)
        if before != after:
            boundaries.append(i)
    return BoundarySet.of(boundaries, len(turns), evaluable)


def boundaries_from_sessions(sessions: Sequence[Session]) -> BoundarySet:
    indices = []
    offset = 0
    for session in sessions:
        if offset:
            indices.append(offset)
        offset += session.num_turns
    return BoundarySet.of(indices, offset)
