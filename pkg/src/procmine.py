from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import EmptyInput, StateSetMismatch, UnlabeledSession
from sessionizer import Session

START = "Start"
END = "End"


@dataclass(frozen=True)
class StateSequence:
    enrollment_id: str
    states: Tuple[str, ...]

    def __post_init__(self):
        if len(self.states) < 3:
            raise ValueError(f"sequence for {self.enrollment_id} needs at least one session")
        if self.states[0] != START or self.states[-1] != END:
            raise ValueError("sequence must run from Start to End")
        if START in self.states[1:] or END in self.states[:-1]:
            raise ValueError("Start and End may appear only at the ends")

    @property
    def labels(self) -> Tuple[str, ...]:
        return self.states[1:-1]


@dataclass(frozen=True)
class TransitionMatrix:
    """First-order transition counts over (Start, labels..., End).

    Rows are from-states, columns to-states. Rows with no outgoing
    transitions have undefined probabilities (NaN).
    """

    states: Tuple[str, ...]
    counts: np.ndarray

    @property
    def labels(self) -> Tuple[str, ...]:
        return self.states[1:-1]

    @property
    def probs(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(totals > 0, self.counts / np.where(totals > 0, totals, 1), np.nan)

    @property
    def total_transitions(self) -> int:
        return int(self.counts.sum())

    def _index(self, state: str) -> int:
        return self.states.index(state)

    def prob(self, source: str, target: str) -> float:
        return float(self.probs[self._index(source), self._index(target)])

    def count(self, source: str, target: str) -> int:
        return int(self.counts[self._index(source), self._index(target)])

    def counts_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.counts, index=pd.Index(self.states, name="from"), columns=list(self.states))

    def probs_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.probs, index=pd.Index(self.states, name="from"), columns=list(self.states))


def build_sequences(
    assignments: Mapping[str, int],
    sessions: Sequence[Session],
    label_map: Mapping[int, str],
) -> List[StateSequence]:
    by_enrollment: Dict[str, List[Session]] = {}
    for session in sessions:
        by_enrollment.setdefault(session.enrollment_id, []).append(session)

    sequences = []
    for enrollment_id in sorted(by_enrollment):
        ordered = sorted(by_enrollment[enrollment_id], key=lambda s: (s.start, s.session_id))
        labels = []
        for session in ordered:
            cluster = assignments.get(session.session_id)
            if cluster is None or int(cluster) not in label_map:
                raise UnlabeledSession(f"session '{session.session_id}' has no engagement label")
            labels.append(label_map[int(cluster)])
        sequences.append(StateSequence(enrollment_id, (START, *labels, END)))
    return sequences


def state_space(sequences: Sequence[StateSequence], labels: Optional[Sequence[str]] = None) -> Tuple[str, ...]:
    if labels is None:
        labels = sorted({label for seq in sequences for label in seq.labels})
    return (START, *labels, END)


def _count(sequences: Sequence[StateSequence], index: Dict[str, int]) -> np.ndarray:
    counts = np.zeros((len(index), len(index)), dtype=np.int64)
    for seq in sequences:
        try:
            codes = [index[s] for s in seq.states]
        except KeyError as e:
            raise StateSetMismatch(f"state {e.args[0]!r} not in the state list") from e
        np.add.at(counts, (codes[:-1], codes[1:]), 1)
    return counts


def fit_fomm(
    sequences: Sequence[StateSequence],
    labels: Optional[Sequence[str]] = None,
    threads: int = 1,
) -> TransitionMatrix:
    if not sequences:
        raise EmptyInput("no sequences to fit")
    states = state_space(sequences, labels)
    index = {s: i for i, s in enumerate(states)}
    n_chunks = max(1, min(threads, len(sequences)))
    chunks = [sequences[i::n_chunks] for i in range(n_chunks)]
    partial = Parallel(n_jobs=threads, prefer="threads")(delayed(_count)(chunk, index) for chunk in chunks)
    return TransitionMatrix(states=states, counts=np.sum(partial, axis=0))


def subgroup_fomm(
    sequences: Sequence[StateSequence],
    grouping: Mapping[str, str],
    labels: Optional[Sequence[str]] = None,
) -> Dict[str, TransitionMatrix]:
    # shared state list so subgroup matrices line up for matrix_diff
    labels = list(state_space(sequences, labels)[1:-1])
    groups: Dict[str, List[StateSequence]] = {}
    for seq in sequences:
        groups.setdefault(grouping[seq.enrollment_id], []).append(seq)
    return {name: fit_fomm(groups[name], labels) for name in sorted(groups)}


def matrix_diff(a: TransitionMatrix, b: TransitionMatrix) -> pd.DataFrame:
    if a.states != b.states:
        raise StateSetMismatch(f"state lists differ: {list(a.states)} vs {list(b.states)}")
    probs_a, probs_b = a.probs, b.probs
    rows = []
    for i, source in enumerate(a.states):
        for j, target in enumerate(a.states):
            if np.isnan(probs_a[i, j]) or np.isnan(probs_b[i, j]):
                continue
            rows.append(
                {
                    "from": source,
                    "to": target,
                    "prob_a": probs_a[i, j],
                    "prob_b": probs_b[i, j],
                    "diff": probs_a[i, j] - probs_b[i, j],
                    "count_a": int(a.counts[i, j]),
                    "count_b": int(b.counts[i, j]),
                }
            )
    return pd.DataFrame(rows, columns=["from", "to", "prob_a", "prob_b", "diff", "count_a", "count_b"])


def write_matrix(matrix: TransitionMatrix, prefix: Path) -> Tuple[Path, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    counts_path = prefix.with_name(f"{prefix.name}_counts.csv")
    probs_path = prefix.with_name(f"{prefix.name}_probs.csv")
    matrix.counts_frame().to_csv(counts_path, lineterminator="\n")
    matrix.probs_frame().to_csv(probs_path, float_format="%.10g", lineterminator="\n")
    return counts_path, probs_path


def read_matrix(prefix: Path) -> TransitionMatrix:
    prefix = Path(prefix)
    counts = pd.read_csv(prefix.with_name(f"{prefix.name}_counts.csv"), index_col=0)
    return TransitionMatrix(states=tuple(counts.columns), counts=counts.to_numpy(dtype=np.int64))
