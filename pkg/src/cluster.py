import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA
from sklearn.metrics import adjusted_rand_score

from errors import (
    ColumnMismatch,
    DegenerateMatrix,
    KTooLarge,
    LengthMismatch,
    NegativeValueInLogColumn,
    RangeTooShort,
)
from features import COUNT_FEATURES

DEFAULT_LONG_TAILED = (*COUNT_FEATURES, "avg_minutes_per_turn", "avg_words_per_prompt")
MAX_ITER = 300


@dataclass(frozen=True)
class Preprocessor:
    """log1p on the long-tailed columns, then population z-score on every column."""

    columns: Tuple[str, ...]
    log_columns: Tuple[str, ...]
    means: np.ndarray
    scales: np.ndarray

    @classmethod
    def fit(cls, matrix: pd.DataFrame, long_tailed_columns: Sequence[str]) -> "Preprocessor":
        if matrix.isna().any().any():
            raise ValueError("feature matrix has missing values")
        log_columns = tuple(c for c in matrix.columns if c in set(long_tailed_columns))
        logged = _log_transform(matrix, log_columns)
        means = logged.mean(axis=0).to_numpy(dtype=float)
        scales = logged.std(axis=0, ddof=0).to_numpy(dtype=float)
        constant = [c for c, s in zip(matrix.columns, scales) if s == 0]
        if constant:
            warnings.warn(f"constant columns standardized to zero: {', '.join(constant)}", RuntimeWarning)
        return cls(tuple(matrix.columns), log_columns, means, scales)

    def transform(self, matrix: pd.DataFrame) -> pd.DataFrame:
        if tuple(matrix.columns) != self.columns:
            raise ColumnMismatch(f"expected columns {list(self.columns)}, got {list(matrix.columns)}")
        logged = _log_transform(matrix, self.log_columns).to_numpy(dtype=float)
        safe = np.where(self.scales == 0, 1.0, self.scales)
        z = (logged - self.means) / safe
        z[:, self.scales == 0] = 0.0
        return pd.DataFrame(z, index=matrix.index, columns=matrix.columns)

    def to_dict(self) -> Dict:
        return {
            "columns": list(self.columns),
            "log_columns": list(self.log_columns),
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
        }


def _log_transform(matrix: pd.DataFrame, columns: Sequence[str]) -> pd.DataFrame:
    out = matrix.astype(float).copy()
    for column in columns:
        if (out[column] < 0).any():
            raise NegativeValueInLogColumn(f"column '{column}' has negative values")
        out[column] = np.log1p(out[column])
    return out


def preprocess(matrix: pd.DataFrame, long_tailed_columns: Sequence[str] = DEFAULT_LONG_TAILED) -> pd.DataFrame:
    return Preprocessor.fit(matrix, long_tailed_columns).transform(matrix)


@dataclass(frozen=True)
class PCAModel:
    columns: Tuple[str, ...]
    means: np.ndarray
    scales: np.ndarray
    loadings: np.ndarray
    eigenvalues: np.ndarray
    explained_variance_ratios: np.ndarray

    @property
    def n_components(self) -> int:
        return self.loadings.shape[0]

    @property
    def component_names(self) -> List[str]:
        return [f"PC{i + 1}" for i in range(self.n_components)]

    def to_dict(self) -> Dict:
        return {
            "columns": list(self.columns),
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
            "loadings": self.loadings.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "explained_variance_ratios": self.explained_variance_ratios.tolist(),
        }


def fit_pca(
    matrix: pd.DataFrame,
    n_components: Optional[int] = None,
    variance_target: Optional[float] = None,
    scale: bool = False,
) -> PCAModel:
    if n_components is not None and variance_target is not None:
        raise ValueError("give either n_components or variance_target, not both")
    x = matrix.to_numpy(dtype=float)
    n = x.shape[0]
    means = x.mean(axis=0)
    scales = x.std(axis=0) if scale else np.ones(x.shape[1])
    scales = np.where(scales == 0, 1.0, scales)
    centered = (x - means) / scales
    if n < 2 or not np.any(centered):
        raise DegenerateMatrix("feature matrix has rank 0")

    pca = PCA(svd_solver="full").fit(centered)
    loadings = pca.components_.copy()
    # largest-magnitude loading of each component is positive
    pivots = np.abs(loadings).argmax(axis=1)
    signs = np.sign(loadings[np.arange(loadings.shape[0]), pivots])
    loadings *= signs[:, None]
    eigenvalues = pca.explained_variance_ * (n - 1) / n
    ratios = pca.explained_variance_ratio_

    available = loadings.shape[0]
    if n_components is not None:
        if not 1 <= n_components <= available:
            raise ValueError(f"n_components must be in 1..{available}")
        keep = n_components
    elif variance_target is not None:
        cumulative = np.cumsum(ratios)
        keep = min(int(np.searchsorted(cumulative, variance_target - 1e-12)) + 1, available)
    else:
        keep = available

    return PCAModel(
        columns=tuple(matrix.columns),
        means=means,
        scales=scales,
        loadings=loadings[:keep],
        eigenvalues=eigenvalues[:keep],
        explained_variance_ratios=ratios[:keep],
    )


def transform_pca(model: PCAModel, matrix: pd.DataFrame) -> pd.DataFrame:
    if tuple(matrix.columns) != model.columns:
        raise ColumnMismatch(f"expected columns {list(model.columns)}, got {list(matrix.columns)}")
    x = (matrix.to_numpy(dtype=float) - model.means) / model.scales
    return pd.DataFrame(x @ model.loadings.T, index=matrix.index, columns=model.component_names)


def inverse_transform_pca(model: PCAModel, scores: pd.DataFrame) -> pd.DataFrame:
    x = scores.to_numpy(dtype=float) @ model.loadings * model.scales + model.means
    return pd.DataFrame(x, index=scores.index, columns=list(model.columns))


@dataclass(frozen=True)
class KMeansModel:
    k: int
    centroids: np.ndarray
    inertia: float
    seed: int
    n_iter: int

    def predict(self, scores: np.ndarray) -> np.ndarray:
        distances = ((scores[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return distances.argmin(axis=1)

    def to_dict(self) -> Dict:
        return {
            "k": self.k,
            "centroids": self.centroids.tolist(),
            "inertia": self.inertia,
            "seed": self.seed,
            "n_iter": self.n_iter,
        }


def _as_array(scores) -> np.ndarray:
    return scores.to_numpy(dtype=float) if isinstance(scores, pd.DataFrame) else np.asarray(scores, dtype=float)


def kmeans_fit(scores, k: int, seed: int) -> Tuple[KMeansModel, np.ndarray]:
    x = _as_array(scores)
    if k < 2:
        raise ValueError("k must be at least 2")
    distinct = np.unique(x, axis=0).shape[0]
    if k > distinct:
        raise KTooLarge(f"k={k} exceeds the {distinct} distinct rows")
    # tol=0: stop only when assignments stop changing; empty clusters are
    # relocated to the farthest points by sklearn's Lloyd implementation.
    km = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=1,
        max_iter=MAX_ITER,
        tol=0.0,
        random_state=seed,
        algorithm="lloyd",
    ).fit(x)
    model = KMeansModel(
        k=k,
        centroids=km.cluster_centers_,
        inertia=float(km.inertia_),
        seed=seed,
        n_iter=int(km.n_iter_),
    )
    return model, km.labels_.astype(int)


@dataclass
class ElbowResult:
    chosen_k: int
    inertias: Dict[int, float] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"k": list(self.inertias), "inertia": list(self.inertias.values())})
        frame["chosen"] = frame["k"] == self.chosen_k
        return frame


def choose_elbow(inertias: Dict[int, float]) -> int:
    ks = sorted(inertias)
    if len(ks) < 3:
        raise RangeTooShort(f"elbow needs at least 3 values of k, got {len(ks)}")
    best_k, best = ks[1], -np.inf
    for prev_k, k, next_k in zip(ks, ks[1:], ks[2:]):
        bend = (inertias[prev_k] - inertias[k]) - (inertias[k] - inertias[next_k])
        if bend > best:
            best_k, best = k, bend
    return best_k


def elbow_select(scores, k_range: Sequence[int] = range(2, 11), seed: int = 0, threads: int = 1) -> ElbowResult:
    ks = list(k_range)
    if len(ks) < 3:
        raise RangeTooShort(f"elbow needs at least 3 values of k, got {len(ks)}")
    if ks != sorted(ks):
        raise ValueError("k_range must be ascending")
    x = _as_array(scores)
    fits = Parallel(n_jobs=threads, prefer="threads")(delayed(kmeans_fit)(x, k, seed) for k in ks)
    inertias = {k: model.inertia for k, (model, _) in zip(ks, fits)}
    return ElbowResult(chosen_k=choose_elbow(inertias), inertias=inertias)


def adjusted_rand_index(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(f"label vectors differ in length: {len(labels_a)} vs {len(labels_b)}")
    if len(labels_a) < 2:
        raise LengthMismatch("ARI needs at least two labels")
    return float(adjusted_rand_score(labels_a, labels_b))


@dataclass
class StabilityReport:
    n_runs: int
    mean_ari: float
    sd_ari: float
    reference_seed: int
    aris: List[float] = field(default_factory=list)
    inertias: List[float] = field(default_factory=list)


def stability(scores, k: int, n_runs: int = 50, threads: int = 1) -> StabilityReport:
    if n_runs < 1:
        raise ValueError("n_runs must be positive")
    x = _as_array(scores)
    runs = Parallel(n_jobs=threads, prefer="threads")(delayed(kmeans_fit)(x, k, seed) for seed in range(n_runs))
    inertias = [model.inertia for model, _ in runs]
    reference = int(np.argmin(inertias))
    reference_labels = runs[reference][1]
    aris = [adjusted_rand_index(reference_labels, labels) for _, labels in runs]
    return StabilityReport(
        n_runs=n_runs,
        mean_ari=float(np.mean(aris)),
        sd_ari=float(np.std(aris)),
        reference_seed=reference,
        aris=aris,
        inertias=inertias,
    )


def centroid_summary(model: KMeansModel, assignments: Sequence[int], standardized: pd.DataFrame) -> pd.DataFrame:
    if len(assignments) != len(standardized):
        raise LengthMismatch("assignments do not align with matrix rows")
    summary = standardized.groupby(np.asarray(assignments)).mean()
    summary = summary.reindex(range(model.k))
    summary.index.name = "cluster"
    return summary
