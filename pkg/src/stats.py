import math
import warnings
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats as sps
from scipy.linalg import solve_triangular

from errors import EmptyInput, LengthMismatch, RankDeficient, SingleCluster

STATS_COLUMNS = ["outcome", "contrast", "estimate", "se", "t", "df", "p", "d", "n", "G"]


@dataclass(frozen=True)
class OLSFit:
    params: np.ndarray
    residuals: np.ndarray
    x: np.ndarray
    bread: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class ClusteredVariance:
    vcov: np.ndarray
    df: int
    n_clusters: Tuple[int, ...]


@dataclass(frozen=True)
class RegressionResult:
    params: np.ndarray
    vcov: np.ndarray
    se: np.ndarray
    tstats: np.ndarray
    df: int
    pvalues: np.ndarray
    n: int
    n_clusters: Tuple[int, ...]


@dataclass(frozen=True)
class EffectSize:
    cohens_d: float
    mean_0: float
    mean_1: float
    pooled_sd: float


@dataclass(frozen=True)
class GroupComparison:
    diff: float
    se: float
    t: float
    df: int
    p: float
    cohens_d: float
    effect: EffectSize
    n: int
    n_clusters: Tuple[int, ...]

    def row(self, outcome: str, contrast: str) -> Dict:
        return {
            "outcome": outcome,
            "contrast": contrast,
            "estimate": self.diff,
            "se": self.se,
            "t": self.t,
            "df": self.df,
            "p": self.p,
            "d": self.cohens_d,
            "n": self.n,
            "G": min(self.n_clusters),
        }


@dataclass(frozen=True)
class ProportionCI:
    proportion: float
    lo: float
    hi: float
    se: float
    df: int
    n: int
    n_clusters: int


def ols(y: Sequence[float], x: np.ndarray) -> OLSFit:
    """Least squares through a QR decomposition of the design matrix."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.shape[0]:
        raise LengthMismatch(f"y has {y.shape[0]} rows, X has {x.shape[0]}")
    n, k = x.shape
    if n <= k or np.linalg.matrix_rank(x) < k:
        raise RankDeficient(f"design matrix {n}x{k} is not of full column rank")
    q, r = np.linalg.qr(x)
    params = solve_triangular(r, q.T @ y)
    r_inv = solve_triangular(r, np.eye(k))
    return OLSFit(params=params, residuals=y - x @ params, x=x, bread=r_inv @ r_inv.T)


def _factorize(ids) -> Tuple[np.ndarray, int]:
    # first-appearance codes, so relabeling clusters cannot change summation order
    codes, uniques = pd.factorize(np.asarray(ids), sort=False)
    if (codes < 0).any():
        raise ValueError("cluster ids must not be missing")
    return codes, len(uniques)


def _cluster_term(fit: OLSFit, codes: np.ndarray, n_groups: int) -> np.ndarray:
    if n_groups < 2:
        raise SingleCluster(f"cluster-robust variance needs at least 2 clusters, got {n_groups}")
    scores = fit.x * fit.residuals[:, None]
    sums = np.zeros((n_groups, fit.k))
    np.add.at(sums, codes, scores)
    correction = n_groups / (n_groups - 1) * (fit.n - 1) / (fit.n - fit.k)
    out = correction * (fit.bread @ (sums.T @ sums) @ fit.bread)
    return (out + out.T) / 2


def cluster_robust_vcov(fit: OLSFit, cluster_ids_1, cluster_ids_2=None) -> ClusteredVariance:
    codes_1, g1 = _factorize(cluster_ids_1)
    if len(codes_1) != fit.n:
        raise LengthMismatch("cluster ids do not cover every row")
    if cluster_ids_2 is None:
        return ClusteredVariance(_cluster_term(fit, codes_1, g1), g1 - 1, (g1,))

    codes_2, g2 = _factorize(cluster_ids_2)
    if len(codes_2) != fit.n:
        raise LengthMismatch("cluster ids do not cover every row")
    codes_12, g12 = _factorize(codes_1 * g2 + codes_2)
    vcov = (
        _cluster_term(fit, codes_1, g1)
        + _cluster_term(fit, codes_2, g2)
        - _cluster_term(fit, codes_12, g12)
    )
    eigenvalues, vectors = np.linalg.eigh(vcov)
    if eigenvalues.min() < -1e-12 * max(1.0, np.abs(eigenvalues).max()):
        warnings.warn("two-way variance not PSD; negative eigenvalues truncated at zero", RuntimeWarning)
        vcov = vectors @ np.diag(np.clip(eigenvalues, 0, None)) @ vectors.T
        vcov = (vcov + vcov.T) / 2
    return ClusteredVariance(vcov, min(g1, g2) - 1, (g1, g2))


def _ratio(estimate: float, se: float) -> float:
    if se > 0:
        return estimate / se
    if estimate == 0:
        return 0.0
    return math.copysign(math.inf, estimate)


def _two_sided_p(t: float, df: int) -> float:
    return float(2 * sps.t.sf(abs(t), df))


def fit_clustered(y, x, cluster_ids_1, cluster_ids_2=None) -> RegressionResult:
    # checked before the fit: a one-row design is rejected by ols as rank deficient
    for ids in (cluster_ids_1, cluster_ids_2):
        if ids is not None:
            _, n_groups = _factorize(ids)
            if n_groups < 2:
                raise SingleCluster(f"cluster-robust variance needs at least 2 clusters, got {n_groups}")
    fit = ols(y, x)
    variance = cluster_robust_vcov(fit, cluster_ids_1, cluster_ids_2)
    se = np.sqrt(np.clip(np.diag(variance.vcov), 0, None))
    tstats = np.array([_ratio(b, s) for b, s in zip(fit.params, se)])
    pvalues = np.array([_two_sided_p(t, variance.df) for t in tstats])
    return RegressionResult(
        params=fit.params,
        vcov=variance.vcov,
        se=se,
        tstats=tstats,
        df=variance.df,
        pvalues=pvalues,
        n=fit.n,
        n_clusters=variance.n_clusters,
    )


def effect_size(values_0: np.ndarray, values_1: np.ndarray) -> EffectSize:
    n0, n1 = len(values_0), len(values_1)
    mean_0, mean_1 = float(np.mean(values_0)), float(np.mean(values_1))
    if n0 + n1 > 2:
        pooled_var = ((n0 - 1) * np.var(values_0, ddof=1 if n0 > 1 else 0)
                      + (n1 - 1) * np.var(values_1, ddof=1 if n1 > 1 else 0)) / (n0 + n1 - 2)
    else:
        pooled_var = 0.0
    pooled_sd = float(math.sqrt(pooled_var))
    diff = mean_1 - mean_0
    if pooled_sd > 0:
        d = diff / pooled_sd
    else:
        d = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return EffectSize(cohens_d=d, mean_0=mean_0, mean_1=mean_1, pooled_sd=pooled_sd)


def group_compare(values, group_flag, cluster_ids, cluster_ids_2=None) -> GroupComparison:
    """Difference in means (group 1 minus group 0) with clustered inference."""
    values = np.asarray(values, dtype=float)
    flag = np.asarray(group_flag).astype(bool)
    if len(values) != len(flag):
        raise LengthMismatch("values and group flags differ in length")
    if flag.all() or not flag.any():
        raise EmptyInput("both groups need at least one observation")
    x = np.column_stack([np.ones(len(values)), flag.astype(float)])
    result = fit_clustered(values, x, cluster_ids, cluster_ids_2)
    effect = effect_size(values[~flag], values[flag])
    return GroupComparison(
        diff=float(result.params[1]),
        se=float(result.se[1]),
        t=float(result.tstats[1]),
        df=result.df,
        p=float(result.pvalues[1]),
        cohens_d=effect.cohens_d,
        effect=effect,
        n=result.n,
        n_clusters=result.n_clusters,
    )


def proportion_ci(indicator_values, cluster_ids, level: float = 0.95) -> ProportionCI:
    values = np.asarray(indicator_values, dtype=float)
    if ((values < 0) | (values > 1)).any():
        raise ValueError("proportions must lie in [0, 1]")
    result = fit_clustered(values, np.ones((len(values), 1)), cluster_ids)
    proportion = float(result.params[0])
    se = float(result.se[0])
    half = float(sps.t.ppf(0.5 + level / 2, result.df)) * se
    return ProportionCI(
        proportion=proportion,
        lo=max(0.0, proportion - half),
        hi=min(1.0, proportion + half),
        se=se,
        df=result.df,
        n=result.n,
        n_clusters=result.n_clusters[0],
    )


def stats_frame(rows: Sequence[Dict]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=STATS_COLUMNS)
