"""Degree of meta-learning: representation change under adaptation, measured by dCCA.

For a network and an adaptation rule, both the original and the adapted
network are run on the same query inputs. For every representation layer
(all but the output layer) the canonical correlations between the two
activation matrices are averaged, and dCCA = 1 - mean correlation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from metalab.diffnet import BatchNormState, NetParams, NetSpec, forward
from metalab.mamltrain import InnerConfig, _as_batch, draw_episodes, inner_adapt
from metalab.taskgen import TaskPool

SIGNIFICANCE_THRESHOLD = 0.12
DEFAULT_QUERY_SIZE = 100
DEFAULT_EPISODES = 20
REPORT_COLUMNS = ("layer", "dcca_mean", "dcca_std", "n_episodes", "query_size", "inner_steps", "inner_lr")


@dataclass(frozen=True, eq=False)
class CcaResult:
    correlations: np.ndarray
    mean_correlation: float
    dcca: float
    degenerate: bool = False


@dataclass(frozen=True, eq=False)
class MetaLearningReport:
    layer_dcca: np.ndarray  # (n_episodes, L-1)
    query_size: int
    inner: InnerConfig
    degenerate_count: int = 0
    diverged_count: int = 0  # episodes whose adapted activations are non-finite (scored NaN)
    extra: dict = field(default_factory=dict)

    @property
    def n_episodes(self) -> int:
        return self.layer_dcca.shape[0]

    @property
    def n_layers(self) -> int:
        return self.layer_dcca.shape[1]

    @property
    def per_layer_mean(self) -> np.ndarray:
        return self.layer_dcca.mean(axis=0)

    @property
    def per_layer_std(self) -> np.ndarray:
        return self.layer_dcca.std(axis=0)

    @property
    def mean(self) -> float:
        return float(self.layer_dcca.mean())

    @property
    def std(self) -> float:
        return float(self.layer_dcca.std())

    def rows(self) -> list[list]:
        common = [self.n_episodes, self.query_size, self.inner.steps, self.inner.lr]
        out = [
            [l + 1, float(m), float(s), *common]
            for l, (m, s) in enumerate(zip(self.per_layer_mean, self.per_layer_std))
        ]
        out.append(["aggregate", self.mean, self.std, *common])
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for row in self.rows():
                w.writerow([row[0], repr(row[1]), repr(row[2]), row[3], row[4], row[5], repr(float(row[6]))])


def center_columns(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 2:
        raise ValueError("centering needs a 2-D matrix with at least 2 rows")
    return M - M.mean(axis=0, keepdims=True)


def _orthonormal_basis(M: np.ndarray, eps: float) -> np.ndarray:
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] <= np.finfo(float).tiny:
        return U[:, :0]
    return U[:, s > eps * s[0]]


def cca_mean(A, B, eps: float = 1e-10) -> CcaResult:
    """Canonical correlations of two views with matching rows.

    Each centered view is reduced to an orthonormal basis of its column space
    (singular values below ``eps`` times the largest are dropped); the
    canonical correlations are the singular values of ``Qa.T @ Qb``.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError(f"views must be 2-D with equal row counts, got {A.shape} and {B.shape}")
    if A.shape[0] < 2:
        raise ValueError("CCA needs at least 2 samples")
    if not (np.isfinite(A).all() and np.isfinite(B).all()):
        raise ValueError("CCA views contain non-finite values")
    Qa = _orthonormal_basis(center_columns(A), eps)
    Qb = _orthonormal_basis(center_columns(B), eps)
    k = min(Qa.shape[1], Qb.shape[1])
    if k == 0:
        return CcaResult(np.zeros(0), 0.0, 1.0, degenerate=True)
    rho = np.linalg.svd(Qa.T @ Qb, compute_uv=False)[:k]
    rho = np.clip(rho, 0.0, 1.0)
    mean = float(rho.mean())
    return CcaResult(rho, mean, float(min(max(1.0 - mean, 0.0), 1.0)))


def degree_of_meta_learning(
    spec: NetSpec,
    params: NetParams,
    adaptation: InnerConfig,
    episodes,
    query_size: int = DEFAULT_QUERY_SIZE,
    bn: BatchNormState | None = None,
) -> MetaLearningReport:
    """dCCA between the representation layers before and after adaptation.

    Each episode's support set drives the adaptation; the first ``query_size``
    query inputs are fed to both networks. Episodes whose adaptation diverged
    to non-finite activations score NaN, so the aggregate becomes NaN.
    """
    if query_size < 2:
        raise ValueError("query_size must be at least 2")
    batch = _as_batch(episodes)
    if len(batch) == 0:
        raise ValueError("no episodes")
    if batch.query_x.shape[-2] < query_size:
        raise ValueError(f"episodes carry {batch.query_x.shape[-2]} query points, need {query_size}")
    if bn is not None:
        bn = bn.with_mode("batch")
    qx = batch.query_x[:, :query_size]
    with np.errstate(over="ignore", invalid="ignore"):
        adapted = inner_adapt(spec, params, batch.support_x, batch.support_y, adaptation, bn)
        _, after = forward(spec, adapted, qx, bn)
    _, before = forward(spec, params, qx, bn)
    n_rep = spec.n_layers - 1
    values = np.full((len(batch), n_rep), np.nan)
    degenerate = diverged = 0
    for e in range(len(batch)):
        if not all(np.isfinite(after.hidden[l][e]).all() for l in range(n_rep)):
            diverged += 1
            continue
        for l in range(n_rep):
            res = cca_mean(before.hidden[l][e], after.hidden[l][e])
            values[e, l] = res.dcca
            degenerate += res.degenerate
    return MetaLearningReport(values, query_size, adaptation, degenerate, diverged)


def report_for_pool(
    spec: NetSpec,
    params: NetParams,
    pool: TaskPool,
    adaptation: InnerConfig,
    seed: int,
    n_episodes: int = DEFAULT_EPISODES,
    query_size: int = DEFAULT_QUERY_SIZE,
    n_support: int = 5,
    bn: BatchNormState | None = None,
) -> MetaLearningReport:
    batch = draw_episodes(pool, n_episodes, n_support, query_size, seed)
    return degree_of_meta_learning(spec, params, adaptation, batch, query_size, bn)


def significance_check(report, threshold: float = SIGNIFICANCE_THRESHOLD) -> tuple[bool, float]:
    """True iff mean - std clears ``threshold``; also returns that margin.

    ``report`` is a MetaLearningReport or a ``(mean, std)`` pair.
    """
    mean, std = (report.mean, report.std) if isinstance(report, MetaLearningReport) else report
    margin = mean - std - threshold
    return bool(margin > 0), float(margin)
