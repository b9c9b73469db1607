"""PCA by thin SVD, scree data and the proximity diagnostic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ChannelMismatchError, NonFiniteInputError
from .preprocess import CenterModel, WeightModel


@dataclass(frozen=True, eq=False)
class PcaModel:
    """``D = T P^T`` with loadings P (n x r), scores T = U S (m x r) and
    component variances ``s^2 / (m - 1)`` in non-increasing order."""

    loadings: np.ndarray
    scores: np.ndarray
    variances: np.ndarray
    center: CenterModel | None = None
    weights: WeightModel | None = None

    @property
    def m(self) -> int:
        return self.scores.shape[0]

    @property
    def n(self) -> int:
        return self.loadings.shape[0]

    @property
    def r(self) -> int:
        return self.loadings.shape[1]


def _fix_signs(u, vt):
    # largest-magnitude entry of each loading made positive
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def pca_decompose(matrix, center: CenterModel | None = None,
                  weights: WeightModel | None = None) -> PcaModel:
    """Decompose an already weighted and centred matrix."""
    d = np.asarray(getattr(matrix, "values", matrix), dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"expected a 2D matrix, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise NonFiniteInputError("matrix contains NaN or inf")
    m = d.shape[0]
    u, s, vt = np.linalg.svd(d, full_matrices=False)
    u, vt = _fix_signs(u, vt)
    variances = s ** 2 / max(m - 1, 1)
    return PcaModel(vt.T.copy(), u * s, variances, center, weights)


def scree(model: PcaModel) -> list[tuple[int, float]]:
    return [(i + 1, float(v)) for i, v in enumerate(model.variances)]


@dataclass(frozen=True)
class ProximitySeries:
    k: int  # 0-based column of the reference basis
    phi: np.ndarray
    complete: bool

    @property
    def total(self) -> float:
        return float(self.phi.sum())

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.phi))


def proximity(test: PcaModel, reference: PcaModel, k: int) -> ProximitySeries:
    """Squared projections of reference loading ``k`` on every test loading.

    ``complete`` is True when the test loadings span the whole channel space,
    in which case ``phi`` sums to one.
    """
    if test.n != reference.n:
        raise ChannelMismatchError(f"{test.n} vs {reference.n} channels")
    if not 0 <= k < reference.r:
        raise IndexError(f"k={k} outside 0..{reference.r - 1}")
    phi = (test.loadings.T @ reference.loadings[:, k]) ** 2
    return ProximitySeries(k, phi, test.r == test.n)


def proximity_matrix(test: PcaModel, reference: PcaModel, n_ref: int, n_test: int | None = None):
    """``phi[k, l]`` for the first ``n_ref`` reference and ``n_test`` test components."""
    if test.n != reference.n:
        raise ChannelMismatchError(f"{test.n} vs {reference.n} channels")
    n_test = test.r if n_test is None else n_test
    return (reference.loadings[:, :n_ref].T @ test.loadings[:, :n_test]) ** 2


def truncated_matrix(model: PcaModel, k: int) -> np.ndarray:
    return model.scores[:, :k] @ model.loadings[:, :k].T
