"""Sparsity-reducing filters and Poisson weighting / centering.

Pipeline order is fixed: bin -> spatial Gaussian -> flatten -> weight -> center.
Weighting must come before centering; centering destroys the mean = variance
property of the counts that the weights rely on.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .containers import DataMatrix, SpectrumImage
from .errors import AllZeroMatrixError, DimensionMismatchError

WEIGHT_MODES = ("full", "spectrum", "none")


def bin2x2(cube: SpectrumImage) -> SpectrumImage:
    """Sum 2x2 pixel blocks.  A trailing odd row/column is dropped with a warning."""
    rows, cols = cube.rows // 2 * 2, cube.cols // 2 * 2
    if rows == 0 or cols == 0:
        raise DimensionMismatchError(f"cannot bin a {cube.rows}x{cube.cols} image")
    if (rows, cols) != (cube.rows, cube.cols):
        warnings.warn(
            f"bin2x2: odd grid {cube.rows}x{cube.cols}, trailing row/col dropped",
            RuntimeWarning, stacklevel=2,
        )
    c = cube.counts[:rows, :cols]
    out = c.reshape(rows // 2, 2, cols // 2, 2, -1).sum(axis=(1, 3))
    return cube.with_counts(out)


def gaussian_kernel(sigma_px: float = 1.0, cutoff: float = 0.1) -> np.ndarray:
    """Normalised 2D Gaussian with taps below ``cutoff * G(0)`` removed.

    For sigma = 1 the mask keeps the centre plus 12 neighbours.
    """
    if not sigma_px > 0:
        raise ValueError("sigma must be positive")
    rmax = sigma_px * np.sqrt(-2.0 * np.log(cutoff))
    half = int(np.floor(rmax))
    y, x = np.mgrid[-half:half + 1, -half:half + 1]
    g = np.exp(-(x ** 2 + y ** 2) / (2.0 * sigma_px ** 2))
    g[g < cutoff] = 0.0
    return g / g.sum()


def gaussian_filter_spatial(cube: SpectrumImage, sigma_px: float = 1.0) -> SpectrumImage:
    """Per-channel spatial smoothing; at the borders the kernel is renormalised
    over the taps that fall inside the image."""
    k = gaussian_kernel(sigma_px)
    num = correlate(cube.counts, k[:, :, None], mode="constant", cval=0.0)
    ones = np.ones((cube.rows, cube.cols))
    den = correlate(ones, k, mode="constant", cval=0.0)
    return cube.with_counts(num / den[:, :, None])


@dataclass(frozen=True, eq=False)
class WeightModel:
    """Weights ``W = sqrt(G H^T)``: G per pixel (mean image), H per channel
    (mean spectrum)."""

    G: np.ndarray
    H: np.ndarray
    mode: str
    zero_rows: np.ndarray
    zero_cols: np.ndarray

    @property
    def m(self) -> int:
        return len(self.G)

    @property
    def n(self) -> int:
        return len(self.H)

    def matrix(self) -> np.ndarray:
        w = np.sqrt(np.outer(self.G, self.H))
        w[self.zero_rows, :] = 0.0
        w[:, self.zero_cols] = 0.0
        return w


def _values(matrix) -> np.ndarray:
    return matrix.values if isinstance(matrix, DataMatrix) else np.asarray(matrix, dtype=np.float64)


def compute_weights(matrix, mode: str = "full") -> WeightModel:
    d = _values(matrix)
    if mode not in WEIGHT_MODES:
        raise ValueError(f"weight mode must be one of {WEIGHT_MODES}, got {mode!r}")
    if np.any(d < 0):
        raise ValueError("weights need a non-negative matrix")
    m, n = d.shape
    if mode == "none":
        return WeightModel(np.ones(m), np.ones(n), mode, np.array([], int), np.array([], int))
    if not np.any(d):
        raise AllZeroMatrixError("cannot weight an all-zero matrix")
    H = d.mean(axis=0)
    if mode == "full":
        g = d.mean(axis=1)
        G = g / g.mean()
    else:
        G = np.ones(m)
    return WeightModel(G, H, mode, np.flatnonzero(G == 0), np.flatnonzero(H == 0))


def apply_weighting(matrix, w: WeightModel) -> np.ndarray:
    d = _values(matrix)
    if d.shape != (w.m, w.n):
        raise DimensionMismatchError(f"matrix {d.shape} vs weights {(w.m, w.n)}")
    W = w.matrix()
    out = np.zeros_like(d)
    np.divide(d, W, out=out, where=W > 0)
    return out


def invert_weighting(matrix, w: WeightModel) -> np.ndarray:
    d = _values(matrix)
    if d.shape != (w.m, w.n):
        raise DimensionMismatchError(f"matrix {d.shape} vs weights {(w.m, w.n)}")
    return d * w.matrix()


@dataclass(frozen=True, eq=False)
class CenterModel:
    mean_spectrum: np.ndarray


def center(matrix):
    d = _values(matrix)
    mean = d.mean(axis=0)
    return d - mean, CenterModel(mean)


def uncenter(matrix, model: CenterModel) -> np.ndarray:
    return _values(matrix) + model.mean_spectrum


def weighted_noise_variance(noisy, truth, w: WeightModel, channels=None) -> np.ndarray:
    """Per-channel sample variance over pixels of the weighted residual
    ``(noisy - truth) / W``.  Zeroed channels report 0."""
    r = apply_weighting(_values(noisy) - _values(truth), w)
    var = r.var(axis=0)
    return var if channels is None else var[channels]


def mean_column_variance(matrix) -> float:
    """Data variance per column, averaged over all columns."""
    return float(_values(matrix).var(axis=0).mean())
