"""Denoised reconstruction from the leading components, elemental maps and
quality scores against a noise-free reference."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .containers import EnergyAxis, SpectrumImage, unflatten
from .decomposition import PcaModel, truncated_matrix
from .errors import ComponentRangeError, DimensionMismatchError, EmptyWindowError
from .lines import LINES, strongest_line
from .phantom import SpectrumModel
from .preprocess import invert_weighting, uncenter


def reconstruct_matrix(model: PcaModel, k: int) -> np.ndarray:
    """Rank-k approximation mapped back to count units.

    The mean spectrum is added back before un-weighting because centering
    followed weighting on the way in.
    """
    if not 0 <= k <= model.r:
        raise ComponentRangeError(f"k={k} outside 0..{model.r}")
    d = truncated_matrix(model, k)
    if model.center is not None:
        d = uncenter(d, model.center)
    if model.weights is not None:
        d = invert_weighting(d, model.weights)
    return d


def reconstruct(model: PcaModel, k: int, rows: int, cols: int, axis: EnergyAxis,
                clamp: bool = False, provenance: str = "") -> SpectrumImage:
    d = reconstruct_matrix(model, k)
    if clamp:
        d = np.clip(d, 0.0, None)
    return unflatten(d, rows, cols, axis, provenance)


def negative_fraction(cube: SpectrumImage) -> float:
    return float(np.count_nonzero(cube.counts < 0)) / cube.counts.size


@dataclass(frozen=True)
class EnergyWindow:
    lo_kev: float
    hi_kev: float
    label: str = ""

    def __post_init__(self):
        if not self.lo_kev < self.hi_kev:
            raise ValueError(f"window {self.label!r}: lo must be below hi")

    def channels(self, axis: EnergyAxis) -> np.ndarray:
        e = axis.energies
        return np.flatnonzero((e >= self.lo_kev) & (e < self.hi_kev))


def elemental_map(cube: SpectrumImage, window: EnergyWindow) -> np.ndarray:
    """Per-pixel sum over channels whose centre lies in ``[lo, hi)``."""
    ch = window.channels(cube.axis)
    if ch.size == 0:
        raise EmptyWindowError(f"window {window.label!r} [{window.lo_kev}, {window.hi_kev}) holds no channel")
    return cube.counts[:, :, ch].sum(axis=2)


def default_windows(model: SpectrumModel | None = None, elements=None) -> list[EnergyWindow]:
    """One window per element on its strongest line, 2 x FWHM wide."""
    model = model or SpectrumModel()
    out = []
    for el in elements or LINES:
        label, energy = strongest_line(el)
        half = float(model.fwhm_kev(energy))
        out.append(EnergyWindow(energy - half, energy + half, f"{el}-{label}"))
    return out


@dataclass(frozen=True)
class QualityReport:
    mse_raw_vs_truth: float
    mse_recon_vs_truth: float
    improvement_factor: float
    k_used: int | None = None

    @property
    def perfect(self) -> bool:
        return math.isinf(self.improvement_factor)

    def text(self) -> str:
        imp = "inf" if self.perfect else repr(self.improvement_factor)
        return (
            f"k_used,{self.k_used}\n"
            f"mse_raw_vs_truth,{self.mse_raw_vs_truth!r}\n"
            f"mse_recon_vs_truth,{self.mse_recon_vs_truth!r}\n"
            f"improvement_factor,{imp}\n"
        )


def _counts(x):
    return x.counts if isinstance(x, SpectrumImage) else np.asarray(x, dtype=np.float64)


def quality(recon, raw, truth, k_used: int | None = None) -> QualityReport:
    a, b, t = _counts(recon), _counts(raw), _counts(truth)
    if not (a.shape == b.shape == t.shape):
        raise DimensionMismatchError(f"shapes differ: {a.shape}, {b.shape}, {t.shape}")
    mse_recon = float(np.mean((a - t) ** 2))
    mse_raw = float(np.mean((b - t) ** 2))
    if mse_recon == 0:
        imp = math.inf if mse_raw > 0 else 1.0
    else:
        imp = mse_raw / mse_recon
    return QualityReport(mse_raw, mse_recon, imp, k_used)


def map_correlation(a, b) -> float:
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def write_pgm(path, image) -> tuple[float, float]:
    """16-bit binary PGM with linear min-max scaling; the scale goes to a
    ``.scale.txt`` sidecar.  Returns ``(lo, hi)``."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    scaled = np.zeros_like(img) if span == 0 else (img - lo) / span * 65535.0
    data = np.rint(scaled).astype(">u2")
    path = Path(path)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    path.write_bytes(header + data.tobytes())
    path.with_name(path.stem + ".scale.txt").write_text(
        f"min,{lo!r}\nmax,{hi!r}\n# value = min + pixel / 65535 * (max - min)\n"
    )
    return lo, hi


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    payload = raw[len(raw) - w * h * (2 if maxval > 255 else 1):]
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(payload, dtype=dtype).reshape(h, w)
