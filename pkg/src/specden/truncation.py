"""Choosing how many principal components to keep.

Four routes are provided:

* scree export plus a non-normative knee heuristic,
* the spiked-covariance retrievability bound (needs the true variances),
* the Gavish-Donoho optimal hard threshold (needs the noise level),
* scatter-plot anisotropy of sequential component couples (1,2), (2,3), ...

The anisotropy scan keeps the components in front of the first couple from
which every later couple is isotropic.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize

from .decomposition import PcaModel
from .errors import (
    DegenerateScoresError,
    NoNoiseDomainError,
    SparseInputError,
    TooFewComponentsError,
)

CRITERIA = ("cov", "skew", "purity", "hist")
DEFAULT_THRESHOLD = 0.5
DEFAULT_GRID = 64
DEFAULT_PROJECTIONS = 16
DEFAULT_BINS = 128
DEFAULT_MAX_SCAN = 30
SPARSE_LIMIT = 0.5

# Extracted (lambda) and noise-free (lambda*) component variances of the
# synthetic CMOS dataset, noise variance 28.07, m = 19920, n = 1200.
CMOS_FIXTURE = {
    "sigma2": 28.07,
    "m": 19920,
    "n": 1200,
    "lambda": (1228, 938.3, 509.2, 444.7, 273.8, 94.04, 83.53, 81.98, 80.61, 78.30, 78.28),
    "lambda_true": (1214, 906.4, 482.2, 422.8, 214.6, 40.05, 6.571, 0.5804, 0.04119, 5.13e-6, 1.63e-6),
}


# ------------------------------------------------------------ spiked model

def nadler_threshold(sigma2: float, m: int, n: int) -> float:
    return sigma2 * math.sqrt(n / m)


def nadler_retrievable(lambda_true: float, sigma2: float, m: int, n: int) -> bool:
    """True when ``lambda_true / sigma2 >= sqrt(n / m)`` (boundary inclusive)."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    return lambda_true / sigma2 >= math.sqrt(n / m)


def nadler_count(lambda_true, sigma2: float, m: int, n: int) -> int:
    """Number of leading components passing the retrievability bound."""
    k = 0
    for lam in lambda_true:
        if not nadler_retrievable(lam, sigma2, m, n):
            break
        k += 1
    return k


def gd_coefficient(beta: float) -> float:
    """Optimal hard-threshold coefficient for known noise, aspect ratio ``beta <= 1``.

    Equals ``4/sqrt(3)`` for square matrices.
    """
    beta = min(beta, 1.0 / beta)
    return math.sqrt(2 * (beta + 1) + 8 * beta / ((beta + 1) + math.sqrt(beta ** 2 + 14 * beta + 1)))


def gavish_donoho_threshold(sigma2: float, m: int, n: int) -> float:
    """Component-variance threshold.  Singular values are cut at
    ``coef * sqrt(max(m, n)) * sigma``; with variance ``s^2 / m`` that is
    ``coef^2 * max(m, n) / m * sigma2``, i.e. ``16/3 sigma2`` when m = n."""
    coef = gd_coefficient(min(m, n) / max(m, n))
    return coef ** 2 * max(m, n) / m * sigma2


def gavish_donoho_cutoff(variances, sigma2: float, m: int, n: int) -> int:
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    lam = np.asarray(variances, dtype=np.float64)
    return int(np.count_nonzero(lam >= gavish_donoho_threshold(sigma2, m, n)))


# ---------------------------------------------------------- noise estimate

@lru_cache(maxsize=64)
def _mp_quantile(gamma: float, q: float) -> float:
    """Quantile of the Marchenko-Pastur law (unit variance, ratio gamma <= 1)."""
    a, b = (1 - math.sqrt(gamma)) ** 2, (1 + math.sqrt(gamma)) ** 2

    def pdf(x):
        return math.sqrt(max((b - x) * (x - a), 0.0)) / (2 * math.pi * gamma * x)

    def cdf(x):
        return integrate.quad(pdf, a, x, limit=200)[0]

    return optimize.brentq(lambda x: cdf(x) - q, a, b, xtol=1e-12)


def mp_scale(m: int, n: int) -> tuple[float, float, int]:
    """(gamma, scale, count) describing the noise eigenvalues of a centred
    m x n matrix with variances ``s^2 / (m - 1)``: ``count`` of them follow
    ``scale * sigma2 * MP(gamma)``."""
    dof = m - 1
    if n <= dof:
        return n / dof, 1.0, n
    return dof / n, n / dof, dof


def estimate_noise_sigma2(variances, m: int, n: int, null_variances=None) -> float:
    """Robust noise level from the lower half of the spectrum.

    The median of the components with index above r/2 is matched to the
    corresponding Marchenko-Pastur quantile.  Spatially filtered noise has
    fewer effective pixels and spreads wider than the law assumes; for such
    data pass ``null_variances``, the spectrum of unit-variance noise pushed
    through the same filters, and its tail median is used as the reference
    instead.  An estimator, not ground truth.
    """
    lam = np.sort(np.asarray(variances, dtype=np.float64))[::-1]
    gamma, scale, count = mp_scale(m, n)
    lam = lam[:count]
    r = len(lam)
    if r < 10:
        raise TooFewComponentsError(f"need at least 10 components, got {r}")
    tail = lam[r // 2:]
    med = float(np.median(tail))
    if null_variances is not None:
        ref = np.sort(np.asarray(null_variances, dtype=np.float64))[::-1][:count]
        if len(ref) != r:
            raise ValueError(f"null spectrum has {len(ref)} components, expected {r}")
        return med / float(np.median(ref[r // 2:]))
    pos = r // 2 + (len(tail) - 1) / 2.0  # 0-based rank, descending
    q = (r - pos - 0.5) / r
    return med / (scale * _mp_quantile(round(gamma, 12), q))


# ------------------------------------------------------------- anisotropy

def _normalized(t, name="score"):
    t = np.asarray(t, dtype=np.float64)
    sd = t.std()
    if sd == 0:
        raise DegenerateScoresError(f"{name} has zero variance")
    return t / sd


@dataclass(frozen=True, eq=False)
class ScatterGrid:
    cells: np.ndarray  # t x t, [T1 bin, T2 bin]
    ranges: tuple  # ((T1 min, T1 max), (T2 min, T2 max))

    @property
    def t(self) -> int:
        return self.cells.shape[0]


def scatter_grid(T1, T2, t: int = DEFAULT_GRID, normalize: bool = True) -> ScatterGrid:
    """Digitise the joint score distribution on a symmetric t x t grid.

    Scores are scaled to unit variance first; an identically zero score is
    left as is (all of its points sit in the central row/column).
    """
    T1 = np.asarray(T1, dtype=np.float64)
    T2 = np.asarray(T2, dtype=np.float64)
    if T1.shape != T2.shape:
        raise ValueError("score vectors differ in length")
    if normalize:
        scaled = []
        for name, v in (("T1", T1), ("T2", T2)):
            if v.std() > 0:
                v = v / v.std()
            elif np.any(v):
                raise DegenerateScoresError(f"{name} is constant but not zero")
            scaled.append(v)
        T1, T2 = scaled
    r = float(max(np.abs(T1).max(), np.abs(T2).max()))
    if r == 0:
        cells = np.zeros((t, t), dtype=np.int64)
        cells[t // 2, t // 2] = T1.size
        return ScatterGrid(cells, ((0.0, 0.0), (0.0, 0.0)))
    i = np.clip(np.floor((T1 + r) / (2 * r) * t).astype(int), 0, t - 1)
    j = np.clip(np.floor((T2 + r) / (2 * r) * t).astype(int), 0, t - 1)
    cells = np.bincount(i * t + j, minlength=t * t).reshape(t, t)
    return ScatterGrid(cells, ((-r, r), (-r, r)))


def aniso_cov(T1, T2) -> float:
    T1 = np.asarray(T1, dtype=np.float64)
    T2 = np.asarray(T2, dtype=np.float64)
    return float(np.dot(T1, T2) / T1.size)


def aniso_skew(T1, T2) -> float:
    """Mardia-type bivariate skewness with the couple covariance in the
    denominator.  NaN when the covariance vanishes.

    The double sum over pixel pairs is expanded binomially, so it costs O(m):
    sum_ij (x_i x_j + y_i y_j)^3 = sum_k C(3,k) (sum_i x_i^k y_i^(3-k))^2.
    """
    x = np.asarray(T1, dtype=np.float64)
    y = np.asarray(T2, dtype=np.float64)
    m = x.size
    if m < 2:
        raise ValueError("need at least two points")
    cov = aniso_cov(x, y)
    if abs(cov) < 1e-300:
        return float("nan")
    total = sum(math.comb(3, k) * float(np.sum(x ** k * y ** (3 - k))) ** 2 for k in range(4))
    return total / (m ** 2 * cov ** 3)


def aniso_skew_direct(T1, T2) -> float:
    """O(m^2) evaluation of the same double sum, for small samples."""
    x = np.asarray(T1, dtype=np.float64)
    y = np.asarray(T2, dtype=np.float64)
    cov = aniso_cov(x, y)
    if abs(cov) < 1e-300:
        return float("nan")
    g = (np.outer(x, x) + np.outer(y, y)) / cov
    return float(np.sum(g ** 3) / x.size ** 2)


def aniso_purity(grid: ScatterGrid) -> float:
    """Sum of squared cells normalised by the grid trace; NaN for zero trace."""
    s = np.asarray(grid.cells, dtype=np.float64)
    tr = float(np.trace(s))
    if tr == 0:
        return float("nan")
    return float(np.sum((s / tr) ** 2))


def projected_histograms(T1, T2, p: int = DEFAULT_PROJECTIONS, s: int = DEFAULT_BINS):
    """Histograms (p x s) of the unit-variance scores projected on p angles in
    [-pi/2, pi/2), all on the common range [-R, R] with R the largest radius."""
    x = _normalized(T1, "T1")
    y = _normalized(T2, "T2")
    R = float(np.sqrt(x ** 2 + y ** 2).max())
    phi = -np.pi / 2 + np.pi * np.arange(p) / p
    u = np.outer(np.cos(phi), x) + np.outer(np.sin(phi), y)
    idx = np.clip(np.floor((u + R) / (2 * R) * s).astype(np.int64), 0, s - 1)
    idx += (np.arange(p) * s)[:, None]
    return np.bincount(idx.ravel(), minlength=p * s).reshape(p, s).astype(np.float64)


def aniso_hist(T1, T2, p: int = DEFAULT_PROJECTIONS, s: int = DEFAULT_BINS) -> float:
    """Projected-histogram anisotropy; near 0 for a round scatter plot.

    For isotropic data the spread of each bin over the projection angles is
    Poisson-like, so variance/mean -> 1.  Bins whose angle-averaged count is
    below 1 are left out and the bin count reduced accordingly.
    """
    if np.size(T1) < 100:
        warnings.warn("aniso_hist on fewer than 100 points is unreliable", RuntimeWarning, stacklevel=2)
    H = projected_histograms(T1, T2, p, s)
    Hbar = H.mean(axis=0)
    keep = Hbar >= 1.0
    s_eff = int(keep.sum())
    if s_eff == 0:
        return float("nan")
    chi = ((H[:, keep] - Hbar[keep]) ** 2 / Hbar[keep]).sum()
    return float(chi / (p * s_eff) - 1.0)


@dataclass(frozen=True)
class AnisotropySeries:
    criterion: str
    values: np.ndarray  # values[i] belongs to couple (i+1, i+2), 1-based components
    threshold: float

    def couples(self) -> list[tuple[int, int]]:
        return [(i + 1, i + 2) for i in range(len(self.values))]


def couple_value(T1, T2, criterion: str = "hist", t: int = DEFAULT_GRID,
                 p: int = DEFAULT_PROJECTIONS, s: int = DEFAULT_BINS) -> float:
    if criterion == "hist":
        return aniso_hist(T1, T2, p, s)
    x, y = _normalized(T1, "T1"), _normalized(T2, "T2")
    if criterion == "cov":
        return aniso_cov(x, y)
    if criterion == "skew":
        return aniso_skew(x, y)
    if criterion == "purity":
        return aniso_purity(scatter_grid(x, y, t))
    raise ValueError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")


def anisotropy_series(model: PcaModel, criterion: str = "hist", max_scan: int = DEFAULT_MAX_SCAN,
                      threshold: float = DEFAULT_THRESHOLD, **kw) -> AnisotropySeries:
    n_couples = min(max_scan, model.r - 1)
    T = model.scores
    vals = np.array([couple_value(T[:, i], T[:, i + 1], criterion, **kw) for i in range(n_couples)])
    return AnisotropySeries(criterion, vals, threshold)


def cutoff_from_series(series: AnisotropySeries) -> int:
    """Components before the all-below-threshold suffix of the couple scan."""
    vals = series.values
    above = ~(vals < series.threshold)  # NaN counts as above
    if not above.any():
        return 0
    last = int(np.flatnonzero(above)[-1])
    if last == len(vals) - 1:
        raise NoNoiseDomainError(
            f"couple ({last + 1},{last + 2}) is still anisotropic at the end of the scan; "
            "increase max_scan"
        )
    return last + 1


def select_cutoff_anisotropy(model: PcaModel, criterion: str = "hist",
                             threshold: float = DEFAULT_THRESHOLD,
                             max_scan: int = DEFAULT_MAX_SCAN,
                             raw_sparsity: float | None = None, filtered: bool = True,
                             force: bool = False, **kw):
    """Return ``(k, series)``.

    ``raw_sparsity`` is the nonzero fraction of the data before filtering.
    When most entries were empty and no filtering was applied the scatter
    plots are dominated by digitisation and selection is refused unless
    ``force`` is set.
    """
    if (raw_sparsity is not None and raw_sparsity < SPARSE_LIMIT
            and not filtered and not force):
        raise SparseInputError(
            f"only {raw_sparsity:.3%} of the entries are nonzero and no filtering was applied; "
            "filter the data or pass force=True"
        )
    series = anisotropy_series(model, criterion, max_scan, threshold, **kw)
    return cutoff_from_series(series), series


def scree_knee(variances, max_scan: int = DEFAULT_MAX_SCAN) -> int:
    """Heuristic elbow: largest second difference of log variance.

    Not a substitute for looking at the scree plot.
    """
    lam = np.asarray(variances, dtype=np.float64)[: max_scan + 2]
    lam = np.log(np.maximum(lam, np.finfo(float).tiny))
    if lam.size < 3:
        return 0
    d2 = lam[:-2] - 2 * lam[1:-1] + lam[2:]
    return int(np.argmax(d2)) + 1


@dataclass
class TruncationReport:
    k_scree_hint: tuple
    k_gd: int
    k_aniso: int | None
    sigma2_est: float
    series: AnisotropySeries
    sigma2_source: str = "estimated"
    nadler_flags: list | None = None
    k_nadler: int | None = None
    notes: list = field(default_factory=list)

    def summary(self) -> str:
        lo, hi = self.k_scree_hint
        lines = [
            "method,k",
            f"scree_knee_heuristic,{lo}-{hi}",
            f"gavish_donoho,{self.k_gd}",
            f"anisotropy_{self.series.criterion},{'none' if self.k_aniso is None else self.k_aniso}",
        ]
        if self.k_nadler is not None:
            lines.append(f"nadler_oracle,{self.k_nadler}")
        lines.append(f"# sigma2 ({self.sigma2_source}) = {self.sigma2_est!r}")
        lines.append(f"# anisotropy threshold = {self.series.threshold!r}")
        lines += [f"# {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def series_csv(self) -> str:
        rows = ["couple_index,criterion_value"]
        rows += [f"{i + 1},{float(v)!r}" for i, v in enumerate(self.series.values)]
        return "\n".join(rows) + "\n"


def truncation_report(model: PcaModel, criterion: str = "hist", threshold: float = DEFAULT_THRESHOLD,
                      max_scan: int = DEFAULT_MAX_SCAN, sigma2: float | None = None,
                      lambda_true=None, raw_sparsity: float | None = None,
                      filtered: bool = True, force: bool = False, null_variances=None,
                      **kw) -> TruncationReport:
    m, n = model.m, model.n
    if sigma2 is None:
        s2 = estimate_noise_sigma2(model.variances, m, n, null_variances)
        source = "estimated" if null_variances is None else "estimated, filtered-noise null"
    else:
        s2, source = float(sigma2), "given"
    notes = []
    try:
        k_aniso, series = select_cutoff_anisotropy(
            model, criterion, threshold, max_scan, raw_sparsity, filtered, force, **kw)
    except NoNoiseDomainError as exc:
        k_aniso = None
        series = anisotropy_series(model, criterion, max_scan, threshold, **kw)
        notes.append(str(exc))
    knee = scree_knee(model.variances, max_scan)
    report = TruncationReport(
        k_scree_hint=(max(knee - 1, 0), knee + 1),
        k_gd=gavish_donoho_cutoff(model.variances, s2, m, n) if s2 > 0 else model.r,
        k_aniso=k_aniso,
        sigma2_est=s2,
        series=series,
        sigma2_source=source,
        notes=notes,
    )
    if lambda_true is not None:
        flags = [nadler_retrievable(lam, s2, m, n) for lam in lambda_true]
        report.nadler_flags = flags
        report.k_nadler = nadler_count(lambda_true, s2, m, n)
    return report


def fixture_report() -> tuple[list[bool], str]:
    """Retrievability of the CMOS fixture components, with the borderline
    note for component 7."""
    t = CMOS_FIXTURE
    bound = math.sqrt(t["n"] / t["m"])
    flags, lines = [], ["component,lambda_true,ratio,bound,retrievable"]
    for i, lam in enumerate(t["lambda_true"], start=1):
        ok = nadler_retrievable(lam, t["sigma2"], t["m"], t["n"])
        flags.append(ok)
        lines.append(f"{i},{lam!r},{lam / t['sigma2']:.4g},{bound:.4g},{'yes' if ok else 'no'}")
    ratio7 = t["lambda_true"][6] / t["sigma2"]
    lines.append(
        f"# note: component 7 ratio {ratio7:.3f} is below the bound {bound:.3f}; "
        "the fixture ticks it as retrievable at the limit of detectability; "
        "the inequality is applied literally here."
    )
    return flags, "\n".join(lines) + "\n"
