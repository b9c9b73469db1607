"""Composition of the preprocessing chain with the decomposition."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .containers import EnergyAxis, SpectrumImage, flatten, sparsity
from .decomposition import PcaModel, pca_decompose
from .phantom import TWO_PHASE_DOSES, two_phase_truth
from .preprocess import (
    WEIGHT_MODES,
    WeightModel,
    apply_weighting,
    bin2x2,
    center,
    compute_weights,
    gaussian_filter_spatial,
    weighted_noise_variance,
)


@dataclass(frozen=True)
class PreprocessConfig:
    bin: int = 2
    gauss_sigma: float = 1.0
    weight: str = "full"
    center: bool = True

    def __post_init__(self):
        if self.bin not in (1, 2):
            raise ValueError("bin must be 1 or 2")
        if self.gauss_sigma < 0:
            raise ValueError("gauss_sigma must be >= 0")
        if self.weight not in WEIGHT_MODES:
            raise ValueError(f"weight must be one of {WEIGHT_MODES}")

    @property
    def filtered(self) -> bool:
        return self.bin > 1 or self.gauss_sigma > 0

    def as_dict(self) -> dict:
        return asdict(self)


UNWEIGHTED = PreprocessConfig(bin=1, gauss_sigma=0.0, weight="none")
WEIGHTED = PreprocessConfig(bin=1, gauss_sigma=0.0, weight="full")
FILTERED_WEIGHTED = PreprocessConfig()


@dataclass(frozen=True, eq=False)
class Prepared:
    cube: SpectrumImage  # filtered cube, before weighting
    weighted: np.ndarray  # weighted and (optionally) centred matrix
    weights: WeightModel
    center: object
    raw_sparsity: float


def filter_cube(cube: SpectrumImage, cfg: PreprocessConfig) -> SpectrumImage:
    if cfg.bin == 2:
        cube = bin2x2(cube)
    if cfg.gauss_sigma > 0:
        cube = gaussian_filter_spatial(cube, cfg.gauss_sigma)
    return cube


def prepare(cube: SpectrumImage, cfg: PreprocessConfig = FILTERED_WEIGHTED,
            weights: WeightModel | None = None) -> Prepared:
    """bin -> gauss -> flatten -> weight -> center.

    Passing ``weights`` reuses an existing weight model, e.g. to push a
    noise-free twin through the same transform as its noisy partner.
    """
    raw_sparsity = sparsity(cube.counts)
    filt = filter_cube(cube, cfg)
    d = flatten(filt).values
    w = weights if weights is not None else compute_weights(d, cfg.weight)
    dw = apply_weighting(d, w)
    cm = None
    if cfg.center:
        dw, cm = center(dw)
    return Prepared(filt, dw, w, cm, raw_sparsity)


def decompose(cube: SpectrumImage, cfg: PreprocessConfig = FILTERED_WEIGHTED,
              weights: WeightModel | None = None) -> tuple[PcaModel, Prepared]:
    prep = prepare(cube, cfg, weights)
    return pca_decompose(prep.weighted, prep.center, prep.weights), prep


def twin_oracle(noisy: SpectrumImage, truth: SpectrumImage, cfg: PreprocessConfig = FILTERED_WEIGHTED):
    """Noise-free component variances and measured noise variance.

    Both twins go through the same filters and the weights estimated from the
    noisy data.  The noise variance is the mean squared weighted residual per
    matrix element.
    """
    model, prep = decompose(noisy, cfg)
    truth_model, truth_prep = decompose(truth, cfg, weights=prep.weights)
    resid = prep.weighted - truth_prep.weighted
    sigma2 = float(np.mean(resid.var(axis=0)))
    return {
        "model": model,
        "prep": prep,
        "truth_model": truth_model,
        "truth_prep": truth_prep,
        "lambda_true": truth_model.variances,
        "sigma2": sigma2,
    }


def noise_null_variances(rows: int, cols: int, n: int, cfg: PreprocessConfig = FILTERED_WEIGHTED,
                         seed: int = 0) -> np.ndarray:
    """Component variances of unit-variance white noise after the spatial
    filters of ``cfg``, used to calibrate the noise-level estimate."""
    z = np.random.default_rng(seed).standard_normal((rows, cols, n))
    cube = filter_cube(SpectrumImage(z, EnergyAxis(0.0, 1.0, n)), cfg)
    d = flatten(cube).values
    d, _ = center(d / d.std())
    return pca_decompose(d).variances


def dose_study(doses=TWO_PHASE_DOSES, seed: int = 0, replicates: int = 4, mode: str = "spectrum",
               rows: int = 100, cols: int = 100, model=None) -> list[dict]:
    """Mean weighted noise variance of the two-phase object across doses.

    For each replicate one Poisson sample is drawn at the highest dose and
    the lower doses are obtained by successive binomial thinning, so the
    samples are nested.  Weights come either from the noise-free twin
    (``true_w``) or from the noisy data (``est_w``).  The mean runs over the
    channels holding at least one expected count at dose 1.
    """
    doses = sorted(float(d) for d in doses)
    truths = [flatten(two_phase_truth(rows, cols, dose=d, model=model)).values for d in doses]
    unit = flatten(two_phase_truth(rows, cols, dose=1.0, model=model)).values
    active = np.flatnonzero(unit.sum(axis=0) >= 1.0)
    acc = np.zeros((len(doses), 2))
    zero_cols = np.zeros(len(doses))
    for rep in range(replicates):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), rep])))
        x = rng.poisson(truths[-1]).astype(np.float64)
        for i in range(len(doses) - 1, -1, -1):
            if i < len(doses) - 1:
                x = rng.binomial(x.astype(np.int64), doses[i] / doses[i + 1]).astype(np.float64)
            t = truths[i]
            vt = weighted_noise_variance(x, t, compute_weights(t, mode))
            we = compute_weights(x, mode)
            ve = weighted_noise_variance(x, t, we)
            acc[i] += (vt[active].mean(), ve[active].mean())
            zero_cols[i] += np.isin(active, we.zero_cols).mean()
    acc /= replicates
    zero_cols /= replicates
    return [
        {"dose": d, "true_w": float(a[0]), "est_w": float(a[1]), "zero_channel_fraction": float(z),
         "total_counts": float(t.sum())}
        for d, a, z, t in zip(doses, acc, zero_cols, truths)
    ]
