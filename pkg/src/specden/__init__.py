"""Weighted, filtered PCA denoising of sparse Poisson spectrum images with
automatic truncation by scatter-plot anisotropy."""

__version__ = "0.1.0"

from .containers import EnergyAxis, SpectrumImage, load_container, save_container
from .decomposition import PcaModel, pca_decompose, proximity
from .pipeline import PreprocessConfig, decompose, prepare
from .reconstruct import reconstruct
from .truncation import select_cutoff_anisotropy, truncation_report

__all__ = [
    "EnergyAxis",
    "SpectrumImage",
    "load_container",
    "save_container",
    "PcaModel",
    "pca_decompose",
    "proximity",
    "PreprocessConfig",
    "decompose",
    "prepare",
    "reconstruct",
    "select_cutoff_anisotropy",
    "truncation_report",
]
