"""Synthetic XEDS spectrum-image phantoms with noisy / noise-free twins.

The spectra come from a parametric model: Gaussian characteristic lines with
an SDD-like resolution curve on top of a Kramers-type continuum.  The continuum
exponent depends weakly on the phase's mean atomic number, so every phase of the
default 11-layer object has its own spectral shape and the noise-free data keep
one degree of freedom per phase.
"""
from __future__ import annotations

import configparser
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.special import erf

from . import lines as _lines
from .containers import EnergyAxis, SpectrumImage
from .errors import NoLinesInRangeError, SpecParseError

FWHM_TO_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.3548

DESK_AXIS = EnergyAxis.from_range(0.2, 12.2, 600)
FULL_AXIS = EnergyAxis.from_range(0.2, 12.2, 1200)
TWO_PHASE_AXIS = EnergyAxis.from_range(0.0, 3.0, 300)

# Total counts of the noise-free cube at dose 1.
DESK_REFERENCE_TOTAL = 6.0e4
FULL_REFERENCE_TOTAL = 8.0e5
TWO_PHASE_REFERENCE_TOTAL = 2.0e4


@dataclass(frozen=True)
class Phase:
    name: str
    composition: tuple  # ((symbol, atomic fraction), ...)

    def __post_init__(self):
        comp = tuple((str(el), float(x)) for el, x in self.composition)
        if not comp:
            raise ValueError(f"phase {self.name!r} has no elements")
        for el, x in comp:
            if not x > 0:
                raise ValueError(f"phase {self.name!r}: fraction of {el} must be positive")
        total = sum(x for _, x in comp)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"phase {self.name!r}: fractions sum to {total}, not 1")
        object.__setattr__(self, "composition", comp)

    @property
    def mean_z(self) -> float:
        return sum(x * _lines.ELEMENTS[el][0] for el, x in self.composition)


def _phase(name, **fractions):
    return Phase(name, tuple(fractions.items()))


# Compositions of the CMOS layers in at.%.
STACK_PHASES = {
    "Si": _phase("Si", Si=1.0),
    "SiO-A": _phase("SiO-A", Si=0.33, O=0.67),
    "SiO-B": _phase("SiO-B", Si=0.29, O=0.57, N=0.14),
    "HfO": _phase("HfO", Hf=0.33, O=0.67),
    "TiN-A": _phase("TiN-A", Ti=0.50, N=0.50),
    "TiN-B": _phase("TiN-B", Ti=0.50, N=0.40, O=0.10),
    "TiN-C": _phase("TiN-C", Ti=0.45, N=0.45, Al=0.10),
    "TaN": _phase("TaN", Ta=0.50, N=0.50),
    "Al": _phase("Al", Al=0.80, Ti=0.20),
    "AlO": _phase("AlO", Al=0.40, O=0.60),
    "SiN": _phase("SiN", Si=0.43, N=0.57),
}
SIO2 = _phase("SiO2", Si=1.0 / 3.0, O=2.0 / 3.0)

# Stack order and width fractions across the image; rough proportions only.
DEFAULT_LAYERS = (
    ("Si", 0.12), ("SiO-A", 0.06), ("HfO", 0.12), ("TiN-A", 0.08), ("TaN", 0.12),
    ("TiN-B", 0.06), ("Al", 0.12), ("TiN-C", 0.06), ("AlO", 0.07), ("SiO-B", 0.06),
    ("SiN", 0.13),
)


@dataclass(frozen=True)
class SpectrumModel:
    """Parametric XEDS spectrum model.

    ``lines`` maps element -> list of (label, energy keV, weight); the weight
    already includes the element yield.  Detector resolution follows
    ``FWHM(E)^2 = fwhm_ref^2 + fwhm_slope * (E - E_ref)`` (eV^2, E in keV).
    The continuum is ``background * Zbar * ((E0 - E)/E)^x * T(E)`` with
    ``x = bg_exponent + bg_exponent_z * (Zbar - 14)`` and a low-energy window
    transmission ``T(E) = exp(-(window_kev / E)^3)``.
    """

    lines: dict = field(default_factory=lambda: {
        el: [(lab, e, w * _lines.YIELD[el]) for lab, e, w in ls] for el, ls in _lines.LINES.items()
    })
    fwhm_ref_ev: float = 125.0
    e_ref_kev: float = 5.895
    fwhm_slope: float = 2423.0
    background: float = 2e-5
    beam_kev: float = 300.0
    bg_exponent: float = 1.0
    bg_exponent_z: float = -0.02
    window_kev: float = 0.25

    def fwhm_kev(self, energy_kev):
        f2 = self.fwhm_ref_ev ** 2 + self.fwhm_slope * (np.asarray(energy_kev) - self.e_ref_kev)
        if np.any(f2 <= 0):
            raise ValueError("detector FWHM model is non-positive inside the energy range")
        return np.sqrt(f2) / 1000.0

    def line_weight(self, element: str, label: str) -> float:
        for lab, _, w in self.lines[element]:
            if lab == label:
                return w
        raise KeyError(f"{element} {label}")


def _channel_edges(axis: EnergyAxis) -> np.ndarray:
    return axis.lo_kev + axis.dispersion_kev * np.arange(axis.n_channels + 1)


def _line_profile(energy: float, sigma: float, edges: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf((edges - energy) / (math.sqrt(2.0) * sigma)))
    return np.diff(cdf)


def _in_range(energy, axis):
    return axis.lo_kev <= energy < axis.hi_kev


def continuum(phase: Phase, model: SpectrumModel, axis: EnergyAxis) -> np.ndarray:
    e = axis.energies
    zbar = phase.mean_z
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(e > 0, (model.beam_kev - e) / np.where(e > 0, e, 1.0), 0.0)
        ratio = np.clip(ratio, 0.0, None)
        window = np.where(e > 0, np.exp(-(model.window_kev / np.where(e > 0, e, 1.0)) ** 3), 0.0)
    x = model.bg_exponent + model.bg_exponent_z * (zbar - 14.0)
    return model.background * zbar * ratio ** x * window * axis.dispersion_kev


def _line_areas(phase: Phase, model: SpectrumModel, axis: EnergyAxis) -> dict:
    areas = {}
    for el, frac in phase.composition:
        for label, energy, weight in model.lines.get(el, ()):
            if _in_range(energy, axis):
                areas[(el, label)] = frac * weight
    return areas


def raw_phase_spectrum(phase: Phase, model: SpectrumModel, axis: EnergyAxis) -> np.ndarray:
    """Un-normalised expected spectrum; its total sets the phase brightness."""
    edges = _channel_edges(axis)
    spec = np.zeros(axis.n_channels)
    for el, frac in phase.composition:
        for label, energy, weight in model.lines.get(el, ()):
            if not _in_range(energy, axis):
                continue
            sigma = float(model.fwhm_kev(energy)) / FWHM_TO_SIGMA
            spec += frac * weight * _line_profile(energy, sigma, edges)
    spec += continuum(phase, model, axis)
    if not np.any(spec > 0):
        raise NoLinesInRangeError(f"phase {phase.name!r} has no spectral content on the axis")
    return spec


def phase_spectrum(phase: Phase, model: SpectrumModel, axis: EnergyAxis) -> np.ndarray:
    spec = raw_phase_spectrum(phase, model, axis)
    return spec / spec.sum()


def line_areas(phase: Phase, model: SpectrumModel, axis: EnergyAxis) -> dict:
    """Nominal area of each in-range line in the unit-normalised phase spectrum."""
    total = raw_phase_spectrum(phase, model, axis).sum()
    return {key: a / total for key, a in _line_areas(phase, model, axis).items()}


@dataclass(frozen=True)
class PhantomSpec:
    rows: int
    cols: int
    layers: tuple  # ((Phase, width fraction), ...)
    axis: EnergyAxis
    boundary_smear_px: float = 1.0
    dose: float = 1.0
    seed: int = 0
    reference_total: float = DESK_REFERENCE_TOTAL

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must be at least 1x1")
        widths = [w for _, w in self.layers]
        if not widths or any(not w > 0 for w in widths):
            raise ValueError("layer widths must be positive")
        if abs(sum(widths) - 1.0) > 1e-9:
            raise ValueError(f"layer widths sum to {sum(widths)}, not 1")
        if not self.dose > 0:
            raise ValueError("dose must be positive")
        if self.boundary_smear_px < 0:
            raise ValueError("boundary smear must be non-negative")

    @property
    def phases(self) -> list:
        return [p for p, _ in self.layers]


def desk_spec(**overrides) -> PhantomSpec:
    """11-layer CMOS phantom at desk scale (96 x 128 px, 600 channels)."""
    kw = dict(
        rows=96, cols=128,
        layers=tuple((STACK_PHASES[name], w) for name, w in DEFAULT_LAYERS),
        axis=DESK_AXIS,
    )
    kw.update(overrides)
    return PhantomSpec(**kw)


def full_spec(**overrides) -> PhantomSpec:
    """Same object at the acquisition size (244 x 336 px, 1200 channels)."""
    kw = dict(rows=244, cols=336, axis=FULL_AXIS, reference_total=FULL_REFERENCE_TOTAL)
    kw.update(overrides)
    return desk_spec(**kw)


def build_phase_maps(spec: PhantomSpec) -> np.ndarray:
    """Per-phase fraction maps, shape ``(n_layers, rows, cols)``.

    Layers are vertical bands laid out left to right; column ``j`` belongs to
    the band containing its centre.  Each map is blurred with a Gaussian of
    ``boundary_smear_px`` and the stack renormalised to sum 1 per pixel.
    """
    widths = np.array([w for _, w in spec.layers])
    bounds = np.cumsum(widths)
    bounds[-1] = 1.0
    centres = (np.arange(spec.cols) + 0.5) / spec.cols
    owner = np.searchsorted(bounds, centres, side="right")
    owner = np.minimum(owner, len(widths) - 1)
    maps = np.zeros((len(widths), spec.cols))
    maps[owner, np.arange(spec.cols)] = 1.0
    # below 1/8 px the truncated kernel is a single tap, i.e. the identity
    if spec.boundary_smear_px >= 0.125:
        maps = gaussian_filter1d(maps, spec.boundary_smear_px, axis=1, mode="nearest")
    maps /= maps.sum(axis=0, keepdims=True)
    return np.repeat(maps[:, None, :], spec.rows, axis=1)


def _spec_provenance(spec: PhantomSpec, noise: str, seed=None) -> str:
    layers = ",".join(f"{p.name}:{w!r}" for p, w in spec.layers)
    parts = [
        f"generator=specden.phantom", f"noise={noise}", f"grid={spec.rows}x{spec.cols}",
        f"layers={layers}", f"smear={spec.boundary_smear_px!r}", f"dose={spec.dose!r}",
        f"reference_total={spec.reference_total!r}",
    ]
    if seed is not None:
        parts.append(f"seed={seed}")
    return ";".join(parts)


def synthesize(spec: PhantomSpec, model: SpectrumModel | None = None) -> SpectrumImage:
    model = model or SpectrumModel()
    raw = np.stack([raw_phase_spectrum(p, model, spec.axis) for p in spec.phases])
    maps = build_phase_maps(spec)
    cube = np.tensordot(maps, raw, axes=([0], [0]))
    cube *= spec.dose * spec.reference_total / cube.sum()
    return SpectrumImage(cube, spec.axis, _spec_provenance(spec, "off"))


def _threads() -> int:
    n = int(os.environ.get("SPECDEN_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


def add_poisson(noise_free: SpectrumImage, seed: int) -> SpectrumImage:
    """Poisson-sample every cell; row ``r`` draws from its own Philox stream
    keyed by ``(seed, r)`` so the result does not depend on the worker count."""
    expected = noise_free.counts
    if np.any(expected < 0) or not np.all(np.isfinite(expected)):
        raise ValueError("expected counts must be finite and non-negative")
    out = np.empty_like(expected)

    def sample_row(r):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), r])))
        out[r] = rng.poisson(expected[r])

    workers = min(_threads(), noise_free.rows)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(sample_row, range(noise_free.rows)))
    else:
        for r in range(noise_free.rows):
            sample_row(r)
    prov = noise_free.provenance.replace("noise=off", "noise=poisson")
    return SpectrumImage(out, noise_free.axis, f"{prov};seed={int(seed)}")


def twins(spec: PhantomSpec, model: SpectrumModel | None = None, seed: int | None = None):
    """``(noisy, noise_free)`` pair for a phantom spec."""
    truth = synthesize(spec, model)
    return add_poisson(truth, spec.seed if seed is None else seed), truth


def two_phase_spec(rows=100, cols=100, axis=TWO_PHASE_AXIS, dose=1.0, seed=0,
                   reference_total=TWO_PHASE_REFERENCE_TOTAL) -> PhantomSpec:
    return PhantomSpec(rows, cols, ((STACK_PHASES["Si"], 0.5), (SIO2, 0.5)), axis,
                       boundary_smear_px=0.0, dose=dose, seed=seed, reference_total=reference_total)


def two_phase_truth(rows=100, cols=100, axis=TWO_PHASE_AXIS, dose=1.0,
                    model: SpectrumModel | None = None,
                    reference_total=TWO_PHASE_REFERENCE_TOTAL) -> SpectrumImage:
    """Pure Si on the left edge ramping linearly to SiO2 on the right edge."""
    model = model or SpectrumModel()
    spec = two_phase_spec(rows, cols, axis, dose, 0, reference_total)
    raw = np.stack([raw_phase_spectrum(p, model, axis) for p in spec.phases])
    f = np.linspace(0.0, 1.0, cols) if cols > 1 else np.zeros(1)
    line = np.outer(1.0 - f, raw[0]) + np.outer(f, raw[1])
    cube = np.repeat(line[None, :, :], rows, axis=0)
    cube *= dose * reference_total / cube.sum()
    prov = _spec_provenance(spec, "off").replace("smear=0.0", "ramp=linear")
    return SpectrumImage(cube, axis, prov)


def two_phase_object(rows=100, cols=100, axis=TWO_PHASE_AXIS, dose=1.0, seed=0,
                     model: SpectrumModel | None = None,
                     reference_total=TWO_PHASE_REFERENCE_TOTAL):
    truth = two_phase_truth(rows, cols, axis, dose, model, reference_total)
    return add_poisson(truth, seed), truth


TWO_PHASE_DOSES = (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1, 2, 4, 8, 16, 32, 64)


# ---------------------------------------------------------------- spec files

_SPEC_KEYS = {"grid", "channels", "energy", "layers", "widths", "dose", "seed", "smear", "reference_total"}


def default_spec_text() -> str:
    return resources.files("specden").joinpath("data/cmos_default.cfg").read_text()


def parse_spec(text: str) -> PhantomSpec:
    """Parse a key/value phantom description (see ``data/cmos_default.cfg``).

    Custom phases are declared as ``phase.NAME = El:frac, El:frac``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[phantom]\n" + text)
    except configparser.Error as exc:
        raise SpecParseError(str(exc)) from exc
    sec = dict(cp["phantom"])
    phases = dict(STACK_PHASES)
    try:
        for key in [k for k in sec if k.startswith("phase.")]:
            name = key[len("phase."):]
            comp = []
            for item in sec.pop(key).split(","):
                el, frac = item.split(":")
                if el.strip() not in _lines.ELEMENTS:
                    raise SpecParseError(f"unknown element {el.strip()!r} in {key}")
                comp.append((el.strip(), float(frac)))
            phases[name] = Phase(name, tuple(comp))
        unknown = set(sec) - _SPEC_KEYS
        if unknown:
            raise SpecParseError(f"unknown keys: {sorted(unknown)}")
        rows, cols = (int(v) for v in sec.get("grid", "96x128").lower().split("x"))
        nch = int(sec.get("channels", "600"))
        lo, hi = (float(v) for v in sec.get("energy", "0.2:12.2").split(":"))
        names = [s.strip() for s in sec["layers"].split(",") if s.strip()]
        if "widths" in sec:
            widths = [float(s) for s in sec["widths"].split(",") if s.strip()]
        else:
            widths = [1.0 / len(names)] * len(names)
        if len(widths) != len(names):
            raise SpecParseError(f"{len(names)} layers but {len(widths)} widths")
        missing = [n for n in names if n not in phases]
        if missing:
            raise SpecParseError(f"undefined phases: {missing}")
        return PhantomSpec(
            rows=rows, cols=cols,
            layers=tuple((phases[n], w) for n, w in zip(names, widths)),
            axis=EnergyAxis.from_range(lo, hi, nch),
            boundary_smear_px=float(sec.get("smear", "1.0")),
            dose=float(sec.get("dose", "1.0")),
            seed=int(sec.get("seed", "0")),
            reference_total=float(sec.get("reference_total", repr(DESK_REFERENCE_TOTAL))),
        )
    except SpecParseError:
        raise
    except (KeyError, ValueError) as exc:
        raise SpecParseError(f"bad phantom spec: {exc}") from exc


def load_spec(path) -> PhantomSpec:
    return parse_spec(Path(path).read_text())


def with_dose(spec: PhantomSpec, dose: float) -> PhantomSpec:
    return replace(spec, dose=float(dose))


def single_count_matrix(m: int, n: int, c: int, seed: int = 0) -> np.ndarray:
    """``m x n`` matrix holding ``c <= n`` single counts, each in its own column."""
    if not 0 <= c <= n:
        raise ValueError("need 0 <= c <= n")
    rng = np.random.default_rng(seed)
    d = np.zeros((m, n))
    cols = rng.choice(n, size=c, replace=False)
    d[rng.integers(0, m, size=c), cols] = 1.0
    return d
