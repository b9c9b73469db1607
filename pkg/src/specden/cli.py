"""Command line entry point: ``specden <subcommand> ...``.

Every subcommand writes into ``--out`` under fixed file names and finishes
with ``manifest.json``, which records the normalized arguments and the
defaults in force.  ``--manifest`` replays a previous run.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import phantom as ph
from . import truncation as tr
from .containers import load_container, save_container, write_map_csv, write_spectrum_csv
from .decomposition import proximity_matrix, scree
from .errors import NoNoiseDomainError, SparseInputError, SpecdenError, StageError
from .pipeline import PreprocessConfig, decompose, dose_study, noise_null_variances, twin_oracle
from .preprocess import apply_weighting, bin2x2, compute_weights, mean_column_variance
from .reconstruct import default_windows, elemental_map, quality, reconstruct, write_pgm

log = logging.getLogger("specden")

OUTPUTS = {
    "generate": "noisy.sic, truth.sic (per --noise), phases.csv, spec.cfg, manifest.json",
    "denoise": "denoised.sic, truncation.txt, anisotropy.csv, scree.csv, quality.txt (with --truth), manifest.json",
    "analyze": "scree.csv, anisotropy.csv, proximity.csv (with --reference), grids/grid_I_J.csv, "
               "maps/<line>.csv + .pgm, manifest.json",
    "dose-study": "dose_study.csv, sparse_limit.csv, manifest.json",
    "truncation-report": "truncation.txt, anisotropy.csv, fixture.csv (with --fixture), manifest.json",
}


class _Fail(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _stage(name, fn, *args, **kw):
    log.info("stage %s", name)
    try:
        return fn(*args, **kw)
    except (SparseInputError, NoNoiseDomainError):
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _normalized_args(args) -> dict:
    skip = {"func", "manifest", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_manifest(out: Path, args, inputs=(), outputs=()):
    manifest = {
        "command": args.command,
        "args": _normalized_args(args),
        "version": __version__,
        "defaults": {
            "spectrum_model": {k: v for k, v in asdict(ph.SpectrumModel()).items() if k != "lines"},
            "anisotropy": {
                "grid": tr.DEFAULT_GRID, "projections": tr.DEFAULT_PROJECTIONS,
                "bins": tr.DEFAULT_BINS, "threshold": tr.DEFAULT_THRESHOLD,
                "max_scan": tr.DEFAULT_MAX_SCAN, "sparse_limit": tr.SPARSE_LIMIT,
            },
            "desk_reference_total": ph.DESK_REFERENCE_TOTAL,
        },
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _config(args) -> PreprocessConfig:
    return PreprocessConfig(bin=args.bin, gauss_sigma=args.gauss_sigma, weight=args.weight,
                            center=args.center == "on")


def _csv(path: Path, header: str, rows) -> None:
    lines = [header] + [",".join(_cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> list[str]:
    out = Path(args.out)
    if args.object == "two-phase":
        truth = ph.two_phase_truth(dose=args.dose)
        layers = [("Si", 0.5), ("SiO2", 0.5)]
        phases = {"Si": ph.STACK_PHASES["Si"], "SiO2": ph.SIO2}
        spec_text = None
    else:
        if args.spec:
            spec_text = Path(args.spec).read_text()
            spec = _stage("parse-spec", ph.parse_spec, spec_text)
        else:
            spec_text = ph.default_spec_text()
            spec = ph.full_spec() if args.scale == "full" else ph.parse_spec(spec_text)
        spec = ph.with_dose(spec, args.dose)
        truth = _stage("synthesize", ph.synthesize, spec)
        layers = [(p.name, w) for p, w in spec.layers]
        phases = {p.name: p for p in spec.phases}
    written = []
    if args.noise in ("off", "both"):
        save_container(truth, out / "truth.sic")
        written.append("truth.sic")
    if args.noise in ("on", "both"):
        noisy = _stage("poisson", ph.add_poisson, truth, args.seed)
        save_container(noisy, out / "noisy.sic")
        written.append("noisy.sic")
    _csv(out / "phases.csv", "layer,phase,width,composition",
         [(i + 1, name, w, " ".join(f"{el}:{f!r}" for el, f in phases[name].composition))
          for i, (name, w) in enumerate(layers)])
    written.append("phases.csv")
    if spec_text is not None:
        (out / "spec.cfg").write_text(spec_text)
        written.append("spec.cfg")
    log.info("total counts %.6g", truth.total_counts)
    return written


# ----------------------------------------------------------------- denoise

def _oracle_bits(cube, truth_path, cfg):
    truth = load_container(truth_path)
    if truth.counts.shape != cube.counts.shape:
        raise StageError("load-truth", ValueError(
            f"truth shape {truth.counts.shape} differs from input {cube.counts.shape}"))
    return truth, twin_oracle(cube, truth, cfg)


def _report(args, model, prep, cube, cfg, oracle=None):
    null = None
    if cfg.filtered and args.sigma2 is None:
        null = _stage("noise-null", noise_null_variances, cube.rows, cube.cols, cube.n_channels,
                      cfg, args.seed)
    lam_true = oracle["lambda_true"] if oracle else None
    sigma2 = args.sigma2
    report = _stage(
        "truncate", tr.truncation_report, model, args.criterion, args.threshold, args.max_scan,
        sigma2, None, prep.raw_sparsity, cfg.filtered, args.force, null,
    )
    if oracle is not None:
        s2 = oracle["sigma2"]
        report.nadler_flags = [tr.nadler_retrievable(v, s2, model.m, model.n) for v in lam_true]
        report.k_nadler = tr.nadler_count(lam_true, s2, model.m, model.n)
        report.notes.append(f"nadler oracle uses the measured twin noise variance {s2!r}")
    return report


def cmd_denoise(args) -> list[str]:
    out = Path(args.out)
    cfg = _config(args)
    cube = _stage("load", load_container, args.input)
    oracle = truth = None
    if args.truth:
        truth, oracle = _stage("twin-oracle", _oracle_bits, cube, args.truth, cfg)
        model, prep = oracle["model"], oracle["prep"]
    else:
        model, prep = _stage("decompose", decompose, cube, cfg)
    written = []
    try:
        report = _report(args, model, prep, cube, cfg, oracle)
    except SparseInputError as exc:
        (out / "truncation.txt").write_text(f"method,k\n# sparse-unfiltered warning: {exc}\n")
        raise _Fail(3, f"selection refused: {exc}") from exc
    (out / "truncation.txt").write_text(report.summary())
    (out / "anisotropy.csv").write_text(report.series_csv())
    _csv(out / "scree.csv", "component,variance", scree(model))
    written += ["truncation.txt", "anisotropy.csv", "scree.csv"]
    k = args.k if args.k is not None else report.k_aniso
    if k is None:
        raise _Fail(4, "no noise domain found within the scan; raise --max-scan or pass --k")
    rec = _stage("reconstruct", reconstruct, model, k, prep.cube.rows, prep.cube.cols,
                 cube.axis, args.clamp, f"{cube.provenance};denoised;k={k}")
    save_container(rec, out / "denoised.sic")
    written.append("denoised.sic")
    log.info("k used %d (anisotropy %s, gavish-donoho %d)", k, report.k_aniso, report.k_gd)
    if truth is not None:
        # compare on the binned grid the reconstruction lives on
        raw, ref = (bin2x2(cube), bin2x2(truth)) if cfg.bin == 2 else (cube, truth)
        q = quality(rec, raw, ref, k)
        (out / "quality.txt").write_text(q.text())
        written.append("quality.txt")
    return written


# ----------------------------------------------------------------- analyze

def cmd_analyze(args) -> list[str]:
    out = Path(args.out)
    cfg = _config(args)
    cube = _stage("load", load_container, args.input)
    model, prep = _stage("decompose", decompose, cube, cfg)
    written = []
    _csv(out / "scree.csv", "component,variance", scree(model))
    written.append("scree.csv")
    n_couples = min(args.max_scan, model.r - 1)
    rows = []
    T = model.scores
    for i in range(n_couples):
        vals = [tr.couple_value(T[:, i], T[:, i + 1], c) for c in tr.CRITERIA]
        rows.append((i + 1, i + 2, *vals))
    _csv(out / "anisotropy.csv", "component_a,component_b," + ",".join(tr.CRITERIA), rows)
    written.append("anisotropy.csv")
    grid_dir = out / "grids"
    grid_dir.mkdir(exist_ok=True)
    for i in range(min(args.grids, model.r - 1)):
        g = tr.scatter_grid(T[:, i], T[:, i + 1])
        name = f"grid_{i + 1:02d}_{i + 2:02d}.csv"
        write_map_csv(grid_dir / name, g.cells)
        written.append(f"grids/{name}")
    if args.reference:
        ref = _stage("load-reference", load_container, args.reference)
        if ref.counts.shape != cube.counts.shape:
            raise StageError("proximity", ValueError(
                f"reference shape {ref.counts.shape} differs from input {cube.counts.shape}"))
        ref_model, _ = _stage("decompose-reference", decompose, ref, cfg, prep.weights)
        n = min(args.components, model.r)
        phi = proximity_matrix(model, ref_model, n, n)
        _csv(out / "proximity.csv", "reference_component," + ",".join(f"test_{l + 1}" for l in range(n)),
             [(k + 1, *phi[k]) for k in range(n)])
        written.append("proximity.csv")
    map_dir = out / "maps"
    map_dir.mkdir(exist_ok=True)
    for win in default_windows():
        if not win.channels(prep.cube.axis).size:
            continue
        img = elemental_map(prep.cube, win)
        write_map_csv(map_dir / f"{win.label}.csv", img)
        write_pgm(map_dir / f"{win.label}.pgm", img)
        written += [f"maps/{win.label}.csv", f"maps/{win.label}.pgm", f"maps/{win.label}.scale.txt"]
    write_spectrum_csv(out / "mean_spectrum.csv", prep.cube.axis, prep.cube.counts.mean(axis=(0, 1)))
    written.append("mean_spectrum.csv")
    return written


# -------------------------------------------------------------- dose study

def cmd_dose_study(args) -> list[str]:
    out = Path(args.out)
    rows = _stage("dose-study", dose_study, args.doses, args.seed, args.replicates, args.mode)
    _csv(out / "dose_study.csv", "dose,total_counts,true_w,est_w,zero_channel_fraction",
         [(r["dose"], r["total_counts"], r["true_w"], r["est_w"], r["zero_channel_fraction"]) for r in rows])
    m, n = 100 * 100, 300
    lines = []
    for c in (30, 75, 150):
        d = ph.single_count_matrix(m, n, c, args.seed)
        v = mean_column_variance(apply_weighting(d, compute_weights(d, "spectrum")))
        lines.append((m, n, c, v, c / n))
    _csv(out / "sparse_limit.csv", "m,n,counts,mean_weighted_variance,c_over_n", lines)
    return ["dose_study.csv", "sparse_limit.csv"]


# ------------------------------------------------------- truncation report

def cmd_truncation_report(args) -> list[str]:
    out = Path(args.out)
    written = []
    if args.fixture:
        flags, text = tr.fixture_report()
        (out / "fixture.csv").write_text(text)
        sys.stdout.write(text)
        written.append("fixture.csv")
    if args.input:
        cfg = _config(args)
        cube = _stage("load", load_container, args.input)
        oracle = None
        if args.truth:
            _, oracle = _stage("twin-oracle", _oracle_bits, cube, args.truth, cfg)
            model, prep = oracle["model"], oracle["prep"]
        else:
            model, prep = _stage("decompose", decompose, cube, cfg)
        try:
            report = _report(args, model, prep, cube, cfg, oracle)
        except SparseInputError as exc:
            (out / "truncation.txt").write_text(f"method,k\n# sparse-unfiltered warning: {exc}\n")
            raise _Fail(3, f"selection refused: {exc}") from exc
        (out / "truncation.txt").write_text(report.summary())
        (out / "anisotropy.csv").write_text(report.series_csv())
        sys.stdout.write(report.summary())
        written += ["truncation.txt", "anisotropy.csv"]
    if not written:
        raise _Fail(2, "nothing to report: give an input file and/or --fixture")
    return written


# ------------------------------------------------------------------ parser

def _add_preprocess(p):
    p.add_argument("--bin", type=int, choices=(1, 2), default=2, help="spatial binning factor")
    p.add_argument("--gauss-sigma", type=float, default=1.0, help="Gaussian filter sigma in pixels (0 = off)")
    p.add_argument("--weight", choices=("full", "spectrum", "none"), default="full")
    p.add_argument("--center", choices=("on", "off"), default="on")


def _add_truncation(p):
    p.add_argument("--criterion", choices=tr.CRITERIA, default="hist")
    p.add_argument("--threshold", type=float, default=tr.DEFAULT_THRESHOLD)
    p.add_argument("--max-scan", type=int, default=tr.DEFAULT_MAX_SCAN)
    p.add_argument("--sigma2", type=float, default=None,
                   help="noise variance for the Gavish-Donoho rule (default: estimated)")
    p.add_argument("--force", action="store_true", help="select even on sparse, unfiltered data")
    p.add_argument("--truth", default=None, help="noise-free twin (SIC) for oracle checks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specden",
        description="Weighted PCA denoising of spectrum images with anisotropy-based truncation.",
        epilog="Environment: SPECDEN_THREADS caps worker threads (0 = all cores).",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=f"{help_}\n\nOutputs in --out: {OUTPUTS[name]}",
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--out", required=False, default=None, help="output directory (created if missing)")
        p.add_argument("--manifest", default=None, help="replay the arguments stored in a manifest.json")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "synthesize a phantom and its Poisson twin")
    p.add_argument("--spec", default=None, help="phantom description file (default: built-in CMOS stack)")
    p.add_argument("--object", choices=("cmos", "two-phase"), default="cmos")
    p.add_argument("--scale", choices=("desk", "full"), default="desk")
    p.add_argument("--dose", type=float, default=1.0)
    p.add_argument("--noise", choices=("on", "off", "both"), default="both")

    p = add("denoise", cmd_denoise, "preprocess, decompose, select k and reconstruct")
    p.add_argument("input", nargs="?")
    _add_preprocess(p)
    _add_truncation(p)
    p.add_argument("--k", type=int, default=None, help="override the selected number of components")
    p.add_argument("--clamp", action="store_true", help="clip negative reconstructed counts to 0")

    p = add("analyze", cmd_analyze, "scree, anisotropy, proximity and scatter-grid data products")
    p.add_argument("input", nargs="?")
    p.add_argument("--reference", default=None, help="reference SIC for the proximity table")
    _add_preprocess(p)
    p.add_argument("--max-scan", type=int, default=tr.DEFAULT_MAX_SCAN)
    p.add_argument("--components", type=int, default=20, help="size of the proximity table")
    p.add_argument("--grids", type=int, default=8, help="number of sequential couples dumped as grids")

    p = add("dose-study", cmd_dose_study, "weighted noise variance of the two-phase object versus dose")
    p.add_argument("--doses", type=float, nargs="+", default=list(ph.TWO_PHASE_DOSES))
    p.add_argument("--replicates", type=int, default=4)
    p.add_argument("--mode", choices=("spectrum", "full"), default="spectrum")

    p = add("truncation-report", cmd_truncation_report, "number of components by every method")
    p.add_argument("input", nargs="?")
    p.add_argument("--fixture", action="store_true", help="include the built-in CMOS variance fixture")
    _add_preprocess(p)
    _add_truncation(p)
    return parser


def _apply_manifest(args, parser):
    data = json.loads(Path(args.manifest).read_text())
    if data.get("command") != args.command:
        parser.error(f"manifest is for '{data.get('command')}', not '{args.command}'")
    out = args.out
    for key, value in data["args"].items():
        setattr(args, key, value)
    if out is not None:
        args.out = out
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.manifest:
        args = _apply_manifest(args, parser)
    if args.out is None:
        parser.error("--out is required")
    if getattr(args, "input", "") is None and args.command in ("denoise", "analyze"):
        parser.error("an input file is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("config %s", json.dumps(_normalized_args(args), sort_keys=True))
    try:
        written = args.func(args)
    except _Fail as exc:
        print(f"specden: {exc}", file=sys.stderr)
        return exc.code
    except SpecdenError as exc:
        print(f"specden: {exc}", file=sys.stderr)
        return 2
    inputs = [getattr(args, k, None) for k in ("input", "truth", "reference", "spec")]
    _write_manifest(out, args, [p for p in inputs if p], written)
    return 0


if __name__ == "__main__":
    sys.exit(main())
