"""Command-line pipeline: simulate -> reconstruct -> evaluate.

Configuration is a YAML file of nested key-value blocks; unknown keys are
rejected. Artifacts are array containers (see arrayio) plus text sidecars,
PNGs and CSV reports, all listed with SHA-256 hashes in a per-run manifest.
Output directories are append-only: a directory that already holds a manifest
is refused.

Exit codes: 0 success, 2 configuration error, 3 solver error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .arrayio import read_array, read_metadata, write_array, write_metadata, write_png
from .denoise import DenoiserSpec, make_denoiser
from .dose import DoseSettings, NoiseRealization, counts_to_sinogram, make_phantom, \
    simulate_counts, statistical_weights
from .errors import ConfigError, PnpMbirError, SolverError, UsageError
from .geometry import FILTER_WINDOWS, FanBeamGeometry, fbp_reconstruct, \
    forward_project
from .solver import PnpConfig, run_pnp, write_residuals_csv
from .texture import GlcmParams, MethodEval, emd, glcm_features, \
    intensity_histogram, quantize_levels, relative_change_report
from .types import ImageGrid, Sinogram, StatWeights, hu_to_mu

METHODS = ("fbp", "denoise_only", "pnp")

# denoisers that need the [0,1]-normalized domain; scale-equivariant ones are
# applied to physical attenuation directly
_NORMALIZED_DENOISERS = ("tv_prox", "residual_cnn")


@dataclass
class MetricsSettings:
    window_level_hu: float = 30.0
    window_width_hu: float = 300.0
    levels: int = 256

    def mu_window(self) -> tuple[float, float]:
        lo = hu_to_mu(self.window_level_hu - self.window_width_hu / 2.0)
        hi = hu_to_mu(self.window_level_hu + self.window_width_hu / 2.0)
        return float(lo), float(hi)


@dataclass
class PipelineConfig:
    geometry: FanBeamGeometry
    phantom_kind: str
    ma_list: list[float]
    dose: DoseSettings  # tube_current_mA is a placeholder; per-bundle values come from ma_list
    method: str
    fbp_window: str
    denoiser_spec: DenoiserSpec
    solver: PnpConfig
    metrics: MetricsSettings
    output_dir: str
    seed: int


def _require_keys(block: dict, allowed: dict[str, object], context: str) -> dict:
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    merged = dict(allowed)
    merged.update(block)
    return merged


_TOP_KEYS = ("geometry", "phantom", "dose", "reconstruction", "metrics",
             "output_dir", "seed")


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a pipeline YAML file (fail-fast on unknown keys)."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - set(_TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")

    geo = _require_keys(raw.get("geometry", {}) or {}, dict(
        image_n=128, pixel_mm=1.0, n_views=360, n_detectors=256,
        source_to_iso_mm=540.0, source_to_detector_mm=950.0,
        detector_pitch_mm=1.0), "geometry")
    try:
        geometry = FanBeamGeometry(
            n_views=int(geo["n_views"]), n_detectors=int(geo["n_detectors"]),
            source_to_iso_mm=float(geo["source_to_iso_mm"]),
            source_to_detector_mm=float(geo["source_to_detector_mm"]),
            detector_pitch_mm=float(geo["detector_pitch_mm"]),
            image_n=int(geo["image_n"]), pixel_mm=float(geo["pixel_mm"]))
    except UsageError as exc:
        raise ConfigError(f"geometry: {exc}") from exc

    ph = _require_keys(raw.get("phantom", {}) or {}, dict(kind="shepp_logan"), "phantom")

    dose_block = _require_keys(raw.get("dose", {}) or {}, dict(
        ma_list=[40.0], reference_ma=800.0, photons_per_ray_at_reference=1e5,
        electronic_noise_sd=5.0), "dose")
    ma_list = [float(m) for m in dose_block["ma_list"]]
    if not ma_list:
        raise ConfigError("dose.ma_list must be nonempty")
    try:
        dose = DoseSettings(
            tube_current_mA=ma_list[0],
            reference_current_mA=float(dose_block["reference_ma"]),
            photons_per_ray_at_reference=float(dose_block["photons_per_ray_at_reference"]),
            electronic_noise_sd=float(dose_block["electronic_noise_sd"]))
    except UsageError as exc:
        raise ConfigError(f"dose: {exc}") from exc

    rec = _require_keys(raw.get("reconstruction", {}) or {}, dict(
        method="fbp", fbp_window="hann", denoiser=None, solver=None), "reconstruction")
    method = str(rec["method"])
    if method not in METHODS:
        raise ConfigError(f"reconstruction.method must be one of {METHODS}")
    if rec["fbp_window"] not in FILTER_WINDOWS:
        raise ConfigError(f"reconstruction.fbp_window must be one of {FILTER_WINDOWS}")

    den = _require_keys(rec.get("denoiser") or {}, dict(
        kind="identity", strength=0.0, weights_path=None), "reconstruction.denoiser")
    try:
        denoiser_spec = DenoiserSpec(str(den["kind"]), float(den["strength"]),
                                     den["weights_path"])
    except UsageError as exc:
        raise ConfigError(f"reconstruction.denoiser: {exc}") from exc
    if denoiser_spec.weights_path and not Path(denoiser_spec.weights_path).exists():
        raise ConfigError(f"denoiser weights file not found: {denoiser_spec.weights_path}")

    sol = _require_keys(rec.get("solver") or {}, dict(
        beta=1.2, max_iters=20, conv_tol=1e-4, cg_tol=1e-8, cg_max_iters=200,
        warm_start="fbp"), "reconstruction.solver")
    try:
        solver = PnpConfig(beta=float(sol["beta"]), max_iters=int(sol["max_iters"]),
                           conv_tol=float(sol["conv_tol"]), cg_tol=float(sol["cg_tol"]),
                           cg_max_iters=int(sol["cg_max_iters"]),
                           warm_start=str(sol["warm_start"]),
                           fbp_window=str(rec["fbp_window"]))
    except UsageError as exc:
        raise ConfigError(f"reconstruction.solver: {exc}") from exc

    met = _require_keys(raw.get("metrics", {}) or {}, dict(
        window_level_hu=30.0, window_width_hu=300.0, levels=256), "metrics")
    metrics = MetricsSettings(float(met["window_level_hu"]),
                              float(met["window_width_hu"]), int(met["levels"]))

    return PipelineConfig(
        geometry=geometry, phantom_kind=str(ph["kind"]), ma_list=ma_list,
        dose=dose, method=method, fbp_window=str(rec["fbp_window"]),
        denoiser_spec=denoiser_spec, solver=solver, metrics=metrics,
        output_dir=str(raw.get("output_dir", "out")),
        seed=int(raw.get("seed", 0)))


# --- manifest helpers ---------------------------------------------------------

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, files: list[Path]) -> Path:
    manifest = out_dir / "manifest.txt"
    lines = sorted(f"{_sha256(p)}  {p.relative_to(out_dir).as_posix()}" for p in files)
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _fresh_out_dir(path: str | Path) -> Path:
    out = Path(path)
    if (out / "manifest.txt").exists():
        raise OSError(f"output directory {out} already holds a completed run "
                      "(directories are append-only per run)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bundle_seed(base_seed: int, index: int) -> int:
    # fixed affine mix keeps bundles deterministic per (config seed, slot)
    return (base_seed * 1000003 + index) % (2 ** 62)


def _bundle_name(ma: float) -> str:
    return f"dose_mA{ma:g}"


# --- commands -----------------------------------------------------------------

def _simulate_bundle(cfg: PipelineConfig, phantom: ImageGrid, ma: float,
                     seed: int, bundle_dir: Path) -> list[Path]:
    bundle_dir.mkdir(parents=True, exist_ok=True)
    dose = cfg.dose.at_current(ma)
    realization = simulate_counts(cfg.geometry, phantom, dose, seed)
    sino = counts_to_sinogram(realization, dose)
    weights = statistical_weights(realization, dose)
    fbp = fbp_reconstruct(cfg.geometry, sino, cfg.fbp_window)

    files = []
    for name, values in [("counts", realization.counts), ("sino", sino.values),
                         ("weights", weights.values), ("fbp", fbp.values)]:
        path = bundle_dir / f"{name}.arr"
        write_array(path, values)
        files.append(path)
    meta = bundle_dir / "counts.meta"
    write_metadata(meta, {"seed": seed, "mA": ma,
                          "i0_ref": dose.photons_per_ray_at_reference,
                          "sd": dose.electronic_noise_sd,
                          "reference_ma": dose.reference_current_mA})
    files.append(meta)
    lo, hi = cfg.metrics.mu_window()
    png = bundle_dir / "fbp.png"
    write_png(png, fbp.values, lo, hi)
    files.append(png)
    return files


def cmd_simulate(cfg: PipelineConfig, out_dir: str | Path, jobs: int = 1) -> Path:
    """Write per-mA dose bundles plus the reference bundle and ground-truth
    proxies (phantom, noiseless sinogram and its FBP); returns the manifest."""
    out = _fresh_out_dir(out_dir)
    phantom = make_phantom(cfg.phantom_kind, cfg.geometry.image_n)
    files: list[Path] = []

    path = out / "phantom.arr"
    write_array(path, phantom.values)
    files.append(path)
    noiseless = forward_project(cfg.geometry, phantom)
    path = out / "noiseless_sino.arr"
    write_array(path, noiseless.values)
    files.append(path)
    path = out / "noiseless_fbp.arr"
    write_array(path, fbp_reconstruct(cfg.geometry, noiseless, cfg.fbp_window).values)
    files.append(path)

    tasks = [(cfg.dose.reference_current_mA, _bundle_seed(cfg.seed, 0), out / "reference")]
    for k, ma in enumerate(cfg.ma_list, start=1):
        tasks.append((ma, _bundle_seed(cfg.seed, k), out / _bundle_name(ma)))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_simulate_bundle, cfg, phantom, ma, seed, d)
                       for ma, seed, d in tasks]
            for fut in futures:
                files.extend(fut.result())
    else:
        for ma, seed, d in tasks:
            files.extend(_simulate_bundle(cfg, phantom, ma, seed, d))
    return write_manifest(out, files)


def _percentile_window(values: np.ndarray) -> tuple[float, float]:
    lo, hi = np.percentile(values, [1.0, 99.0])
    if not hi - lo > 1e-12:
        return 0.0, 1.0
    return float(lo), float(hi)


def _denoise_only(cfg: PipelineConfig, fbp: ImageGrid) -> ImageGrid:
    denoiser = make_denoiser(cfg.denoiser_spec)
    if cfg.denoiser_spec.kind in _NORMALIZED_DENOISERS:
        lo, hi = _percentile_window(fbp.values)
        scale = hi - lo
        normalized = fbp.like((fbp.values - lo) / scale)
        return fbp.like(lo + scale * denoiser(normalized).values)
    return denoiser(fbp)


def cmd_reconstruct(cfg: PipelineConfig, bundle_dir: str | Path,
                    out_dir: str | Path, method: str | None = None) -> Path:
    """Reconstruct one dose bundle with the configured (or given) method."""
    method = method or cfg.method
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    bundle = Path(bundle_dir)
    if not (bundle / "sino.arr").exists():
        raise ConfigError(f"bundle {bundle} has no sino.arr")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    sino = Sinogram(read_array(bundle / "sino.arr"))
    if method == "fbp":
        recon = fbp_reconstruct(cfg.geometry, sino, cfg.fbp_window)
    elif method == "denoise_only":
        recon = _denoise_only(cfg, fbp_reconstruct(cfg.geometry, sino, cfg.fbp_window))
    else:
        weights = StatWeights(read_array(bundle / "weights.arr"))
        denoiser = make_denoiser(cfg.denoiser_spec)
        recon, state = run_pnp(cfg.geometry, sino, weights, denoiser, cfg.solver)
        write_residuals_csv(state, out / f"residuals_{method}.csv")

    arr_path = out / f"recon_{method}.arr"
    write_array(arr_path, recon.values)
    lo, hi = cfg.metrics.mu_window()
    write_png(out / f"recon_{method}.png", recon.values, lo, hi)
    return arr_path


def cmd_evaluate(cfg: PipelineConfig, recon_dir: str | Path,
                 reference_path: str | Path, out_dir: str | Path) -> Path:
    """Compute GLCM features and EMD against the reference for every
    ``recon_*.arr`` in ``recon_dir``; FBP is the required baseline."""
    recon_dir = Path(recon_dir)
    recons = sorted(recon_dir.glob("recon_*.arr"))
    if not recons:
        raise ConfigError(f"no recon_*.arr files in {recon_dir}")
    methods = {p.stem[len("recon_"):]: p for p in recons}
    if "fbp" not in methods:
        raise UsageError("evaluation requires the baseline method 'fbp'")

    reference = ImageGrid(read_array(reference_path), cfg.geometry.pixel_mm)
    window = cfg.metrics.mu_window()
    levels = cfg.metrics.levels
    params = GlcmParams(levels=levels)
    ref_hist = intensity_histogram(reference, levels, window)

    evals: dict[str, MethodEval] = {}
    for name, path in methods.items():
        img = ImageGrid(read_array(path), cfg.geometry.pixel_mm)
        if img.side != reference.side:
            raise ConfigError(f"{path} shape differs from the reference image")
        feats = glcm_features(quantize_levels(img, levels, window), params)
        dist = emd(intensity_histogram(img, levels, window), ref_hist)
        evals[name] = MethodEval(feats, dist)

    report = relative_change_report(evals, baseline_name="fbp")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    report.to_csv(csv_path)
    (out / "report.txt").write_text(report.to_text())
    return csv_path


def cmd_full(cfg: PipelineConfig, out_dir: str | Path, jobs: int = 1) -> Path:
    """simulate + reconstruct (configured method plus the FBP baseline) +
    evaluate, for every dose bundle."""
    out = Path(out_dir)
    cmd_simulate(cfg, out, jobs=jobs)
    last_report = None
    for ma in cfg.ma_list:
        bundle = out / _bundle_name(ma)
        recon_dir = out / f"recon_mA{ma:g}"
        cmd_reconstruct(cfg, bundle, recon_dir, method="fbp")
        if cfg.method != "fbp":
            cmd_reconstruct(cfg, bundle, recon_dir, method=cfg.method)
        last_report = cmd_evaluate(cfg, recon_dir, out / "reference" / "fbp.arr",
                                   out / f"eval_mA{ma:g}")
    return last_report


# --- entry point ----------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnpmbir",
                                     description="fan-beam CT simulation and "
                                     "plug-and-play reconstruction pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="pipeline YAML file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--jobs", type=int, default=1, help="concurrent dose bundles")

    p_sim = sub.add_parser("simulate", help="write dose bundles and references")
    common(p_sim)

    p_rec = sub.add_parser("reconstruct", help="reconstruct one dose bundle")
    common(p_rec)
    p_rec.add_argument("--bundle", required=True, help="dose bundle directory")
    p_rec.add_argument("--method", default=None, choices=METHODS)
    p_rec.add_argument("--weights", default=None, help="override denoiser weights path")

    p_eval = sub.add_parser("evaluate", help="texture report for reconstructions")
    common(p_eval)
    p_eval.add_argument("--recon-dir", required=True)
    p_eval.add_argument("--reference", required=True, help="reference image .arr")

    p_full = sub.add_parser("full", help="simulate, reconstruct and evaluate")
    common(p_full)
    return parser


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "weights", None):
        if not Path(args.weights).exists():
            raise ConfigError(f"denoiser weights file not found: {args.weights}")
        cfg.denoiser_spec = DenoiserSpec(cfg.denoiser_spec.kind,
                                         cfg.denoiser_spec.strength, args.weights)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = args.out or cfg.output_dir
        if args.command == "simulate":
            manifest = cmd_simulate(cfg, out, jobs=args.jobs)
            print(f"wrote {manifest}")
        elif args.command == "reconstruct":
            path = cmd_reconstruct(cfg, args.bundle, out, method=args.method)
            print(f"wrote {path}")
        elif args.command == "evaluate":
            path = cmd_evaluate(cfg, args.recon_dir, args.reference, out)
            print(f"wrote {path}")
        else:
            path = cmd_full(cfg, out, jobs=args.jobs)
            print(f"wrote {path}")
        return 0
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    except (OSError, PnpMbirError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
