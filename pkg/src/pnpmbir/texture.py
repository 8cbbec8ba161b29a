"""Texture evaluation: GLCM features, histogram EMD and change reports.

The co-occurrence pipeline is quantize -> per-angle symmetric GLCM -> Haralick
features averaged over the four standard angles. The histogram distance is the
1-D Wasserstein-1 metric on the normalized intensity axis.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, UsageError
from .types import ImageGrid, hu_to_mu

GLCM_ANGLES = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)

# (row, col) steps for distance 1 at each supported angle
_ANGLE_OFFSETS = {
    0.0: (0, 1),
    np.pi / 4: (-1, 1),
    np.pi / 2: (-1, 0),
    3 * np.pi / 4: (-1, -1),
}

# display/metric window convention: WL 30 HU, WW 300 HU
DEFAULT_WINDOW_LEVEL_HU = 30.0
DEFAULT_WINDOW_WIDTH_HU = 300.0

FEATURE_NAMES = ("contrast", "entropy", "energy", "homogeneity", "correlation",
                 "dissimilarity", "asm")

# features where a reduction versus baseline reads as an improvement
LOWER_IS_BETTER = ("contrast", "dissimilarity", "entropy")


def default_mu_window() -> tuple[float, float]:
    """The [WL - WW/2, WL + WW/2] display window mapped to attenuation."""
    lo = hu_to_mu(DEFAULT_WINDOW_LEVEL_HU - DEFAULT_WINDOW_WIDTH_HU / 2.0)
    hi = hu_to_mu(DEFAULT_WINDOW_LEVEL_HU + DEFAULT_WINDOW_WIDTH_HU / 2.0)
    return float(lo), float(hi)


@dataclass(frozen=True)
class GlcmParams:
    distance: int = 1
    angles: tuple[float, ...] = GLCM_ANGLES
    levels: int = 256

    def __post_init__(self):
        if self.distance < 1:
            raise UsageError("distance must be >= 1")
        if self.levels < 2:
            raise UsageError("levels must be >= 2")
        for a in self.angles:
            if a not in _ANGLE_OFFSETS:
                raise UsageError(f"unsupported GLCM angle {a}")


@dataclass
class GlcmFeatures:
    """Haralick feature set averaged over the configured angles."""

    contrast: float
    entropy: float
    energy: float
    homogeneity: float
    correlation: float
    dissimilarity: float
    asm: float

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in FEATURE_NAMES}


def quantize_levels(img: ImageGrid, levels: int = 256,
                    window: tuple[float, float] | None = None) -> np.ndarray:
    """Linear binning of clamped values into ``[0, levels-1]``.

    The top edge is inclusive: a value equal to ``hi`` maps to ``levels-1``.
    """
    if window is None:
        window = default_mu_window()
    lo, hi = window
    if not hi > lo:
        raise UsageError(f"degenerate quantization window ({lo}, {hi})")
    scaled = (np.clip(img.values, lo, hi) - lo) / (hi - lo)
    q = np.floor(scaled * levels).astype(np.int64)
    return np.minimum(q, levels - 1)


def glcm_matrix(qimg: np.ndarray, distance: int = 1, angle: float = 0.0,
                levels: int = 256) -> np.ndarray:
    """Symmetric, sum-normalized co-occurrence matrix for one offset.

    Pairs are counted in both directions; pixel pairs whose partner falls
    outside the image are skipped (no wraparound).
    """
    qimg = np.asarray(qimg)
    if qimg.min() < 0 or qimg.max() >= levels:
        raise InputError(f"quantized values outside [0, {levels})")
    if angle not in _ANGLE_OFFSETS:
        raise UsageError(f"unsupported GLCM angle {angle}")
    dr, dc = _ANGLE_OFFSETS[angle]
    dr, dc = dr * distance, dc * distance
    h, w = qimg.shape

    src_r = slice(max(0, -dr), min(h, h - dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_r = slice(max(0, dr), min(h, h + dr))
    dst_c = slice(max(0, dc), min(w, w + dc))
    a = qimg[src_r, src_c].ravel()
    b = qimg[dst_r, dst_c].ravel()
    if a.size == 0:
        raise UsageError("image too small for the requested offset")

    counts = np.bincount(a * levels + b, minlength=levels * levels)
    p = counts.reshape(levels, levels).astype(np.float64)
    p = p + p.T  # count both directions
    return p / p.sum()


def _features_one_angle(p: np.ndarray) -> dict[str, float]:
    levels = p.shape[0]
    i = np.arange(levels, dtype=np.float64)
    diff = i[:, None] - i[None, :]
    contrast = float(np.sum(p * diff ** 2))
    dissimilarity = float(np.sum(p * np.abs(diff)))
    homogeneity = float(np.sum(p / (1.0 + diff ** 2)))
    asm = float(np.sum(p ** 2))
    nz = p > 0
    entropy = float(-np.sum(p[nz] * np.log(p[nz])))
    pi = p.sum(axis=1)
    mu_i = float(np.sum(i * pi))
    var_i = float(np.sum((i - mu_i) ** 2 * pi))
    pj = p.sum(axis=0)
    mu_j = float(np.sum(i * pj))
    var_j = float(np.sum((i - mu_j) ** 2 * pj))
    if var_i <= 0 or var_j <= 0:
        # a constant image is perfectly (degenerately) correlated
        correlation = 1.0
    else:
        cov = float(np.sum(p * (i[:, None] - mu_i) * (i[None, :] - mu_j)))
        correlation = cov / np.sqrt(var_i * var_j)
    return dict(contrast=contrast, dissimilarity=dissimilarity,
                homogeneity=homogeneity, asm=asm, entropy=entropy,
                correlation=correlation)


def glcm_features(qimg: np.ndarray, params: GlcmParams = GlcmParams()) -> GlcmFeatures:
    """Angle-averaged Haralick features of a quantized image.

    ASM is averaged over angles and energy is defined as sqrt of that average,
    preserving ``energy**2 == asm`` exactly.
    """
    acc: dict[str, float] = {}
    for angle in params.angles:
        p = glcm_matrix(qimg, params.distance, angle, params.levels)
        feats = _features_one_angle(p)
        for k, val in feats.items():
            acc[k] = acc.get(k, 0.0) + val
    n = len(params.angles)
    mean = {k: val / n for k, val in acc.items()}
    return GlcmFeatures(contrast=mean["contrast"], entropy=mean["entropy"],
                        energy=float(np.sqrt(mean["asm"])),
                        homogeneity=mean["homogeneity"],
                        correlation=mean["correlation"],
                        dissimilarity=mean["dissimilarity"], asm=mean["asm"])


def intensity_histogram(img: ImageGrid, bins: int = 256,
                        window: tuple[float, float] | None = None) -> np.ndarray:
    """Normalized histogram of the windowed image on ``bins`` levels."""
    q = quantize_levels(img, bins, window)
    h = np.bincount(q.ravel(), minlength=bins).astype(np.float64)
    return h / h.sum()


def emd(hist_a: np.ndarray, hist_b: np.ndarray) -> float:
    """Wasserstein-1 distance between two histograms on [0, 1].

    ``sum_k |CDF_a(k) - CDF_b(k)| * bin_width`` with ``bin_width = 1/bins``;
    histograms are normalized internally if they do not sum to one.
    """
    a = np.asarray(hist_a, dtype=np.float64)
    b = np.asarray(hist_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("histograms must be 1-D with equal length")
    if np.any(a < 0) or np.any(b < 0):
        raise InputError("histograms must be nonnegative")
    if a.sum() <= 0 or b.sum() <= 0:
        raise InputError("histograms must carry positive mass")
    a = a / a.sum()
    b = b / b.sum()
    return float(np.sum(np.abs(np.cumsum(a - b))) / a.size)


@dataclass
class MethodEval:
    """Per-method evaluation payload for the change report."""

    features: GlcmFeatures
    emd_to_reference: float


@dataclass
class ChangeReport:
    """Relative-change table of texture features versus a baseline method.

    Percentages are the plain relative change ``100*(f - f_base)/|f_base|``;
    published improvement figures sometimes use other normalizations, which
    are deliberately not applied here. The text rendering flips the sign for
    contrast/dissimilarity/entropy so reductions read as positive improvement.
    """

    baseline_name: str
    rows: list[dict[str, object]]

    def to_csv(self, path: str | Path) -> None:
        cols = ["method"] + list(FEATURE_NAMES) + ["emd"] + \
            [f"{n}_pct_change" for n in FEATURE_NAMES]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                out = {}
                for col in cols:
                    val = row[col]
                    out[col] = "undefined" if val is None else f"{val:.6g}" \
                        if isinstance(val, float) else val
                writer.writerow(out)

    def to_text(self) -> str:
        buf = io.StringIO()
        header = f"{'method':<16}" + "".join(f"{n:>14}" for n in FEATURE_NAMES) + f"{'emd':>12}"
        buf.write(header + "\n")
        for row in self.rows:
            buf.write(f"{row['method']:<16}"
                      + "".join(f"{row[n]:>14.5g}" for n in FEATURE_NAMES)
                      + f"{row['emd']:>12.5g}\n")
            cells = []
            for n in FEATURE_NAMES:
                pct = row[f"{n}_pct_change"]
                if pct is None:
                    cells.append(f"{'undefined':>14}")
                elif n in LOWER_IS_BETTER:
                    cells.append(f"{-pct:>+13.1f}%")
                else:
                    cells.append(f"{pct:>+13.1f}%")
            buf.write(f"{'  improvement':<16}" + "".join(cells) + "\n")
        buf.write("\nimprovement rows show -pct_change for contrast/dissimilarity/"
                  "entropy (reductions count as gains) and +pct_change otherwise;\n"
                  "pct_change itself is always 100*(method-baseline)/|baseline|.\n")
        return buf.getvalue()


def relative_change_report(method_evals: dict[str, MethodEval],
                           baseline_name: str = "fbp") -> ChangeReport:
    """Build the per-method feature/EMD table relative to ``baseline_name``."""
    if baseline_name not in method_evals:
        raise UsageError(f"baseline method {baseline_name!r} missing from evaluations")
    base = method_evals[baseline_name].features.as_dict()
    rows = []
    for name, ev in method_evals.items():
        row: dict[str, object] = {"method": name}
        feats = ev.features.as_dict()
        row.update(feats)
        row["emd"] = ev.emd_to_reference
        for fname in FEATURE_NAMES:
            b = base[fname]
            if b == 0:
                row[f"{fname}_pct_change"] = None
            else:
                row[f"{fname}_pct_change"] = 100.0 * (feats[fname] - b) / abs(b)
        rows.append(row)
    return ChangeReport(baseline_name, rows)
