"""Phantom generation and dose-dependent noisy acquisition simulation.

The photon model per ray is ``Poisson(I0 * exp(-line_integral)) +
Normal(0, electronic_noise_sd^2)`` clamped at zero, with the incident flux
``I0`` scaled linearly with tube current. Counts below one are treated as
photon-starved: the log transform floors them and the statistical weight of
the ray is zeroed so the data term ignores it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .geometry import FanBeamGeometry, forward_project_values
from .types import MU_WATER, ImageGrid, Sinogram, StatWeights

PHANTOM_KINDS = ("shepp_logan", "disk_grid", "soft_tissue_slab")

# count floor for the log transform; rays at or below it carry zero weight
COUNT_FLOOR = 1.0


@dataclass(frozen=True)
class DoseSettings:
    """Tube-current operating point and detector noise model."""

    tube_current_mA: float = 40.0
    reference_current_mA: float = 800.0
    photons_per_ray_at_reference: float = 1e5
    electronic_noise_sd: float = 5.0

    def __post_init__(self):
        if self.tube_current_mA <= 0 or self.reference_current_mA <= 0:
            raise UsageError("tube currents must be positive")
        if self.photons_per_ray_at_reference <= 0:
            raise UsageError("photons_per_ray_at_reference must be positive")
        if self.electronic_noise_sd < 0:
            raise UsageError("electronic_noise_sd must be nonnegative")

    @property
    def incident_photons(self) -> float:
        """I0 at this tube current."""
        return self.photons_per_ray_at_reference * (
            self.tube_current_mA / self.reference_current_mA)

    def at_current(self, tube_current_mA: float) -> "DoseSettings":
        return DoseSettings(tube_current_mA, self.reference_current_mA,
                            self.photons_per_ray_at_reference, self.electronic_noise_sd)


@dataclass
class NoiseRealization:
    """One simulated acquisition: per-ray detected counts plus its seed."""

    counts: np.ndarray
    seed: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if np.any(self.counts < 0):
            raise UsageError("counts must be nonnegative")

    @property
    def starved(self) -> np.ndarray:
        """Boolean mask of photon-starved rays (counts below the floor)."""
        return self.counts < COUNT_FLOOR


# --- phantoms ---------------------------------------------------------------

# (added value, a, b, x0, y0, angle deg) in the unit circle, Toft's modified set
_SHEPP_LOGAN = [
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6050, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
]


def _unit_grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    c = (side - 1) / 2.0
    u = (np.arange(side) - c) / (side / 2.0)
    return np.meshgrid(u, u)


def _shepp_logan(side: int) -> np.ndarray:
    X, Y = _unit_grid(side)
    img = np.zeros((side, side))
    for val, a, b, x0, y0, deg in _SHEPP_LOGAN:
        phi = np.deg2rad(deg)
        xr = (X - x0) * np.cos(phi) + (Y - y0) * np.sin(phi)
        yr = -(X - x0) * np.sin(phi) + (Y - y0) * np.cos(phi)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    # map [0,1] tissue scale to attenuation with bone at twice water
    return np.clip(img, 0.0, None) * (2.0 * MU_WATER)


def _disk_grid(side: int) -> np.ndarray:
    img = np.zeros((side, side))
    c = (side - 1) / 2.0
    radius = max(side // 12, 2)
    mus = np.linspace(0.008, 0.040, 9)
    rows = np.arange(side)
    R, C = np.meshgrid(rows, rows, indexing="ij")
    k = 0
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            # disk centers on exact pixel centers so the center value is exact
            rc = int(round(c + dr * side / 4.0))
            cc = int(round(c + dc * side / 4.0))
            mask = (R - rc) ** 2 + (C - cc) ** 2 <= radius ** 2
            img[mask] = mus[k]
            k += 1
    return img


def _soft_tissue_slab(side: int) -> np.ndarray:
    X, Y = _unit_grid(side)
    img = np.zeros((side, side))
    body = (X / 0.9) ** 2 + (Y / 0.7) ** 2 <= 1.0
    img[body] = MU_WATER
    # low-contrast inserts spanning the soft-tissue HU band
    for hu, (x0, y0, r) in [(-80.0, (-0.4, 0.2, 0.18)), (60.0, (0.35, 0.25, 0.15)),
                            (150.0, (0.0, -0.3, 0.20)), (-40.0, (0.45, -0.25, 0.12))]:
        mask = (X - x0) ** 2 + (Y - y0) ** 2 <= r ** 2
        img[mask] = MU_WATER * (1.0 + hu / 1000.0)
    # deterministic fine mottle inside the body, +-8 HU
    mottle = 0.008 * MU_WATER * np.sin(37.0 * X) * np.cos(41.0 * Y)
    img[body] += mottle[body]
    return img


def make_phantom(kind: str, side: int) -> ImageGrid:
    """Deterministic attenuation phantom (1/mm), one of :data:`PHANTOM_KINDS`."""
    if side < 16:
        raise UsageError(f"phantom side must be >= 16, got {side}")
    if kind == "shepp_logan":
        values = _shepp_logan(side)
    elif kind == "disk_grid":
        values = _disk_grid(side)
    elif kind == "soft_tissue_slab":
        values = _soft_tissue_slab(side)
    else:
        raise UsageError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    return ImageGrid(values, 1.0)


# --- acquisition simulation --------------------------------------------------

def simulate_counts(geom: FanBeamGeometry, phantom: ImageGrid, dose: DoseSettings,
                    seed: int) -> NoiseRealization:
    """Simulate detected counts for one scan.

    Counter-based Philox streams keyed by (seed, view) make every view row
    independently reproducible, so views can be generated in parallel without
    changing results.
    """
    line_integrals = forward_project_values(geom, phantom.values)
    expected = dose.incident_photons * np.exp(-line_integrals)
    counts = np.empty_like(expected)
    for v in range(geom.n_views):
        key = (np.uint64(seed) << np.uint64(16)) + np.uint64(v)
        rng = np.random.Generator(np.random.Philox(key=key))
        row = rng.poisson(expected[v]).astype(np.float64)
        if dose.electronic_noise_sd > 0:
            row += rng.normal(0.0, dose.electronic_noise_sd, size=row.shape)
        counts[v] = row
    np.maximum(counts, 0.0, out=counts)
    return NoiseRealization(counts, seed)


def counts_to_sinogram(realization: NoiseRealization, dose: DoseSettings) -> Sinogram:
    """Log transform of the counts: ``y_i = -ln(max(c_i, 1) / I0)``.

    The count floor keeps starved rays finite; their value is ``ln(I0)`` and
    :func:`statistical_weights` assigns them zero weight.
    """
    floored = np.maximum(realization.counts, COUNT_FLOOR)
    return Sinogram(-np.log(floored / dose.incident_photons))


def statistical_weights(realization: NoiseRealization, dose: DoseSettings) -> StatWeights:
    """Per-ray precisions of the post-log data, normalized to max 1.

    Delta method: var(-ln(c/I0)) with c ~ Poisson(mu) + N(0, sd^2) is
    (mu + sd^2) / mu^2, so the precision is c^2 / (c + sd^2) with the observed
    count plugged in for mu. Starved rays get exactly zero.
    """
    c = realization.counts
    sd2 = dose.electronic_noise_sd ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(c >= COUNT_FLOOR, c * c / (c + sd2), 0.0)
    peak = w.max()
    if peak > 0:
        w = w / peak
    return StatWeights(w)
