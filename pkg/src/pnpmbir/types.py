"""Core array-carrying types: image grids and sinograms.

Images hold linear attenuation in 1/mm on a square pixel grid; sinograms hold
dimensionless line integrals indexed by (view, detector).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError

# Linear attenuation of water at the reference spectrum, 1/mm.
MU_WATER = 0.0206


def mu_to_hu(mu: np.ndarray | float) -> np.ndarray | float:
    """Convert linear attenuation (1/mm) to Hounsfield units."""
    return 1000.0 * (mu - MU_WATER) / MU_WATER


def hu_to_mu(hu: np.ndarray | float) -> np.ndarray | float:
    """Convert Hounsfield units to linear attenuation (1/mm)."""
    return MU_WATER * (1.0 + hu / 1000.0)


@dataclass
class ImageGrid:
    """Square image of linear attenuation values.

    ``values`` is a ``side x side`` float64 array; ``pixel_mm`` is the pixel
    pitch. The grid is centered on the isocenter: pixel (r, c) has its center
    at ``x = (c - (side-1)/2) * pixel_mm``, ``y = (r - (side-1)/2) * pixel_mm``
    with the row index increasing along +y.
    """

    values: np.ndarray
    pixel_mm: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise DimensionError(f"image values must be square 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("image contains non-finite values")
        if self.pixel_mm <= 0:
            raise InputError("pixel_mm must be positive")

    @property
    def side(self) -> int:
        return self.values.shape[0]

    def to_hu(self) -> np.ndarray:
        """View of the image in Hounsfield units (water = 0 HU)."""
        return mu_to_hu(self.values)

    def like(self, values: np.ndarray) -> "ImageGrid":
        """New grid with the same pitch holding ``values``."""
        return ImageGrid(values, self.pixel_mm)


@dataclass
class Sinogram:
    """Projection-domain array of line integrals, shape (n_views, n_detectors)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"sinogram values must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("sinogram contains non-finite values")

    @property
    def n_views(self) -> int:
        return self.values.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.values.shape[1]


@dataclass
class StatWeights:
    """Diagonal of the statistical precision matrix W, one entry per ray."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"weights must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("weights contain non-finite values")
        if np.any(self.values < 0):
            raise InputError("weights must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape
