"""Desk-scale fan-beam CT toolkit: dose simulation, PnP-ADMM reconstruction,
pluggable denoisers and GLCM/EMD texture evaluation."""

from .types import ImageGrid, Sinogram, StatWeights, MU_WATER, hu_to_mu, mu_to_hu
from .geometry import (
    FanBeamGeometry,
    forward_project,
    back_project,
    ramp_filter,
    fbp_reconstruct,
    operator_norm,
)
from .dose import (
    DoseSettings,
    NoiseRealization,
    make_phantom,
    simulate_counts,
    counts_to_sinogram,
    statistical_weights,
)
from .denoise import (
    DenoiserSpec,
    DenoiserWeights,
    cnn_infer,
    denoise,
    load_weights,
    make_denoiser,
    serialize_weights,
)
from .solver import (
    PnpConfig,
    PnpState,
    convergence_metric,
    dual_update,
    run_pnp,
    v_update,
    x_update,
)
from .texture import (
    GlcmFeatures,
    GlcmParams,
    emd,
    glcm_features,
    glcm_matrix,
    quantize_levels,
    relative_change_report,
)

__all__ = [
    "ImageGrid", "Sinogram", "StatWeights", "MU_WATER", "hu_to_mu", "mu_to_hu",
    "FanBeamGeometry", "forward_project", "back_project", "ramp_filter",
    "fbp_reconstruct", "operator_norm",
    "DoseSettings", "NoiseRealization", "make_phantom", "simulate_counts",
    "counts_to_sinogram", "statistical_weights",
    "DenoiserSpec", "DenoiserWeights", "cnn_infer", "denoise", "load_weights",
    "make_denoiser", "serialize_weights",
    "PnpConfig", "PnpState", "convergence_metric", "dual_update", "run_pnp",
    "v_update", "x_update",
    "GlcmFeatures", "GlcmParams", "emd", "glcm_features", "glcm_matrix",
    "quantize_levels", "relative_change_report",
]
