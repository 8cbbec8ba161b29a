"""Denoiser plug-ins for the reconstruction loop.

All denoisers are callables ImageGrid -> ImageGrid expecting inputs in a
nominal [0, 1] range, shape preserving, and safe to call concurrently on
distinct images. The residual CNN runs in float32 with float64 storage and
loads its parameters from the PNPW container written by the trainer.

PNPW byte layout (little-endian): magic ``PNPW``, u32 version=1, u32 n_layers,
then per layer: u8 layer_type (1=Conv3x3, 2=ReLU, 3=Add-input-skip), u32
out_channels, u32 in_channels, and for Conv3x3 only: float32 weights in
[out][in][ky][kx] order followed by float32 bias[out].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, InputError, UsageError
from .types import ImageGrid

DENOISER_KINDS = ("identity", "gaussian", "tv_prox", "residual_cnn")

PNPW_MAGIC = b"PNPW"
PNPW_VERSION = 1
LAYER_CONV3X3 = 1
LAYER_RELU = 2
LAYER_ADD_INPUT_SKIP = 3
_LAYER_NAMES = {LAYER_CONV3X3: "conv3x3", LAYER_RELU: "relu",
                LAYER_ADD_INPUT_SKIP: "add_input_skip"}
_LAYER_CODES = {v: k for k, v in _LAYER_NAMES.items()}

TV_PROX_ITERS = 50


@dataclass(frozen=True)
class DenoiserSpec:
    """Declarative description of a denoiser; see :func:`make_denoiser`."""

    kind: str
    strength: float = 0.0
    weights_path: str | None = None

    def __post_init__(self):
        if self.kind not in DENOISER_KINDS:
            raise UsageError(f"unknown denoiser kind {self.kind!r}; "
                             f"expected one of {DENOISER_KINDS}")
        if self.strength < 0:
            raise UsageError("denoiser strength must be nonnegative")
        if self.kind == "residual_cnn" and not self.weights_path:
            raise UsageError("residual_cnn requires weights_path")


@dataclass
class CnnLayer:
    """One layer of the serialized network."""

    kind: str  # conv3x3 | relu | add_input_skip
    out_channels: int
    in_channels: int
    weights: np.ndarray | None = None  # float32 (out, in, 3, 3)
    bias: np.ndarray | None = None  # float32 (out,)


@dataclass
class DenoiserWeights:
    """Validated layer stack of the small residual CNN."""

    layers: list[CnnLayer] = field(default_factory=list)

    def __post_init__(self):
        validate_layers(self.layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def validate_layers(layers: list[CnnLayer]) -> None:
    """Check channel chaining, tensor shapes and finiteness."""
    if not layers:
        raise FormatError("network has no layers")
    channels = 1
    for idx, layer in enumerate(layers):
        if layer.kind == "conv3x3":
            if layer.in_channels != channels:
                raise FormatError(
                    f"layer {idx}: channel chain break, conv expects in_channels "
                    f"{layer.in_channels} but receives {channels}")
            w, b = layer.weights, layer.bias
            if w is None or b is None:
                raise FormatError(f"layer {idx}: conv3x3 missing parameters")
            if w.shape != (layer.out_channels, layer.in_channels, 3, 3):
                raise FormatError(f"layer {idx}: weight shape {w.shape} invalid")
            if b.shape != (layer.out_channels,):
                raise FormatError(f"layer {idx}: bias shape {b.shape} invalid")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise FormatError(f"layer {idx}: non-finite parameters")
            channels = layer.out_channels
        elif layer.kind in ("relu", "add_input_skip"):
            if layer.in_channels != channels or layer.out_channels != channels:
                raise FormatError(
                    f"layer {idx}: channel chain break, {layer.kind} declares "
                    f"{layer.in_channels}->{layer.out_channels} but receives {channels}")
            if layer.kind == "add_input_skip" and channels != 1:
                raise FormatError(
                    f"layer {idx}: add_input_skip requires 1 channel, got {channels}")
        else:
            raise FormatError(f"layer {idx}: unknown layer kind {layer.kind!r}")
    first = layers[0]
    if first.in_channels != 1:
        raise FormatError("first layer must take 1 input channel")
    if channels != 1:
        raise FormatError(f"network must end on 1 channel, ends on {channels}")


def serialize_weights(weights: DenoiserWeights, path: str | Path) -> None:
    """Write the PNPW container; validates before touching the file."""
    validate_layers(weights.layers)
    buf = bytearray()
    buf += PNPW_MAGIC
    buf += struct.pack("<I", PNPW_VERSION)
    buf += struct.pack("<I", weights.n_layers)
    for layer in weights.layers:
        buf += struct.pack("<BII", _LAYER_CODES[layer.kind],
                           layer.out_channels, layer.in_channels)
        if layer.kind == "conv3x3":
            buf += np.ascontiguousarray(layer.weights, dtype="<f4").tobytes()
            buf += np.ascontiguousarray(layer.bias, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_weights(path: str | Path) -> DenoiserWeights:
    """Parse and validate a PNPW file; errors carry the failing byte offset."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != PNPW_MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    pos = 4
    if len(data) < pos + 8:
        raise FormatError(f"{path}: truncated header", offset=pos)
    version, n_layers = struct.unpack_from("<II", data, pos)
    if version != PNPW_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=pos)
    pos += 8
    layers: list[CnnLayer] = []
    for idx in range(n_layers):
        if len(data) < pos + 9:
            raise FormatError(f"{path}: truncated at layer {idx} header", offset=pos)
        code, out_ch, in_ch = struct.unpack_from("<BII", data, pos)
        pos += 9
        if code not in _LAYER_NAMES:
            raise FormatError(f"{path}: layer {idx} has unknown type {code}", offset=pos - 9)
        kind = _LAYER_NAMES[code]
        weights = bias = None
        if kind == "conv3x3":
            if out_ch == 0 or in_ch == 0:
                raise FormatError(f"{path}: layer {idx} has zero channels", offset=pos - 8)
            n_w = out_ch * in_ch * 9
            need = (n_w + out_ch) * 4
            if len(data) < pos + need:
                raise FormatError(
                    f"{path}: truncated inside layer {idx} parameters", offset=pos)
            weights = np.frombuffer(data, dtype="<f4", count=n_w, offset=pos)
            weights = weights.reshape(out_ch, in_ch, 3, 3).copy()
            pos += n_w * 4
            bias = np.frombuffer(data, dtype="<f4", count=out_ch, offset=pos).copy()
            pos += out_ch * 4
            if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
                raise FormatError(f"{path}: layer {idx} has non-finite parameters",
                                  offset=pos - need)
        layers.append(CnnLayer(kind, out_ch, in_ch, weights, bias))
    if len(data) != pos:
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes", offset=pos)
    return DenoiserWeights(layers)


def _conv3x3_reflect(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """(C_in, H, W) float32 -> (C_out, H, W) float32, reflect padding."""
    h, w = x.shape[1], x.shape[2]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    taps = np.empty((x.shape[0], 9, h, w), dtype=np.float32)
    for ky in range(3):
        for kx in range(3):
            taps[:, ky * 3 + kx] = xp[:, ky:ky + h, kx:kx + w]
    out = np.einsum("oik,ikhw->ohw", weights.reshape(weights.shape[0], -1, 9),
                    taps, optimize=True)
    return out + bias[:, None, None]


def cnn_infer(weights: DenoiserWeights, img: ImageGrid) -> ImageGrid:
    """Run the residual network: sequential layers, then the input skip.

    Network arithmetic is float32; the residual skip adds the predicted
    residual to the original float64 input, so an all-zero network returns the
    input bit-exactly. If the layer list has no explicit add_input_skip the
    residual add happens implicitly at the end; explicit skip layers (the
    exporter always writes one) consume that add instead.
    """
    explicit_skip = any(layer.kind == "add_input_skip" for layer in weights.layers)
    x = img.values.astype(np.float32)[None, :, :]
    for layer in weights.layers:
        if layer.kind == "conv3x3":
            x = _conv3x3_reflect(np.asarray(x, dtype=np.float32),
                                 layer.weights.astype(np.float32),
                                 layer.bias.astype(np.float32))
        elif layer.kind == "relu":
            x = np.maximum(x, np.float32(0.0))
        else:  # add_input_skip: float64 add of the original input
            x = img.values[None, :, :] + np.asarray(x, dtype=np.float64)
    if not explicit_skip:
        x = img.values[None, :, :] + np.asarray(x, dtype=np.float64)
    return img.like(np.asarray(x[0], dtype=np.float64))


# --- classical denoisers ------------------------------------------------------

class IdentityDenoiser:
    """Returns its input unchanged."""

    def __call__(self, img: ImageGrid) -> ImageGrid:
        return img.like(img.values.copy())


class GaussianDenoiser:
    """Separable Gaussian blur with reflect padding; sigma in pixels."""

    def __init__(self, sigma: float):
        if sigma < 0:
            raise UsageError("gaussian sigma must be nonnegative")
        self.sigma = sigma

    def __call__(self, img: ImageGrid) -> ImageGrid:
        if self.sigma == 0.0:
            return img.like(img.values.copy())
        return img.like(gaussian_filter(img.values, self.sigma, mode="reflect"))


def _tv_grad(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _tv_div(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    out = np.zeros_like(px)
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    return out


def tv_prox(values: np.ndarray, strength: float, n_iters: int = TV_PROX_ITERS) -> np.ndarray:
    """Proximal operator of ``strength * TV`` via Chambolle's dual iteration.

    Runs a fixed number of semi-implicit projected gradient steps on the dual
    field with the standard step 1/4; exact for constants at any iteration
    count. ``_tv_div`` is the adjoint of the forward-difference gradient, so
    the dual objective is ``0.5 * ||div p - values/strength||^2`` over
    pointwise-bounded fields.
    """
    if strength == 0.0:
        return values.copy()
    tau = 0.25
    px = np.zeros_like(values)
    py = np.zeros_like(values)
    for _ in range(n_iters):
        gx, gy = _tv_grad(_tv_div(px, py) - values / strength)
        denom = 1.0 + tau * np.sqrt(gx ** 2 + gy ** 2)
        px = (px - tau * gx) / denom
        py = (py - tau * gy) / denom
    return values - strength * _tv_div(px, py)


def total_variation(values: np.ndarray) -> float:
    """Isotropic TV with the same discretization the prox uses."""
    gx, gy = _tv_grad(values)
    return float(np.sum(np.sqrt(gx ** 2 + gy ** 2)))


class TvProxDenoiser:
    """Proximal operator of strength * TV (isotropic, Chambolle dual ascent)."""

    def __init__(self, strength: float, n_iters: int = TV_PROX_ITERS):
        if strength < 0:
            raise UsageError("tv strength must be nonnegative")
        self.strength = strength
        self.n_iters = n_iters

    def __call__(self, img: ImageGrid) -> ImageGrid:
        return img.like(tv_prox(img.values, self.strength, self.n_iters))


class ResidualCnnDenoiser:
    """Applies the loaded residual CNN; immutable after construction."""

    def __init__(self, weights: DenoiserWeights):
        self.weights = weights

    def __call__(self, img: ImageGrid) -> ImageGrid:
        return cnn_infer(self.weights, img)


def make_denoiser(spec: DenoiserSpec):
    """Instantiate the denoiser callable described by ``spec``."""
    if spec.kind == "identity":
        return IdentityDenoiser()
    if spec.kind == "gaussian":
        return GaussianDenoiser(spec.strength)
    if spec.kind == "tv_prox":
        return TvProxDenoiser(spec.strength)
    return ResidualCnnDenoiser(load_weights(spec.weights_path))


def denoise(denoiser, img: ImageGrid) -> ImageGrid:
    """Apply a denoiser callable to ``img`` after checking finiteness."""
    if not np.all(np.isfinite(img.values)):
        raise InputError("denoiser input contains non-finite values")
    return denoiser(img)
