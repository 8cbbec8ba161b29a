import numpy as np
import pytest

from pnpmbir import ImageGrid
from pnpmbir.denoise import (
    CnnLayer,
    DenoiserSpec,
    DenoiserWeights,
    GaussianDenoiser,
    IdentityDenoiser,
    TvProxDenoiser,
    cnn_infer,
    denoise,
    load_weights,
    make_denoiser,
    serialize_weights,
    total_variation,
)
from pnpmbir.errors import FormatError, InputError, UsageError


def gaussian_blur_oracle(values, sigma, truncate=4.0):
    # direct separable convolution with the same kernel construction scipy
    # uses; scipy.ndimage "reflect" duplicates the edge sample, which is
    # numpy's "symmetric"
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(values, radius, mode="symmetric")
    tmp = np.empty((values.shape[0], padded.shape[1]))
    for r in range(values.shape[0]):
        tmp[r] = np.convolve(padded[r + radius], k, mode="same")[...]
    tmp = tmp[:, radius:-radius] if radius else tmp
    out = np.empty_like(values)
    repad = np.pad(tmp, ((radius, radius), (0, 0)), mode="symmetric")
    for c in range(values.shape[1]):
        out[:, c] = np.convolve(repad[:, c], k, mode="same")[radius:-radius]
    return out


def conv_layer(rng, out_ch, in_ch, scale=0.1):
    w = (rng.normal(size=(out_ch, in_ch, 3, 3)) * scale).astype(np.float32)
    b = (rng.normal(size=out_ch) * scale).astype(np.float32)
    return CnnLayer("conv3x3", out_ch, in_ch, w, b)


def cnn_oracle(weights, values):
    # naive float64 nested-loop evaluation of the same network
    x0 = values[None, :, :].astype(np.float64)
    x = x0
    explicit_skip = any(l.kind == "add_input_skip" for l in weights.layers)
    for layer in weights.layers:
        if layer.kind == "relu":
            x = np.maximum(x, 0.0)
        elif layer.kind == "add_input_skip":
            x = x + x0
        else:
            h, w = x.shape[1], x.shape[2]
            xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
            out = np.zeros((layer.out_channels, h, w))
            for o in range(layer.out_channels):
                for i in range(layer.in_channels):
                    for ky in range(3):
                        for kx in range(3):
                            out[o] += float(layer.weights[o, i, ky, kx]) * \
                                xp[i, ky:ky + h, kx:kx + w]
                out[o] += float(layer.bias[o])
            x = out
    if not explicit_skip:
        x = x + x0
    return x[0]


class TestClassicalDenoisers:
    def test_identity_bit_exact(self):
        img = ImageGrid(np.random.default_rng(0).normal(size=(16, 16)))
        out = denoise(IdentityDenoiser(), img)
        assert np.array_equal(out.values, img.values)
        assert out.values is not img.values

    def test_gaussian_sigma_zero_bit_exact(self):
        img = ImageGrid(np.random.default_rng(1).normal(size=(16, 16)))
        out = GaussianDenoiser(0.0)(img)
        assert np.array_equal(out.values, img.values)

    def test_gaussian_impulse_matches_separable_oracle(self):
        values = np.zeros((33, 33))
        values[16, 16] = 1.0
        out = GaussianDenoiser(1.0)(ImageGrid(values)).values
        oracle = gaussian_blur_oracle(values, 1.0)
        assert np.max(np.abs(out - oracle)) < 1e-10

    def test_gaussian_random_matches_oracle(self):
        values = np.random.default_rng(2).normal(size=(24, 24))
        out = GaussianDenoiser(1.7)(ImageGrid(values)).values
        oracle = gaussian_blur_oracle(values, 1.7)
        assert np.max(np.abs(out - oracle)) < 1e-10

    @pytest.mark.parametrize("denoiser", [GaussianDenoiser(1.5), TvProxDenoiser(0.2)])
    def test_constant_shift_commutes(self, denoiser):
        rng = np.random.default_rng(3)
        values = rng.normal(size=(20, 20))
        base = denoiser(ImageGrid(values)).values
        shifted = denoiser(ImageGrid(values + 5.0)).values
        assert np.max(np.abs(shifted - (base + 5.0))) < 1e-8

    def test_tv_prox_fixes_constants(self):
        img = ImageGrid(np.full((12, 12), 0.37))
        out = TvProxDenoiser(0.5)(img)
        np.testing.assert_allclose(out.values, img.values, atol=1e-14)

    def test_tv_prox_never_increases_tv(self):
        rng = np.random.default_rng(4)
        for strength in (0.05, 0.2, 1.0):
            values = rng.normal(size=(16, 16))
            out = TvProxDenoiser(strength)(ImageGrid(values)).values
            assert total_variation(out) <= total_variation(values) + 1e-12

    def test_tv_prox_reduces_noise_around_smooth_signal(self):
        rng = np.random.default_rng(5)
        clean = np.outer(np.linspace(0, 1, 32), np.ones(32))
        noisy = clean + 0.1 * rng.normal(size=clean.shape)
        out = TvProxDenoiser(0.1)(ImageGrid(noisy)).values
        assert np.mean((out - clean) ** 2) < np.mean((noisy - clean) ** 2)

    def test_non_finite_input_rejected(self):
        img = ImageGrid(np.zeros((8, 8)))
        img.values[0, 0] = np.nan  # bypass the constructor check
        with pytest.raises(InputError):
            denoise(IdentityDenoiser(), img)

    def test_spec_validation(self):
        with pytest.raises(UsageError):
            DenoiserSpec("blur")
        with pytest.raises(UsageError):
            DenoiserSpec("gaussian", strength=-1.0)
        with pytest.raises(UsageError):
            DenoiserSpec("residual_cnn")


class TestCnnInfer:
    def test_zero_weights_acts_as_identity(self):
        layers = [CnnLayer("conv3x3", 4, 1, np.zeros((4, 1, 3, 3), np.float32),
                           np.zeros(4, np.float32)),
                  CnnLayer("relu", 4, 4),
                  CnnLayer("conv3x3", 1, 4, np.zeros((1, 4, 3, 3), np.float32),
                           np.zeros(1, np.float32)),
                  CnnLayer("add_input_skip", 1, 1)]
        weights = DenoiserWeights(layers)
        img = ImageGrid(np.random.default_rng(6).normal(size=(12, 12)))
        out = cnn_infer(weights, img)
        assert np.array_equal(out.values, img.values)

    def test_identity_impulse_kernel_doubles_input(self):
        w = np.zeros((1, 1, 3, 3), np.float32)
        w[0, 0, 1, 1] = 1.0
        weights = DenoiserWeights([CnnLayer("conv3x3", 1, 1, w, np.zeros(1, np.float32))])
        img = ImageGrid(np.random.default_rng(7).normal(size=(10, 10)))
        out = cnn_infer(weights, img)
        np.testing.assert_allclose(out.values, 2.0 * img.values, rtol=1e-6)

    def test_random_network_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(8)
        layers = [conv_layer(rng, 6, 1), CnnLayer("relu", 6, 6),
                  conv_layer(rng, 6, 6), CnnLayer("relu", 6, 6),
                  conv_layer(rng, 1, 6), CnnLayer("add_input_skip", 1, 1)]
        weights = DenoiserWeights(layers)
        values = rng.normal(size=(8, 8))
        out = cnn_infer(weights, ImageGrid(values)).values
        oracle = cnn_oracle(weights, values)
        scale = np.max(np.abs(oracle)) + 1e-12
        assert np.max(np.abs(out - oracle)) / scale < 1e-5

    def test_layer_configurations_match_oracle(self):
        # sweep depth and width combinations against the float64 oracle
        rng = np.random.default_rng(9)
        for depth in (1, 2, 3, 4):
            for width in (1, 2, 4, 8):
                layers = [conv_layer(rng, width, 1)]
                for _ in range(depth - 1):
                    layers.append(CnnLayer("relu", width, width))
                    layers.append(conv_layer(rng, width, width))
                layers.append(conv_layer(rng, 1, width))
                weights = DenoiserWeights(layers)
                values = rng.normal(size=(16, 16))
                out = cnn_infer(weights, ImageGrid(values)).values
                oracle = cnn_oracle(weights, values)
                scale = np.max(np.abs(oracle)) + 1e-12
                assert np.max(np.abs(out - oracle)) / scale < 1e-5


class TestPnpwFormat:
    def make_weights(self, rng):
        return DenoiserWeights([conv_layer(rng, 3, 1), CnnLayer("relu", 3, 3),
                                conv_layer(rng, 1, 3), CnnLayer("add_input_skip", 1, 1)])

    def test_round_trip_bit_exact(self, tmp_path):
        weights = self.make_weights(np.random.default_rng(10))
        path = tmp_path / "w.pnpw"
        serialize_weights(weights, path)
        loaded = load_weights(path)
        assert loaded.n_layers == weights.n_layers
        for a, b in zip(loaded.layers, weights.layers):
            assert a.kind == b.kind
            assert (a.out_channels, a.in_channels) == (b.out_channels, b.in_channels)
            if a.kind == "conv3x3":
                assert np.array_equal(a.weights, b.weights)
                assert np.array_equal(a.bias, b.bias)

    def test_truncated_file_names_layer(self, tmp_path):
        weights = self.make_weights(np.random.default_rng(11))
        path = tmp_path / "w.pnpw"
        serialize_weights(weights, path)
        data = path.read_bytes()
        (tmp_path / "t.pnpw").write_bytes(data[: len(data) - 10])
        with pytest.raises(FormatError, match="layer 2"):
            load_weights(tmp_path / "t.pnpw")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.pnpw").write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_weights(tmp_path / "bad.pnpw")
        err = None
        try:
            load_weights(tmp_path / "bad.pnpw")
        except FormatError as e:
            err = e
        assert err.offset == 0

    def test_nan_parameters_rejected(self, tmp_path):
        weights = self.make_weights(np.random.default_rng(12))
        weights.layers[0].weights[0, 0, 0, 0] = np.nan
        path = tmp_path / "nan.pnpw"
        # bypass the pre-write validation to produce the corrupt file
        import pnpmbir.denoise as dn
        valid = self.make_weights(np.random.default_rng(12))
        serialize_weights(valid, path)
        raw = bytearray(path.read_bytes())
        # first conv weight float starts right after header + layer record
        off = 4 + 8 + 9
        raw[off:off + 4] = np.array([np.nan], "<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="non-finite"):
            load_weights(path)

    def test_channel_chain_break_rejected(self):
        rng = np.random.default_rng(13)
        with pytest.raises(FormatError, match="chain"):
            DenoiserWeights([conv_layer(rng, 3, 1), conv_layer(rng, 1, 4)])

    def test_must_end_on_one_channel(self):
        rng = np.random.default_rng(14)
        with pytest.raises(FormatError):
            DenoiserWeights([conv_layer(rng, 3, 1)])

    def test_serialize_refuses_invalid(self, tmp_path):
        rng = np.random.default_rng(15)
        weights = self.make_weights(rng)
        weights.layers[1] = CnnLayer("relu", 5, 5)  # break the chain post-init
        target = tmp_path / "never.pnpw"
        with pytest.raises(FormatError):
            serialize_weights(weights, target)
        assert not target.exists()

    def test_make_denoiser_residual_cnn(self, tmp_path):
        weights = self.make_weights(np.random.default_rng(16))
        path = tmp_path / "w.pnpw"
        serialize_weights(weights, path)
        den = make_denoiser(DenoiserSpec("residual_cnn", weights_path=str(path)))
        img = ImageGrid(np.random.default_rng(17).uniform(size=(12, 12)))
        out = den(img)
        assert out.values.shape == img.values.shape
        assert np.all(np.isfinite(out.values))
