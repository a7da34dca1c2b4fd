import numpy as np
import pytest

import mcf
from mcf.channels import ChannelStack
from mcf.convnet import (BackboneSpec, ConvLayerSpec, MultiLayerChannels,
                         compute_layer_for_window, default_backbone,
                         forward_layer, ingest_precomputed, load_weights,
                         random_weights, save_precomputed, save_weights)
from mcf.errors import ConfigError, IngestError, WeightsFormatError


def conv_oracle(inp, kernel, bias, stride, pad):
    """Direct six-nested-loop cross-correlation."""
    cin, h, w = inp.shape
    out_c, _, kh, kw = kernel.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((out_c, oh, ow))
    for oc in range(out_c):
        for oy in range(oh):
            for ox in range(ow):
                s = 0.0
                for c in range(cin):
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * stride + ky - pad
                            ix = ox * stride + kx - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                s += float(kernel[oc, c, ky, kx]) * float(inp[c, iy, ix])
                out[oc, oy, ox] = s + float(bias[oc])
    return out


class TestForwardLayer:
    def test_identity_kernel(self, rng):
        inp = rng.random((1, 6, 6)).astype(np.float32)
        layer = ConvLayerSpec(1, 1, kernel=(1, 1), padding=0,
                              activation="none", pool="none")
        k = np.ones((1, 1, 1, 1), dtype=np.float32)
        b = np.zeros(1, dtype=np.float32)
        out = forward_layer(inp, layer, k, b)
        assert np.array_equal(out, inp)

    def test_zero_weights_bias_relu(self, rng):
        inp = rng.random((2, 5, 5)).astype(np.float32)
        layer = ConvLayerSpec(2, 3, kernel=(3, 3), padding=1, pool="none")
        k = np.zeros((3, 2, 3, 3), dtype=np.float32)
        for bias_val, want in ((0.7, 0.7), (-0.4, 0.0)):
            b = np.full(3, bias_val, dtype=np.float32)
            out = forward_layer(inp, layer, k, b)
            assert np.allclose(out, want)

    def test_ramp_against_oracle(self):
        ramp = np.arange(25, dtype=np.float32).reshape(1, 5, 5) / 25.0
        layer = ConvLayerSpec(1, 2, kernel=(3, 3), padding=1,
                              activation="none", pool="none")
        rng = np.random.default_rng(3)
        k = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        out = forward_layer(ramp, layer, k, b)
        np.testing.assert_allclose(out, conv_oracle(ramp, k, b, 1, 1),
                                   atol=1e-4)

    def test_random_cases_against_oracle(self, rng):
        for _ in range(10):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 5))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            inp = rng.uniform(-1, 1, (cin, 16, 16)).astype(np.float32)
            k = rng.uniform(-1, 1, (cout, cin, 3, 3)).astype(np.float32)
            b = rng.uniform(-1, 1, cout).astype(np.float32)
            layer = ConvLayerSpec(cin, cout, (3, 3), stride, pad,
                                  activation="none", pool="none")
            out = forward_layer(inp, layer, k, b)
            np.testing.assert_allclose(out, conv_oracle(inp, k, b, stride, pad),
                                       atol=1e-4)

    def test_channel_mismatch(self, rng):
        layer = ConvLayerSpec(4, 2)
        k = np.zeros((2, 4, 3, 3), dtype=np.float32)
        with pytest.raises(ConfigError):
            forward_layer(rng.random((3, 8, 8)).astype(np.float32), layer, k,
                          np.zeros(2, dtype=np.float32))

    def test_underflow_error(self):
        layer = ConvLayerSpec(1, 1, kernel=(3, 3), padding=0, pool="max2")
        with pytest.raises(ConfigError):
            layer.out_shape(3, 3)

    def test_deterministic(self, rng):
        inp = rng.random((3, 16, 16)).astype(np.float32)
        bw = random_weights(default_backbone((4, 4, 4, 4, 4)), 0)
        layer, (k, b) = bw.spec.layers[0], bw.tensors[0]
        a = forward_layer(inp, layer, k, b)
        c = forward_layer(inp.copy(), layer, k, b)
        assert np.array_equal(a, c)


class TestBackbone:
    def test_default_geometry_progression(self):
        bb = default_backbone()
        geos = bb.export_geometries()
        assert [(g[1], g[2]) for g in geos] == [
            (64, 32), (32, 16), (16, 8), (8, 4), (4, 2)]
        assert [g[0] for g in geos] == [16, 32, 64, 96, 96]

    def test_subset_export(self):
        bb = default_backbone()
        sub = BackboneSpec(bb.layers, produces_layers=[2, 3, 4, 5])
        assert [(g[1], g[2]) for g in sub.export_geometries()] == [
            (32, 16), (16, 8), (8, 4), (4, 2)]

    def test_nondecreasing_export_rejected(self):
        bb = default_backbone()
        with pytest.raises(ConfigError):
            BackboneSpec(bb.layers, produces_layers=[3, 3])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ConvLayerSpec(3, 8, kernel=(2, 2))


class TestWeightsFile:
    def test_roundtrip(self, tmp_path, rng):
        bw = random_weights(default_backbone((4, 8, 8, 8, 8)), seed=5)
        path = tmp_path / "w.mcfw"
        save_weights(path, bw)
        back = load_weights(path)
        assert back.content_hash() == bw.content_hash()
        for (k1, b1), (k2, b2) in zip(bw.tensors, back.tensors):
            assert np.array_equal(k1, k2) and np.array_equal(b1, b2)
        assert [l.out_channels for l in back.spec.layers] == [4, 8, 8, 8, 8]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "w.mcfw"
        p.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(WeightsFormatError):
            load_weights(p)

    def test_truncation_names_layer(self, tmp_path):
        bw = random_weights(default_backbone((4, 8, 8, 8, 8)), seed=5)
        p = tmp_path / "w.mcfw"
        save_weights(p, bw)
        raw = p.read_bytes()
        p.write_bytes(raw[:len(raw) - 20])
        with pytest.raises(WeightsFormatError, match="layer 5"):
            load_weights(p)

    def test_nonfinite_weight(self, tmp_path):
        bw = random_weights(default_backbone((2, 2, 2, 2, 2)), seed=5)
        bw.tensors[2][0][0, 0, 0, 0] = np.nan
        p = tmp_path / "w.mcfw"
        save_weights(p, bw)
        with pytest.raises(WeightsFormatError, match="layer 3"):
            load_weights(p)

    def test_seeded_init_deterministic(self):
        a = random_weights(default_backbone((4, 4, 4, 4, 4)), seed=9)
        b = random_weights(default_backbone((4, 4, 4, 4, 4)), seed=9)
        assert a.content_hash() == b.content_hash()


class TestWindowCache:
    def test_lazy_resume_equals_uninterrupted(self, rng):
        bw = random_weights(default_backbone((4, 6, 8, 8, 8)), seed=2)
        crop = rng.random((3, 128, 64)).astype(np.float32)

        staged = MultiLayerChannels(crop=crop)
        stage_outs = [compute_layer_for_window(staged, bw, i).data
                      for i in range(2, 7)]

        direct = crop
        direct_outs = []
        for layer, (k, b) in zip(bw.spec.layers, bw.tensors):
            direct = forward_layer(direct, layer, k, b)
            direct_outs.append(direct)
        for a, b_ in zip(stage_outs, direct_outs):
            assert np.array_equal(a, b_)

    def test_release_drops_cache(self, rng):
        bw = random_weights(default_backbone((4, 4, 4, 4, 4)), seed=2)
        mlc = MultiLayerChannels(crop=rng.random((3, 128, 64)).astype(np.float32))
        compute_layer_for_window(mlc, bw, 2)
        assert mlc._blocks
        mlc.release()
        assert not mlc._blocks and mlc.crop is None

    def test_missing_crop(self):
        mlc = MultiLayerChannels()
        bw = random_weights(default_backbone((4, 4, 4, 4, 4)), seed=2)
        with pytest.raises(ConfigError):
            compute_layer_for_window(mlc, bw, 2)


class TestPrecomputed:
    def _populated(self, rng, bw):
        mlc = MultiLayerChannels(crop=rng.random((3, 128, 64)).astype(np.float32))
        mlc.set_layer(1, ChannelStack(1, rng.random((10, 32, 16)).astype(np.float32)))
        for i in range(2, 7):
            compute_layer_for_window(mlc, bw, i)
        return mlc

    def test_roundtrip(self, tmp_path, rng):
        bw = random_weights(default_backbone((4, 6, 8, 8, 8)), seed=4)
        mlc = self._populated(rng, bw)
        path = tmp_path / "w.mcfp"
        save_precomputed(path, mlc, 6)
        back = ingest_precomputed(path, "win0", bw.spec)
        for i in range(1, 7):
            assert np.array_equal(back.layer(i).stack.data,
                                  mlc.layer(i).stack.data)
        assert back.window_id == "win0"

    def test_geometry_mismatch(self, tmp_path, rng):
        bw = random_weights(default_backbone((4, 6, 8, 8, 8)), seed=4)
        mlc = self._populated(rng, bw)
        path = tmp_path / "w.mcfp"
        save_precomputed(path, mlc, 6)
        other = default_backbone((4, 6, 8, 8, 16))
        with pytest.raises(IngestError, match="layer 6"):
            ingest_precomputed(path, "w", other)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.mcfp"
        p.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(IngestError):
            ingest_precomputed(p, "w", default_backbone((4, 4, 4, 4, 4)))


def test_forward_matches_fallback_oracle_batch(rng):
    # acceptance-style batch at unit scale: 20 random (input, kernel) pairs
    from mcf import _kernels_py
    for _ in range(20):
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        inp = rng.uniform(-1, 1, (cin, 12, 10)).astype(np.float32)
        k = rng.uniform(-1, 1, (cout, cin, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, cout).astype(np.float32)
        layer = ConvLayerSpec(cin, cout, (3, 3), 1, 1)
        out = forward_layer(inp, layer, k, b)
        ref = _kernels_py.conv_forward(inp, k, b, 1, 1, True, True)
        assert np.array_equal(out, ref)
