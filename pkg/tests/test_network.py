import numpy as np
import pytest

from attnfuse import attention as att
from attnfuse import backbone as bb
from attnfuse import network as net
from attnfuse.autodiff import Tensor
from attnfuse.errors import ModelError, ShapeError

from conftest import loop_conv2d


@pytest.fixture
def model():
    return net.init_model(5)


class TestMultitaskLayer:
    def _layer(self, seed, tasks=2, c=3):
        r = np.random.default_rng(seed)
        own = [net.ConvWeights(bb.he_kernel(r, c, c, 3), r.normal(0, 0.1, c))
               for _ in range(tasks)]
        cross = [[bb.he_kernel(r, c, c, 3) for _ in range(l)] for l in range(tasks)]
        return net.TaskLayerWiring(own=own, cross=cross)

    def test_zero_cross_weights_decouple(self, rng):
        layer = self._layer(1, tasks=3)
        for l in range(3):
            for j in range(l):
                layer.cross[l][j][...] = 0.0
        inputs = [rng.random((3, 6, 6)) for _ in range(3)]
        outs = net.multitask_layer(inputs, layer)
        for l in range(3):
            solo = np.maximum(loop_conv2d(inputs[l], layer.own[l].kernel,
                                          bias=layer.own[l].bias), 0.0)
            np.testing.assert_allclose(outs[l], solo, atol=1e-12)

    def test_task0_ignores_higher_tasks(self, rng):
        layer = self._layer(2, tasks=3)
        inputs = [rng.random((3, 5, 5)) for _ in range(3)]
        base = net.multitask_layer(inputs, layer)[0]
        inputs[1] = rng.random((3, 5, 5))
        inputs[2] = rng.random((3, 5, 5))
        again = net.multitask_layer(inputs, layer)[0]
        np.testing.assert_array_equal(base, again)

    def test_two_task_impulse_oracle(self):
        layer = self._layer(3, tasks=2)
        x0 = np.zeros((3, 7, 7))
        x0[0, 3, 3] = 1.0
        x1 = np.zeros((3, 7, 7))
        x1[2, 2, 4] = 1.0
        outs = net.multitask_layer([x0, x1], layer)
        want = np.maximum(
            loop_conv2d(x1, layer.own[1].kernel, bias=layer.own[1].bias)
            + loop_conv2d(x0, layer.cross[1][0]),
            0.0,
        )
        np.testing.assert_allclose(outs[1], want, atol=1e-12)

    def test_triangular_dependency(self, model, rng):
        inputs = [rng.random((net.WIRING_CHANNELS, 6, 6)) for _ in range(3)]
        base = net.multitask_stack(inputs, model.wiring)
        for l in range(1, 3):
            perturbed = [x.copy() for x in inputs]
            perturbed[l] = rng.random(perturbed[l].shape)
            outs = net.multitask_stack(perturbed, model.wiring)
            for low in range(l):
                assert np.array_equal(outs[low], base[low])

    def test_input_count_mismatch(self, model, rng):
        with pytest.raises(ShapeError):
            net.multitask_layer([rng.random((net.WIRING_CHANNELS, 4, 4))],
                                model.wiring.layers[0])


class TestEnhance:
    def test_untrained_output_valid(self, model, rng):
        recon, feats = net.enhance(rng.random((16, 16)), model)
        assert recon.shape == (16, 16)
        assert feats.shape == (net.ENHANCE_CHANNELS, 16, 16)
        assert recon.min() >= 0.0 and recon.max() <= 1.0

    def test_dense_skips_survive_bottleneck_ablation(self, model, rng):
        model.enhance.enc[2].kernel[...] = 0.0
        model.enhance.enc[2].bias[...] = 0.0
        recon, feats = net.enhance(rng.random((16, 16)), model)
        assert np.abs(feats).max() > 0.0

    def test_missing_subnet(self, model, rng):
        model.enhance = None
        with pytest.raises(ModelError):
            net.enhance(rng.random((16, 16)), model)


class TestFuse:
    def test_all_ones_saliency_matches_ungated_path(self, model, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        out = net.fuse(a, b, model, saliency=np.ones((16, 16)))
        # attention-free composition: raw images straight into each branch
        _, efeat = net.enhance_pair_t(Tensor(a[None]), Tensor(b[None]), model.enhance)
        pa = net._branch_features_t(Tensor(a[None]), model.backbone)
        pb = net._branch_features_t(Tensor(b[None]), model.backbone)
        want = net.fusion_head_t(pa, pb, Tensor(efeat.data), model.fusion)
        np.testing.assert_array_equal(out.fused, want.data)

    def test_all_zero_saliency_blanks_branches(self, model, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        out = net.fuse(a, b, model, saliency=np.zeros((16, 16)))
        zero = net.fuse(np.zeros((16, 16)), np.zeros((16, 16)), model,
                        saliency=np.zeros((16, 16)))
        np.testing.assert_array_equal(out.fused, zero.fused)
        assert np.abs(out.enhanced).max() == 0.0

    def test_symmetric_on_identical_inputs(self, rng):
        model = net.init_model(5, criterion_mode="mean")
        a = rng.random((16, 16))
        f1 = net.fuse(a, a.copy(), model)
        f2 = net.fuse(a.copy(), a, model)
        np.testing.assert_array_equal(f1.fused, f2.fused)

    def test_output_contracts(self, model, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        out = net.fuse(a, b, model)
        assert out.fused.shape == a.shape
        assert out.fused.min() >= 0.0 and out.fused.max() <= 1.0
        assert out.saliency.min() >= 0.0 and out.saliency.max() <= 1.0

    def test_deterministic(self, model, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        f1 = net.fuse(a, b, model)
        f2 = net.fuse(a, b, model)
        assert np.array_equal(f1.fused, f2.fused)
        assert np.array_equal(f1.saliency, f2.saliency)
        assert np.array_equal(f1.enhanced, f2.enhanced)

    def test_shape_mismatch(self, model, rng):
        with pytest.raises(ShapeError):
            net.fuse(rng.random((16, 16)), rng.random((16, 8)), model)

    def test_missing_subnet(self, model, rng):
        model.fusion = None
        with pytest.raises(ModelError):
            net.fuse(rng.random((16, 16)), rng.random((16, 16)), model)


class TestModelContainer:
    def test_save_load_save_is_byte_identical(self, model, tmp_path):
        p1 = str(tmp_path / "m1.atnf")
        p2 = str(tmp_path / "m2.atnf")
        net.save_model(model, p1)
        loaded = net.load_model(p1)
        net.save_model(loaded, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_round_trip_preserves_metadata(self, model, tmp_path):
        model.freeze["attention"] = True
        model.trained_phases = ["attention", "enhance"]
        path = str(tmp_path / "m.atnf")
        net.save_model(model, path)
        loaded = net.load_model(path)
        assert loaded.seed == model.seed
        assert loaded.freeze["attention"] is True
        assert loaded.trained_phases == ["attention", "enhance"]
        assert loaded.attention.mode == model.attention.mode

    def test_load_values_match_saved_float32(self, model, tmp_path):
        path = str(tmp_path / "m.atnf")
        net.save_model(model, path)
        loaded = net.load_model(path)
        for name, arr in model.named_parameters().items():
            np.testing.assert_array_equal(
                loaded.named_parameters()[name], arr.astype(np.float32).astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.atnf"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ModelError):
            net.load_model(str(path))

    def test_truncated_file(self, model, tmp_path):
        path = str(tmp_path / "m.atnf")
        net.save_model(model, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) // 2])
        with pytest.raises(ModelError):
            net.load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelError):
            net.load_model(str(tmp_path / "absent.atnf"))

    def test_header_layout(self, model, tmp_path):
        path = str(tmp_path / "m.atnf")
        net.save_model(model, path)
        raw = open(path, "rb").read()
        assert raw[:4] == b"ATNF"
        import struct

        version, seed = struct.unpack_from("<Iq", raw, 4)
        assert version == 1 and seed == model.seed
        (n_stages,) = struct.unpack_from("<I", raw, 16)
        stages = struct.unpack_from(f"<{n_stages}I", raw, 20)
        assert stages == bb.STAGE_CHANNELS
