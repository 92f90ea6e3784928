import numpy as np
import pytest

from attnfuse import backbone as bb
from attnfuse import imgcore
from attnfuse.errors import ShapeError

from conftest import loop_conv2d


@pytest.fixture
def weights():
    return bb.init_backbone(7)


class TestExtractPyramid:
    def test_stage_resolutions(self, weights, rng):
        img = rng.random((32, 32))
        stages = bb.extract_pyramid(img, weights)
        sizes = [s.shape[1] for s in stages]
        assert sizes == [32, 32, 16, 8, 4]
        assert [s.shape[0] for s in stages] == list(bb.STAGE_CHANNELS)

    def test_zero_image_zero_pyramid(self, weights):
        stages = bb.extract_pyramid(np.zeros((16, 16)), weights)
        for s in stages:
            assert np.abs(s).max() == 0.0

    def test_indivisible_dims(self, weights, rng):
        with pytest.raises(ValueError):
            bb.extract_pyramid(rng.random((20, 16)), weights)

    def test_stage1_impulse_matches_seeded_kernel(self, weights):
        img = np.zeros((16, 16))
        img[8, 8] = 1.0
        stages = bb.extract_pyramid(img, weights)
        want = loop_conv2d(img[None], weights.stage_kernels[0], bias=weights.stage_biases[0])
        np.testing.assert_allclose(stages[0], np.maximum(want, 0.0), atol=1e-12)

    def test_deterministic(self, rng):
        img = rng.random((16, 16))
        a = bb.extract_pyramid(img, bb.init_backbone(7))
        b = bb.extract_pyramid(img, bb.init_backbone(7))
        for sa, sb in zip(a, b):
            assert np.array_equal(sa, sb)


class TestFuseLocalGlobal:
    def test_zero_pyramid(self, weights):
        stages = bb.extract_pyramid(np.zeros((16, 16)), weights)
        lo, hi = bb.fuse_local_global(stages, weights)
        assert np.abs(lo).max() == 0.0 and np.abs(hi).max() == 0.0
        assert lo.shape == (8, 16, 16) and hi.shape == (16, 16, 16)

    def test_stage3_only_constant(self, weights):
        c = 0.4
        stages = [np.zeros((ch, (16 >> max(0, i - 1)), (16 >> max(0, i - 1))))
                  for i, ch in enumerate(bb.STAGE_CHANNELS)]
        stages[2] = np.full((16, 8, 8), c)
        lo, hi = bb.fuse_local_global(stages, weights)
        assert np.abs(lo).max() == 0.0
        # constant upsampling: each output channel is spatially constant,
        # at the value of the 1x1 projection applied to a constant input
        want = weights.proj_kernels[0][:, :, 0, 0].sum(axis=1) * c
        for ch in range(16):
            np.testing.assert_allclose(hi[ch], want[ch], atol=1e-12)

    def test_high_equals_sum_of_upsampled_stages(self, weights, rng):
        img = rng.random((16, 16))
        stages = bb.extract_pyramid(img, weights)
        _, hi = bb.fuse_local_global(stages, weights)
        total = np.zeros_like(hi)
        for k in range(3):
            proj = imgcore.conv2d(stages[2 + k], weights.proj_kernels[k])
            total += imgcore.bilinear_upsample(proj, 2 ** (k + 1))
        np.testing.assert_allclose(hi, total, atol=1e-12)

    def test_additive_in_pyramid(self, weights, rng):
        img = rng.random((16, 16))
        stages = bb.extract_pyramid(img, weights)
        lo1, hi1 = bb.fuse_local_global(stages, weights)
        lo2, hi2 = bb.fuse_local_global([2.0 * s for s in stages], weights)
        np.testing.assert_array_equal(lo2, 2.0 * lo1)
        np.testing.assert_array_equal(hi2, 2.0 * hi1)

    def test_bad_resolution(self, weights, rng):
        stages = bb.extract_pyramid(rng.random((16, 16)), weights)
        stages[3] = stages[3][:, :3, :3]
        with pytest.raises(ShapeError):
            bb.fuse_local_global(stages, weights)


class TestMsrb:
    def _zero_block(self, c):
        return bb.MsrbWeights(
            k3=np.zeros((c, c, 3, 3)), b3=np.zeros(c),
            k5=np.zeros((c, c, 5, 5)), b5=np.zeros(c),
            proj=np.zeros((c, 2 * c, 1, 1)), pb=np.zeros(c),
        )

    def test_zero_weights_identity(self, rng):
        x = rng.random((4, 6, 6))
        out = bb.msrb(x, self._zero_block(4))
        np.testing.assert_array_equal(out, x)

    def test_zero_input_zero_output(self, rng):
        w = bb.init_msrb(np.random.default_rng(3), 4)
        out = bb.msrb(np.zeros((4, 5, 5)), w)
        assert np.abs(out).max() == 0.0

    def test_impulse_matches_composed_branches(self):
        w = bb.init_msrb(np.random.default_rng(5), 2)
        x = np.zeros((2, 7, 7))
        x[0, 3, 3] = 1.0
        got = bb.msrb(x, w)
        a = np.maximum(loop_conv2d(x, w.k3, bias=w.b3), 0.0)
        b = np.maximum(loop_conv2d(x, w.k5, bias=w.b5), 0.0)
        want = x + loop_conv2d(np.concatenate([a, b]), w.proj, bias=w.pb)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_shape_mismatch(self, rng):
        w = bb.init_msrb(np.random.default_rng(3), 4)
        with pytest.raises(ShapeError):
            bb.msrb(rng.random((3, 5, 5)), w)
