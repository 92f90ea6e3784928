import numpy as np
import pytest

from attnfuse import losses, network as net
from attnfuse import training as tr
from attnfuse.autodiff import Tensor
from attnfuse.errors import NumericError, StateError

from conftest import max_rel_err


@pytest.fixture(scope="module")
def small_data():
    return tr.gen_synthetic(7, 6, size=16)


@pytest.fixture
def model():
    return net.init_model(7)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(phase="warmup")
        with pytest.raises(ValueError):
            tr.TrainConfig(phase="main", learning_rate=0.0)
        with pytest.raises(ValueError):
            tr.TrainConfig(phase="main", steps=-1)
        with pytest.raises(ValueError):
            tr.TrainConfig(phase="main", batch_size=0)
        with pytest.raises(ValueError):
            tr.TrainConfig(phase="main", optimizer="rmsprop")


class TestGenSynthetic:
    def test_deterministic(self):
        a = tr.gen_synthetic(3, 4, size=32)
        b = tr.gen_synthetic(3, 4, size=32)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.modality_a, pb.modality_a)
            assert np.array_equal(pa.modality_b, pb.modality_b)
            assert np.array_equal(pa.truth_mask, pb.truth_mask)

    def test_pair_depends_only_on_index(self):
        long = tr.gen_synthetic(3, 6, size=32)
        short = tr.gen_synthetic(3, 2, size=32)
        assert np.array_equal(long[1].modality_a, short[1].modality_a)

    def test_masks_binary(self):
        for pair in tr.gen_synthetic(9, 5, size=32):
            assert set(np.unique(pair.truth_mask)) <= {0.0, 1.0}
            assert pair.truth_mask.sum() > 0

    def test_target_contrast_higher_in_modality_b(self):
        for pair in tr.gen_synthetic(42, 100, size=64):
            m = pair.truth_mask > 0
            contrast_a = abs(pair.modality_a[m].mean() - pair.modality_a[~m].mean())
            contrast_b = abs(pair.modality_b[m].mean() - pair.modality_b[~m].mean())
            assert contrast_b > contrast_a

    def test_ranges(self):
        for pair in tr.gen_synthetic(1, 3, size=32):
            for img in (pair.modality_a, pair.modality_b):
                assert img.min() >= 0.0 and img.max() <= 1.0


class TestBackwardContract:
    def test_single_layer_toy_with_ssim(self, rng):
        # conv weights -> prediction -> structural loss, vs differences
        from attnfuse import autodiff as ad

        x = rng.random((16, 16))
        y = rng.random((16, 16))
        k = rng.normal(0, 0.3, (1, 1, 3, 3))

        def loss_of(kernel_arr):
            pred = ad.sigmoid(ad.conv2d(Tensor(x[None]), Tensor(kernel_arr)))
            pred2 = ad.reshape(pred, (16, 16))
            return losses.ssim_loss_t(pred2, Tensor(y), losses.SsimParams())

        kt = Tensor(k, requires_grad=True)
        pred = ad.sigmoid(ad.conv2d(Tensor(x[None]), kt))
        out = losses.ssim_loss_t(ad.reshape(pred, (16, 16)), Tensor(y), losses.SsimParams())
        out.backward()
        worst = max_rel_err(kt.grad, lambda: float(loss_of(k).data), k, rng, n_probes=6)
        assert worst <= 1e-4

    def test_frozen_families_get_zero_gradient(self, model, small_data):
        # main loss with only the fusion head trainable: every frozen
        # subtask tensor accumulates exactly nothing
        from attnfuse.params import lift

        wrapped = []

        def wrap(name, arr):
            t = Tensor(arr, requires_grad=net.family_of(name) == "fusion")
            wrapped.append((name, t))
            return t

        view = lift(model, wrap)
        cfg = tr.TrainConfig(phase="main", seed=0)
        total, _ = tr.phase_loss_t(view, "main", small_data[0], cfg)
        total.backward()
        assert any(t.grad is not None for name, t in wrapped
                   if net.family_of(name) == "fusion")
        for name, t in wrapped:
            if net.family_of(name) != "fusion":
                assert t.grad is None, name

    def test_grad_check_deterministic_in_enumeration(self, model, small_data):
        a = tr.grad_check(model, "attention", small_data[0], families=["attention"],
                          max_per_tensor=1)
        b = tr.grad_check(model, "attention", small_data[0], families=["attention"],
                          max_per_tensor=1)
        assert a == b

    def test_grad_check_validation(self, model, small_data):
        with pytest.raises(ValueError):
            tr.grad_check(model, "main", small_data[0], eps=0.0)
        with pytest.raises(ValueError):
            tr.grad_check(model, "warmup", small_data[0])


class TestTrainPhase:
    def test_zero_steps_unchanged(self, model, small_data):
        out, curve = tr.train_phase(model, small_data,
                                    tr.TrainConfig(phase="attention", steps=0))
        assert curve == []
        for name, arr in model.named_parameters().items():
            assert np.array_equal(out.named_parameters()[name], arr)
        assert out.trained_phases == model.trained_phases

    def test_phase_ordering_enforced(self, model, small_data):
        with pytest.raises(StateError):
            tr.train_phase(model, small_data, tr.TrainConfig(phase="main", steps=1))

    def test_empty_data(self, model):
        with pytest.raises(ValueError):
            tr.train_phase(model, [], tr.TrainConfig(phase="attention", steps=1))

    def test_main_leaves_subtask_weights_bit_identical(self, model, small_data):
        m1, _ = tr.train_phase(model, small_data, tr.TrainConfig(phase="attention", steps=2))
        m2, _ = tr.train_phase(m1, small_data, tr.TrainConfig(phase="enhance", steps=2))
        m3, _ = tr.train_phase(m2, small_data, tr.TrainConfig(phase="main", steps=3))
        before = m2.named_parameters()
        after = m3.named_parameters()
        changed = 0
        for name in before:
            fam = net.family_of(name)
            if fam in ("attention", "enhance", "backbone", "wiring"):
                assert np.array_equal(after[name], before[name]), name
            else:
                changed += not np.array_equal(after[name], before[name])
        assert changed > 0
        assert m3.freeze["attention"] and m3.freeze["enhance"]

    def test_curve_records_components(self, model, small_data):
        _, curve = tr.train_phase(model, small_data,
                                  tr.TrainConfig(phase="enhance", steps=3, batch_size=2))
        assert len(curve) == 3
        for i, row in enumerate(curve):
            assert row.iteration == i
            assert row.l_f > 0.0
            assert row.l_f == pytest.approx(row.l_ssim + row.l_perceptual + row.l_edge,
                                            rel=1e-9)

    def test_attention_curve_skips_perceptual(self, model, small_data):
        _, curve = tr.train_phase(model, small_data,
                                  tr.TrainConfig(phase="attention", steps=2, batch_size=2))
        assert all(row.l_perceptual == 0.0 for row in curve)

    def test_reproducible_bitwise(self, model, small_data):
        cfg = tr.TrainConfig(phase="enhance", steps=3, batch_size=2)
        m1, c1 = tr.train_phase(model, small_data, cfg)
        m2, c2 = tr.train_phase(model, small_data, cfg)
        for name, arr in m1.named_parameters().items():
            assert np.array_equal(m2.named_parameters()[name], arr)
        assert [r.l_f for r in c1] == [r.l_f for r in c2]

    def test_phase_isolation(self, model, small_data):
        # after all three phases, re-running the attention phase from its
        # starting point reproduces the attention checkpoint exactly
        cfg_att = tr.TrainConfig(phase="attention", steps=2, batch_size=2)
        m1, _ = tr.train_phase(model, small_data, cfg_att)
        m2, _ = tr.train_phase(m1, small_data, tr.TrainConfig(phase="enhance", steps=2,
                                                              batch_size=2))
        tr.train_phase(m2, small_data, tr.TrainConfig(phase="main", steps=2, batch_size=2))
        again, _ = tr.train_phase(model, small_data, cfg_att)
        for name, arr in m1.named_parameters().items():
            if net.family_of(name) == "attention":
                assert np.array_equal(again.named_parameters()[name], arr), name

    def test_sgd_also_trains(self, model, small_data):
        cfg = tr.TrainConfig(phase="enhance", steps=2, optimizer="sgd", learning_rate=0.1)
        m1, curve = tr.train_phase(model, small_data, cfg)
        assert not np.array_equal(m1.enhance.enc[0].kernel, model.enhance.enc[0].kernel)

    def test_nonfinite_loss_aborts(self, model, small_data):
        import copy

        bad = copy.deepcopy(small_data[:2])
        bad[0].modality_a[0, 0] = np.nan
        cfg = tr.TrainConfig(phase="enhance", steps=1)
        with pytest.raises(NumericError):
            tr.train_phase(model, bad, cfg)

    def test_input_model_not_mutated(self, model, small_data):
        snap = {k: v.copy() for k, v in model.named_parameters().items()}
        tr.train_phase(model, small_data, tr.TrainConfig(phase="attention", steps=2))
        for name, arr in model.named_parameters().items():
            assert np.array_equal(arr, snap[name])


class TestCurveIO:
    def test_write_and_parse(self, tmp_path):
        rows = [tr.CurvePoint(0, 0.5, 0.25, 0.125, 0.875),
                tr.CurvePoint(1, 0.4, 0.2, 0.1, 0.7)]
        path = str(tmp_path / "curve.csv")
        tr.write_curve(path, rows)
        lines = open(path).read().splitlines()
        assert lines[0] == "iteration,l_ssim,l_perceptual,l_edge,l_f"
        assert len(lines) == 3
        parts = lines[1].split(",")
        assert int(parts[0]) == 0
        assert [float(v) for v in parts[1:]] == [0.5, 0.25, 0.125, 0.875]
