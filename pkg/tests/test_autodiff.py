import threading

import numpy as np
import pytest

from src.autodiff import SGD, OptimizerState, Tape, Tensor, active_tape, backward, sgd_step
from src.autodiff import functional as F
from src.errors import NumericalError, OptimizerError, ShapeError


def conv_reference(x, w, b, stride, padding):
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


class TestTensor:
    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_is_preserved(self):
        assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64

    def test_rejects_other_dtypes(self):
        with pytest.raises(TypeError):
            Tensor(np.zeros(2), dtype=np.int32)

    def test_item_needs_single_element(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(2)).item()

    def test_operators_route_through_functional(self):
        a = Tensor(np.array([1.0, 2.0]))
        b = Tensor(np.array([0.5, 0.5]))
        np.testing.assert_allclose((a + b).data, [1.5, 2.5])
        np.testing.assert_allclose((a - b).data, [0.5, 1.5])
        np.testing.assert_allclose((2.0 * a).data, [2.0, 4.0])
        np.testing.assert_allclose((-a).data, [-1.0, -2.0])


class TestTape:
    def test_nothing_recorded_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = F.sum_all(x)
        assert not y.requires_grad
        assert active_tape() is None

    def test_nothing_recorded_for_frozen_inputs(self):
        x = Tensor(np.ones(3))
        with Tape() as tape:
            F.sum_all(x)
        assert len(tape) == 0

    def test_records_when_input_requires_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = F.sum_all(F.scale(x, 2.0))
        assert len(tape) == 2
        assert not y.is_leaf

    def test_tape_is_thread_local(self):
        seen = []
        with Tape():
            worker = threading.Thread(target=lambda: seen.append(active_tape()))
            worker.start()
            worker.join()
        assert seen == [None]

    def test_clear_drops_entries(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            F.sum_all(x)
        tape.clear()
        assert len(tape) == 0


class TestBackward:
    def test_gradient_of_reused_tensor_accumulates(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with Tape() as tape:
            loss = F.sum_all(F.add(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [2.0, 2.0])

    def test_repeated_backward_adds_onto_grad(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = F.sq_l2_norm(x)
        backward(loss, tape)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [12.0])

    def test_frozen_operand_gets_no_gradient(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        w = Tensor(np.ones((4, 3)))
        with Tape() as tape:
            loss = F.sum_all(F.linear(x, w))
        backward(loss, tape)
        assert w.grad is None
        np.testing.assert_allclose(x.grad, np.full((2, 3), 4.0))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = F.scale(x, 1.0)
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_empty_tape_rejected(self):
        with pytest.raises(ValueError):
            backward(Tensor(np.array(1.0)), Tape())

    def test_nan_loss_rejected(self):
        x = Tensor(np.array([np.nan]), requires_grad=True)
        with Tape() as tape:
            loss = F.sum_all(x)
        with pytest.raises(NumericalError):
            backward(loss, tape)


class TestOps:
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv2d_matches_loop_reference(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        np.testing.assert_allclose(out.data, conv_reference(x, w, b, stride, padding), rtol=1e-10, atol=1e-10)

    def test_conv2d_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            F.conv2d(Tensor(rng.normal(size=(1, 2, 5, 5))), Tensor(rng.normal(size=(3, 4, 3, 3))))

    def test_maxpool_matches_loop_reference(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        out = F.maxpool2d(Tensor(x), 2, 2).data
        expected = x.reshape(2, 3, 3, 2, 3, 2).max(axis=(3, 5))
        np.testing.assert_allclose(out, expected)

    def test_global_avg_pool_shape(self, rng):
        out = F.global_avg_pool(Tensor(rng.normal(size=(2, 5, 4, 3))))
        assert out.shape == (2, 5)

    def test_softmax_cross_entropy_value(self):
        logits = np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
        labels = np.array([0, 2])
        expected = -np.mean([2.0 - np.log(np.exp(2.0) + 1 + np.exp(-1.0)), -np.log(3.0)])
        assert F.softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(expected)

    def test_softmax_cross_entropy_label_range(self):
        with pytest.raises(ShapeError):
            F.softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))

    def test_tv_loss_value(self):
        image = np.array([[[[0.0, 1.0], [0.0, 1.0]]]])
        assert F.tv_loss(Tensor(image)).item() == pytest.approx(0.5)

    def test_tv_loss_needs_two_pixels(self):
        with pytest.raises(ShapeError):
            F.tv_loss(Tensor(np.zeros((1, 3, 1, 4))))

    def test_l1_and_sq_l2(self):
        a = Tensor(np.array([1.0, -2.0]))
        b = Tensor(np.array([0.0, 1.0]))
        assert F.l1_distance_sum(a, b).item() == pytest.approx(4.0)
        assert F.sq_l2_norm(a).item() == pytest.approx(5.0)


class TestBatchNorm:
    def _params(self, channels):
        return (Tensor(np.ones(channels)), Tensor(np.zeros(channels)),
                Tensor(np.zeros(channels)), Tensor(np.ones(channels)))

    def test_train_updates_running_stats(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
        gamma, beta, mean, var = self._params(2)
        out, stats = F.batchnorm2d(Tensor(x), gamma, beta, mean, var, mode="train", momentum=0.1)
        np.testing.assert_allclose(mean.data, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-6)
        np.testing.assert_allclose(var.data, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-6)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        assert stats is not None

    def test_eval_uses_running_stats(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        gamma, beta, mean, var = self._params(2)
        mean.data[...] = [1.0, -1.0]
        out, stats = F.batchnorm2d(Tensor(x), gamma, beta, mean, var, mode="eval")
        expected = (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data, expected, rtol=1e-6)
        assert stats is None

    def test_synthesis_reports_stats_without_updating(self, rng):
        x = rng.normal(size=(3, 2, 4, 4))
        gamma, beta, mean, var = self._params(2)
        out, stats = F.batchnorm2d(Tensor(x), gamma, beta, mean, var, mode="synthesis")
        np.testing.assert_array_equal(mean.data, [0.0, 0.0])
        np.testing.assert_array_equal(var.data, [1.0, 1.0])
        np.testing.assert_allclose(stats.mean.data, x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(stats.var.data, x.var(axis=(0, 2, 3)))

    def test_train_needs_two_values_per_channel(self):
        gamma, beta, mean, var = self._params(1)
        with pytest.raises(ShapeError):
            F.batchnorm2d(Tensor(np.zeros((1, 1, 1, 1))), gamma, beta, mean, var, mode="train")

    def test_unknown_mode(self, rng):
        gamma, beta, mean, var = self._params(2)
        with pytest.raises(ValueError):
            F.batchnorm2d(Tensor(rng.normal(size=(2, 2, 2, 2))), gamma, beta, mean, var, mode="bogus")


class TestSGD:
    def test_single_step_matches_closed_form(self):
        p = Tensor(np.array([1.0]))
        p.grad = np.array([0.5])
        state = OptimizerState.for_parameters({"p": p}, lr=0.1, momentum=0.9, weight_decay=0.01)
        sgd_step({"p": p}, state)
        np.testing.assert_allclose(state.buffers["p"], [0.51])
        np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.51])

    def test_momentum_accumulates(self):
        p = Tensor(np.array([0.0]))
        opt = SGD({"p": p}, lr=1.0, momentum=0.5, weight_decay=0.0)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step()
        np.testing.assert_allclose(p.data, [-(1.0 + 1.5)])

    def test_missing_gradient_names_parameter(self):
        p = Tensor(np.array([0.0]))
        opt = SGD({"conv.weight": p})
        with pytest.raises(OptimizerError, match="conv.weight"):
            opt.step()

    def test_buffer_mismatch(self):
        p = Tensor(np.array([0.0]))
        p.grad = np.array([1.0])
        state = OptimizerState.for_parameters({"a": p}, 0.1, 0.9, 0.0)
        with pytest.raises(OptimizerError):
            sgd_step({"b": p}, state)

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"momentum": 1.0}, {"weight_decay": -1.0},
                                        {"max_grad_norm": 0.0}])
    def test_invalid_settings(self, kwargs):
        with pytest.raises(ValueError):
            OptimizerState(**kwargs)

    def test_missing_gradient_updates_nothing(self):
        first, second = Tensor(np.array([1.0])), Tensor(np.array([2.0]))
        first.grad = np.array([1.0])
        opt = SGD({"a.weight": first, "b.weight": second}, lr=0.1)
        with pytest.raises(OptimizerError, match="b.weight"):
            opt.step()
        np.testing.assert_array_equal(first.data, [1.0])
        np.testing.assert_array_equal(opt.state.buffers["a.weight"], [0.0])

    @pytest.mark.parametrize("anchor, expected", [(None, 0.95), (1.0, 1.0), (0.5, 0.975)])
    def test_decay_pulls_toward_anchor(self, anchor, expected):
        p = Tensor(np.array([1.0]))
        p.grad = np.array([0.0])
        anchors = {} if anchor is None else {"p": np.array([anchor])}
        sgd_step({"p": p}, OptimizerState.for_parameters({"p": p}, 0.1, 0.0, 0.5, anchors=anchors))
        np.testing.assert_allclose(p.data, [expected])

    def test_no_decay_names_are_skipped(self):
        weight, gamma = Tensor(np.array([1.0])), Tensor(np.array([1.0]))
        weight.grad, gamma.grad = np.array([0.0]), np.array([0.0])
        params = {"bn.gamma": gamma, "conv.weight": weight}
        sgd_step(params, OptimizerState.for_parameters(params, 0.1, 0.0, 0.5, no_decay={"bn.gamma"}))
        np.testing.assert_array_equal(gamma.data, [1.0])
        np.testing.assert_allclose(weight.data, [0.95])

    def test_gradient_norm_clipping(self):
        a, b = Tensor(np.array([0.0])), Tensor(np.array([0.0]))
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        params = {"a": a, "b": b}
        state = OptimizerState.for_parameters(params, 1.0, 0.0, 0.0, max_grad_norm=1.0)
        sgd_step(params, state)
        np.testing.assert_allclose([a.data[0], b.data[0]], [-0.6, -0.8])

    def test_small_gradients_are_not_rescaled(self):
        p = Tensor(np.array([0.0]))
        p.grad = np.array([0.5])
        sgd_step({"p": p}, OptimizerState.for_parameters({"p": p}, 1.0, 0.0, 0.0, max_grad_norm=1.0))
        np.testing.assert_allclose(p.data, [-0.5])

    def test_non_finite_gradient_norm(self):
        p = Tensor(np.array([0.0]))
        p.grad = np.array([np.inf])
        state = OptimizerState.for_parameters({"p": p}, 0.1, 0.9, 0.0, max_grad_norm=1.0)
        with pytest.raises(NumericalError):
            sgd_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [0.0])
