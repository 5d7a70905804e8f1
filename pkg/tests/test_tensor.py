"""Core tensor op contracts: forward examples, FD gradient checks, tape rules."""

import numpy as np
import pytest

from auxnas import autodiff as ad
from auxnas.autodiff import (
    ContractError,
    DegenerateShapeError,
    DimensionError,
    ParamSet,
    Tape,
    Tensor,
    constant,
    parameter,
)

from _gradcheck import check_grads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def p64(rng, *shape):
    # modest scale keeps FD roundoff well under the gradient tolerances
    return parameter(0.5 * rng.standard_normal(shape), dtype=np.float64)


class TestConv2d:
    def test_conv1x1_scaling(self):
        x = constant(np.ones((1, 1, 3, 3)))
        w = constant(np.full((1, 1, 1, 1), 2.0))
        out = ad.conv2d(x, w)
        assert np.array_equal(out.values, np.full((1, 1, 3, 3), 2.0, dtype=np.float32))

    def test_dirac_kernel_identity(self, rng):
        x = constant(rng.random((1, 1, 3, 3)))
        k = np.zeros((1, 1, 3, 3), dtype=np.float32)
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(x, constant(k), pad=1)
        assert np.array_equal(out.values, x.values)

    def test_output_size_formula(self):
        x = constant(np.zeros((1, 2, 9, 9)))
        w = constant(np.zeros((4, 2, 3, 3)))
        out = ad.conv2d(x, w, stride=2, dilation=2, pad=2)
        h = (9 + 4 - 2 * 2 - 1) // 2 + 1
        assert out.shape == (1, 4, h, h)

    def test_shape_errors(self):
        x = constant(np.zeros((1, 3, 4, 4)))
        with pytest.raises(DimensionError):
            ad.conv2d(x, constant(np.zeros((2, 2, 3, 3))))
        with pytest.raises(DegenerateShapeError):
            ad.conv2d(constant(np.zeros((1, 1, 2, 2))), constant(np.zeros((1, 1, 3, 3))))

    @pytest.mark.parametrize("stride,dilation,groups,pad", [
        (1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 1, 2), (1, 1, 2, 0), (1, 3, 4, 3),
    ])
    def test_grad_vs_finite_differences(self, rng, stride, dilation, groups, pad):
        cin, cout, k = 4, 4, 3 if dilation * 2 + 1 <= 4 + 2 * pad else 1
        x = p64(rng, 2, cin, 4, 4)
        w = p64(rng, cout, cin // groups, k, k)
        b = p64(rng, cout)

        def loss():
            y = ad.conv2d(x, w, b, stride=stride, dilation=dilation, groups=groups, pad=pad)
            return ad.reduce_mean(ad.mul(y, y))

        check_grads(loss, [x, w, b], rtol=1e-6)


class TestBatchNorm:
    def _state(self, c, dtype=np.float32):
        return (Tensor(np.zeros(c, dtype=dtype)), Tensor(np.ones(c, dtype=dtype)))

    def test_constant_input_train(self):
        x = constant(np.full((2, 3, 4, 4), 7.0))
        g = constant(np.ones(3))
        b = constant(np.zeros(3))
        rm, rv = self._state(3)
        out = ad.batch_norm(x, g, b, rm, rv, mode="train")
        assert np.allclose(out.values, 0.0)

    def test_affine_collapse(self):
        x = constant(np.random.default_rng(0).random((2, 3, 4, 4)))
        g = constant(np.zeros(3))
        b = constant(np.full(3, 5.0))
        rm, rv = self._state(3)
        out = ad.batch_norm(x, g, b, rm, rv, mode="train")
        assert np.allclose(out.values, 5.0)

    def test_running_state_update_and_eval(self, rng):
        x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        g = constant(np.ones(2))
        b = constant(np.zeros(2))
        rm, rv = self._state(2)
        ad.batch_norm(constant(x), g, b, rm, rv, mode="train", momentum=0.1)
        mu = x.mean(axis=(0, 2, 3))
        assert np.allclose(rm.values, 0.1 * mu, atol=1e-6)
        out = ad.batch_norm(constant(x), g, b, rm, rv, mode="eval")
        expect = (x - rm.values.reshape(1, 2, 1, 1)) / np.sqrt(rv.values.reshape(1, 2, 1, 1) + 1e-5)
        assert np.allclose(out.values, expect, atol=1e-5)

    def test_grad_vs_finite_differences(self, rng):
        x = p64(rng, 3, 2, 4, 4)
        g = parameter(rng.random(2) + 0.5, dtype=np.float64)
        b = p64(rng, 2)

        def loss():
            rm = Tensor(np.zeros(2, dtype=np.float64))
            rv = Tensor(np.ones(2, dtype=np.float64))
            y = ad.batch_norm(x, g, b, rm, rv, mode="train")
            return ad.reduce_mean(ad.mul(y, ad.exp(ad.scale(y, 0.1))))

        check_grads(loss, [x, g, b], rtol=1e-6)

    def test_empty_batch_rejected(self):
        x = constant(np.zeros((1, 2, 0, 4)))
        g = constant(np.ones(2))
        b = constant(np.zeros(2))
        rm, rv = self._state(2)
        with pytest.raises(DegenerateShapeError):
            ad.batch_norm(x, g, b, rm, rv, mode="train")


class TestElementwise:
    def test_add_identity(self, rng):
        x = constant(rng.random((2, 3)))
        out = ad.add(x, constant(np.zeros((2, 3))))
        assert np.array_equal(out.values, x.values)

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(constant(np.zeros((2, 3))), constant(np.zeros((3, 2))))

    def test_concat_channel_count(self):
        a = constant(np.zeros((1, 2, 2, 2)))
        b = constant(np.ones((1, 3, 2, 2)))
        out = ad.concat_channels([a, b])
        assert out.shape == (1, 5, 2, 2)
        assert np.array_equal(out.values[:, 2:], np.ones((1, 3, 2, 2), dtype=np.float32))

    def test_concat_grad_splits(self, rng):
        a = p64(rng, 1, 2, 3, 3)
        b = p64(rng, 1, 3, 3, 3)

        def loss():
            y = ad.concat_channels([a, b])
            return ad.reduce_sum(ad.mul(y, y))

        check_grads(loss, [a, b], rtol=1e-6)

    def test_relu_subgradient_zero_at_zero(self):
        x = parameter(np.array([[-1.0, 0.0, 2.0]]), dtype=np.float64)
        with Tape() as tape:
            tape.backward(ad.reduce_sum(ad.relu(x)))
        assert np.array_equal(x.grad, [[0.0, 0.0, 1.0]])

    def test_minimum_clip_abs_grads(self, rng):
        a = p64(rng, 4, 4)
        b = p64(rng, 4, 4)

        def loss():
            y = ad.minimum(ad.mul(a, a), ad.abs_(b))
            return ad.reduce_sum(ad.mul(ad.clip(y, -0.5, 0.5), ad.sigmoid(a)))

        check_grads(loss, [a, b], rtol=1e-5, atol=1e-8)

    def test_unary_grads(self, rng):
        x = p64(rng, 3, 5)

        def loss():
            y = ad.add(ad.tanh(x), ad.softplus(x))
            y = ad.add(y, ad.exp(ad.scale(x, 0.3)))
            return ad.reduce_mean(ad.mul(y, y))

        check_grads(loss, [x], rtol=1e-6)


class TestResize:
    def test_same_size_identity(self, rng):
        x = constant(rng.random((2, 3, 5, 7)))
        out = ad.bilinear_resize(x, 5, 7)
        assert np.array_equal(out.values, x.values)

    def test_half_pixel_upsample_values(self):
        x = constant(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))
        out = ad.bilinear_resize(x, 1, 4)
        assert np.allclose(out.values.ravel(), [0.0, 0.5, 1.5, 2.0])

    def test_grad_vs_finite_differences(self, rng):
        x = p64(rng, 1, 2, 3, 4)

        def loss():
            y = ad.bilinear_resize(x, 5, 3)
            return ad.reduce_sum(ad.mul(y, y))

        check_grads(loss, [x], rtol=1e-6)


class TestGridSample:
    def test_lattice_sampling_exact(self, rng):
        x = constant(rng.random((1, 2, 4, 4)))
        ys, xs = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
        pts = constant(np.stack([ys.ravel(), xs.ravel()], axis=-1)[None].astype(np.float32))
        out = ad.grid_sample_bilinear(x, pts)
        assert np.array_equal(out.values.reshape(1, 2, 4, 4), x.values)

    def test_midpoint_average(self):
        x = constant(np.array([[1.0], [3.0]]).reshape(1, 1, 2, 1))
        pts = constant(np.array([[[0.5, 0.0]]]))
        out = ad.grid_sample_bilinear(x, pts)
        assert np.allclose(out.values, 2.0)

    def test_out_of_bounds_clamps(self):
        x = constant(np.arange(4.0).reshape(1, 1, 2, 2))
        pts = constant(np.array([[[-3.0, -3.0], [9.0, 9.0]]]))
        out = ad.grid_sample_bilinear(x, pts)
        assert np.allclose(out.values.ravel(), [0.0, 3.0])

    def test_grads_vs_finite_differences(self, rng):
        x = p64(rng, 2, 3, 5, 5)
        # keep points away from integer coordinates so FD stays valid
        raw = rng.uniform(0.3, 3.7, size=(2, 6, 2))
        raw = np.where(np.abs(raw - np.round(raw)) < 0.1, raw + 0.15, raw)
        pts = parameter(raw, dtype=np.float64)

        def loss():
            y = ad.grid_sample_bilinear(x, pts)
            return ad.reduce_sum(ad.mul(y, y))

        check_grads(loss, [x], rtol=1e-6)
        check_grads(loss, [pts], rtol=1e-5, atol=1e-8)


class TestReduceSoftmax:
    def test_softmax_log_symmetry(self):
        out = ad.softmax_log(constant(np.array([[0.0, 0.0]])), axis=1)
        assert np.allclose(out.values, -np.log(2.0))

    def test_mean_of_ones(self):
        assert ad.reduce_mean(constant(np.ones(4))).item() == 1.0

    def test_empty_axis_rejected(self):
        with pytest.raises(DegenerateShapeError):
            ad.reduce_sum(constant(np.zeros((2, 0))), axes=(1,))

    def test_composite_grad(self, rng):
        x = p64(rng, 3, 6)

        def loss():
            return ad.reduce_mean(ad.mul(ad.softmax_log(x, axis=1), x))

        check_grads(loss, [x], rtol=1e-6)

    def test_l2_normalize_grad_and_norm(self, rng):
        x = p64(rng, 2, 3, 2, 2)
        y = ad.l2_normalize(x, axis=1)
        norms = np.sqrt((y.values ** 2).sum(axis=1))
        assert np.allclose(norms, 1.0, atol=1e-6)

        def loss():
            z = ad.l2_normalize(x, axis=1)
            return ad.reduce_sum(ad.mul(z, ad.exp(ad.scale(z, 0.2))))

        check_grads(loss, [x], rtol=1e-5, atol=1e-8)


class TestLinearAlgebra:
    def test_matmul_grads(self, rng):
        a = p64(rng, 3, 4)
        b = p64(rng, 4, 2)
        bb = p64(rng, 5, 4, 2)

        def loss2d():
            return ad.reduce_sum(ad.mul(ad.matmul(a, b), ad.matmul(a, b)))

        check_grads(loss2d, [a, b], rtol=1e-6)

        def loss3d():
            y = ad.matmul(a, bb)
            return ad.reduce_sum(ad.mul(y, y))

        check_grads(loss3d, [a, bb], rtol=1e-6)

    def test_linear_grads(self, rng):
        x = p64(rng, 4, 3)
        w = p64(rng, 3, 5)
        b = p64(rng, 5)

        def loss():
            y = ad.linear(x, w, b)
            return ad.reduce_sum(ad.mul(y, ad.tanh(y)))

        check_grads(loss, [x, w, b], rtol=1e-6)

    def test_embedding_grads(self, rng):
        table = p64(rng, 7, 4)
        ids = np.array([0, 3, 3, 6])

        def loss():
            y = ad.embedding(table, ids)
            return ad.reduce_sum(ad.mul(y, y))

        check_grads(loss, [table], rtol=1e-6)


class TestBackwardContract:
    def test_sum_grad_is_ones(self, rng):
        x = parameter(rng.random((3, 4)), dtype=np.float64)
        with Tape() as tape:
            tape.backward(ad.reduce_sum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_linearity_of_backward(self, rng):
        base = rng.standard_normal((3, 3))
        x1 = parameter(base, dtype=np.float64)
        with Tape() as tape:
            a = ad.reduce_sum(ad.mul(x1, x1))
            b = ad.reduce_mean(ad.exp(x1))
            tape.backward(ad.add(a, b))
        x2 = parameter(base, dtype=np.float64)
        with Tape() as tape:
            a = ad.reduce_sum(ad.mul(x2, x2))
            b = ad.reduce_mean(ad.exp(x2))
            tape.backward(a)
            tape.backward(b)
        assert np.abs(x1.grad - x2.grad).max() <= 1e-12

    def test_non_scalar_loss_rejected(self, rng):
        x = parameter(rng.random((2, 2)), dtype=np.float64)
        with Tape() as tape:
            y = ad.mul(x, x)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_forward_deterministic(self, rng):
        xv = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        wv = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

        def run():
            y = ad.conv2d(constant(xv), constant(wv), pad=1)
            return ad.reduce_mean(ad.relu(y)).values.copy()

        assert np.array_equal(run(), run())

    def test_detach_blocks_gradient(self, rng):
        x = parameter(rng.random((2, 2)), dtype=np.float64)
        w = parameter(rng.random((2, 2)), dtype=np.float64)
        with Tape() as tape:
            y = ad.detach(ad.mul(x, x))
            tape.backward(ad.reduce_sum(ad.mul(y, w)))
        assert x.grad is None
        assert w.grad is not None and np.abs(w.grad).sum() > 0

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(ContractError):
                with Tape():
                    pass


class TestParamSet:
    def test_tags_partition(self, rng):
        ps = ParamSet()
        ps.add("enc.w", rng.random((3, 3)), ad.TAG_SHARED)
        ps.add("dec1.w", rng.random(4), ad.tag_task(1))
        ps.add("aux1.w", rng.random(2), ad.tag_aux(1))
        ps.add("ctrl.w", rng.random(2), ad.TAG_CONTROLLER)
        with pytest.raises(ContractError):
            ps.add("enc.w", rng.random(1), ad.tag_task(2))
        groups = [ps.tagged(ad.TAG_SHARED), ps.tagged(ad.tag_task(1)),
                  ps.tagged(ad.tag_aux(1)), ps.tagged(ad.TAG_CONTROLLER)]
        assert sum(len(g) for g in groups) == len(ps)
        flat = [p for g in groups for p in g]
        assert len(set(flat)) == len(flat)

    def test_zero_grad_materializes(self, rng):
        ps = ParamSet()
        t = ps.add("w", rng.random(3), ad.TAG_SHARED)
        ps.add("state", rng.random(3), ad.TAG_SHARED, trainable=False)
        ps.zero_grad()
        assert np.array_equal(t.grad, np.zeros(3))
        assert ps["state"].grad is None
