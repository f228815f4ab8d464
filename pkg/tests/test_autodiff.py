import io

import numpy as np
import pytest

from gradcheck import fd_gradient, rel_error
from transecg import autodiff as ad
from transecg.autodiff import AdamW, Tensor


def check_op(build, arrays, rtol=1e-4, eps=1e-6):
    """Compare autodiff grads of sum(build(tensors)) against finite differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(tensors)
    loss = ad.tsum(out)
    ad.backward(loss)

    def scalar(arrs):
        with ad.no_grad():
            return float(ad.tsum(build([Tensor(a) for a in arrs])).data)

    for i, t in enumerate(tensors):
        numeric = fd_gradient(scalar, arrays, i, eps=eps)
        assert rel_error(t.grad, numeric) < rtol, f"input {i}"


class TestBasicOps:
    def test_matmul_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        out = ad.matmul(Tensor(np.eye(3)), Tensor(x))
        assert np.allclose(out.data, x)

    def test_matmul_hand_value(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_matmul_shape_mismatch_message(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_softmax_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 1 / 3)

    def test_softmax_overflow_safe(self):
        out = ad.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0)

    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(1).normal(size=(3, 7))
        out = ad.softmax(Tensor(x), axis=-1)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(out.data >= 0)

    def test_layer_norm_constant_row(self):
        out = ad.layer_norm(Tensor(np.full((1, 8), 3.0)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.allclose(out.data, 0.0)

    def test_layer_norm_standardizes(self):
        out = ad.layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert abs(out.data.mean()) < 1e-7
        assert out.data.var() == pytest.approx(1.0, abs=1e-3)

    def test_gelu_zero(self):
        assert ad.gelu(Tensor(0.0)).data == 0.0

    def test_linear_identity(self):
        x = np.random.default_rng(2).normal(size=(3, 4))
        out = ad.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, x)


class TestGradients:
    rng = np.random.default_rng(7)

    def test_matmul(self):
        check_op(lambda t: ad.matmul(t[0], t[1]),
                 [self.rng.normal(size=(4, 5)), self.rng.normal(size=(5, 3))], rtol=1e-5)

    def test_matmul_batched(self):
        check_op(lambda t: ad.matmul(t[0], t[1]),
                 [self.rng.normal(size=(2, 3, 4)), self.rng.normal(size=(4, 3))])

    def test_softmax(self):
        check_op(lambda t: ad.mul(ad.softmax(t[0], axis=-1), t[1]),
                 [self.rng.normal(size=(3, 7)), self.rng.normal(size=(3, 7))], rtol=1e-5)

    def test_layer_norm(self):
        check_op(lambda t: ad.mul(ad.layer_norm(t[0], t[1], t[2]), t[3]),
                 [self.rng.normal(size=(2, 8)), self.rng.normal(size=8),
                  self.rng.normal(size=8), self.rng.normal(size=(2, 8))])

    def test_gelu(self):
        check_op(lambda t: ad.gelu(t[0]), [self.rng.normal(size=(3, 5))])

    def test_add_broadcast(self):
        check_op(lambda t: ad.add(t[0], t[1]),
                 [self.rng.normal(size=(4, 3)), self.rng.normal(size=3)])

    def test_mul_sub_scale(self):
        check_op(lambda t: ad.scale(ad.mul(ad.sub(t[0], t[1]), t[0]), 2.5),
                 [self.rng.normal(size=(3, 3)), self.rng.normal(size=(3, 3))])

    def test_transpose_reshape_concat_slice(self):
        def build(t):
            a = ad.transpose(t[0], (1, 0, 2))
            b = a.reshape((6, 4))
            c = ad.concat([b, t[1]], axis=0)
            return ad.mul(c[1:5, :], t[2])
        check_op(build, [self.rng.normal(size=(2, 3, 4)), self.rng.normal(size=(2, 4)),
                         self.rng.normal(size=(4, 4))])

    def test_log_clip(self):
        check_op(lambda t: ad.tlog(ad.clip_min(t[0], 1e-12)),
                 [np.abs(self.rng.normal(size=(3, 4))) + 0.1])

    @pytest.mark.parametrize("seed", range(20))
    def test_randomized_shapes(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n = rng.integers(2, 6, size=3)
        def build(t):
            h = ad.gelu(ad.matmul(t[0], t[1]))
            s = ad.softmax(ad.layer_norm(h, t[2], t[3]), axis=-1)
            return ad.mul(s, s)
        check_op(build, [rng.normal(size=(m, k)), rng.normal(size=(k, n)),
                         rng.normal(size=n) + 1.0, rng.normal(size=n)])


class TestBackwardSemantics:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.tsum(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        ad.backward(ad.tsum(ad.mul(x, x)))
        assert np.allclose(x.grad, 2 * x.data)

    def test_reuse_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ad.backward(ad.tsum(ad.add(x, x)))
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.add(x, x))

    def test_tape_cleared_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.tsum(ad.mul(x, x)))
        assert ad._TAPE == []

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            out = ad.mul(x, x)
        assert not out.requires_grad
        assert ad._TAPE == []


class TestAdamW:
    def test_zero_grad_zero_decay_unchanged(self):
        p = Tensor(np.ones(4), requires_grad=True)
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        p.grad = np.zeros(4)
        opt.step()
        assert np.array_equal(p.data, np.ones(4))

    def test_first_step_magnitude(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = AdamW({"p": p}, lr=0.01, weight_decay=0.0)
        p.grad = np.array([0.5, -2.0, 1.0])
        opt.step()
        # bias correction makes the first update ~ lr * sign(g)
        assert np.allclose(p.data, -0.01 * np.sign(p.grad), atol=1e-6)

    def test_converges_on_quadratic_bowl(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=8)
        w *= 1.0 / np.linalg.norm(w)
        p = Tensor(w, requires_grad=True)
        opt = AdamW({"w": p}, lr=1e-2, weight_decay=0.0)
        for _ in range(500):
            p.grad = 2 * p.data
            opt.step()
        assert np.linalg.norm(p.data) < 1e-2

    def test_decay_shrinks_norm(self):
        p = Tensor(np.full(4, 2.0), requires_grad=True)
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.1)
        norms = [np.linalg.norm(p.data)]
        for _ in range(5):
            p.grad = np.zeros(4)
            opt.step()
            norms.append(np.linalg.norm(p.data))
        assert all(b < a for a, b in zip(norms, norms[1:]))


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        tensors = {
            "a.weight": rng.normal(size=(3, 5)),
            "b.bias": rng.normal(size=7),
            "scalar": np.array(3.14159),
        }
        path = tmp_path / "params.bin"
        ad.save_tensors(path, tensors)
        loaded = ad.load_tensors(path)
        assert list(loaded) == list(tensors)
        for k in tensors:
            assert loaded[k].shape == np.asarray(tensors[k]).shape
            assert np.array_equal(
                loaded[k].view(np.uint64), np.asarray(tensors[k]).view(np.uint64)
            )

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            ad.load_tensors(path)

    def test_file_object_round_trip(self):
        buf = io.BytesIO()
        ad.save_tensors(buf, {"x": np.arange(4.0)})
        buf.seek(0)
        assert np.array_equal(ad.load_tensors(buf)["x"], np.arange(4.0))
