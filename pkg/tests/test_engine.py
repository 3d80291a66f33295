"""Engine tests: primitive-op values, gradients vs central differences,
record/replay semantics, and the checkpoint format."""

import numpy as np
import pytest

from nielab import engine
from nielab.engine import DTensor, EngineError, Record, ShapeMismatch, grad_check
from nielab.checkpoint import load_params, save_params


def _rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


class TestPrimitiveValues:
    def test_matmul_identity(self):
        a = DTensor([[1.0, 2.0], [3.0, 4.0]])
        eye = DTensor(np.eye(2))
        out = engine.matmul(a, eye)
        np.testing.assert_array_equal(out.data, a.data)

    def test_softmax_symmetry(self):
        out = engine.softmax(DTensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_tanh_at_origin(self):
        out = engine.tanh(DTensor([0.0]))
        np.testing.assert_array_equal(out.data, [0.0])

    def test_broadcast_limited_to_size_one(self):
        a = DTensor(np.ones((3, 2)))
        b = DTensor(np.ones((1, 2)))
        assert engine.add(a, b).shape == (3, 2)
        with pytest.raises(ShapeMismatch):
            engine.add(a, DTensor(np.ones((2,))))   # rank promotion refused
        with pytest.raises(ShapeMismatch):
            engine.add(a, DTensor(np.ones((3, 3))))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeMismatch, match=r"\(3, 2\).*\(4, 3\)"):
            engine.matmul(DTensor(np.ones((3, 2))), DTensor(np.ones((4, 3))))

    def test_empty_tensor_rejected(self):
        with pytest.raises(EngineError, match="empty"):
            engine.tanh(DTensor(np.ones((0, 2))))

    def test_concat_and_slice(self):
        a = DTensor(np.arange(6.0).reshape(2, 3))
        b = DTensor(np.arange(4.0).reshape(2, 2))
        merged = engine.concat([a, b], axis=1)
        assert merged.shape == (2, 5)
        back = engine.tslice(merged, (slice(None), slice(0, 3)))
        np.testing.assert_array_equal(back.data, a.data)

    def test_transpose_swaps_last_two(self):
        a = DTensor(np.arange(24.0).reshape(2, 3, 4))
        out = engine.transpose(a)
        assert out.shape == (2, 4, 3)
        np.testing.assert_array_equal(out.data, np.swapaxes(a.data, -1, -2))


class TestBackwardContract:
    def test_square_sum(self):
        """d/dw sum(w * w) = 2w."""
        w = DTensor([3.0])
        with Record() as rec:
            rec.watch(w)
            loss = engine.tsum(engine.mul(w, w))
        grads = rec.backward(loss)
        np.testing.assert_allclose(rec.grad(grads, w).data, [6.0])

    def test_mean_tanh(self):
        """tanh'(0) = 1, mean divides by the entry count."""
        w = DTensor([0.0, 0.0])
        with Record() as rec:
            rec.watch(w)
            loss = engine.tmean(engine.tanh(w))
        grads = rec.backward(loss)
        np.testing.assert_allclose(rec.grad(grads, w).data, [0.5, 0.5])

    def test_unused_parameter_gets_zero_gradient(self):
        w = DTensor([1.0, 2.0])
        unused = DTensor(np.ones((3, 3)))
        with Record() as rec:
            rec.watch(w)
            rec.watch(unused)
            loss = engine.tsum(engine.mul(w, w))
        grads = rec.backward(loss)
        np.testing.assert_array_equal(rec.grad(grads, unused).data, np.zeros((3, 3)))

    def test_non_scalar_loss_rejected(self):
        w = DTensor([1.0, 2.0])
        with Record() as rec:
            rec.watch(w)
            out = engine.mul(w, w)
        with pytest.raises(EngineError, match="scalar"):
            rec.backward(out)

    def test_backward_twice_rejected(self):
        w = DTensor([1.0])
        with Record() as rec:
            rec.watch(w)
            loss = engine.tsum(w)
        rec.backward(loss)
        with pytest.raises(EngineError):
            rec.backward(loss)

    def test_each_op_appends_one_node(self):
        a = DTensor([1.0, 2.0])
        b = DTensor([3.0, 4.0])
        with Record() as rec:
            rec.watch(a)
            rec.watch(b)
            before = len(rec.nodes)
            engine.add(a, b)
            assert len(rec.nodes) == before + 1
            engine.mul(a, b)
            assert len(rec.nodes) == before + 2

    def test_tensor_outside_recording_has_no_node(self):
        out = engine.add(DTensor([1.0]), DTensor([2.0]))
        assert out.node_id is None

    def test_backward_linearity(self):
        """Gradient of a sum of two subgraphs equals the sum of gradients."""
        w = DTensor(_rand((4,), seed=1))

        def build(rec):
            rec.watch(w)
            f = engine.tsum(engine.mul(w, w))
            g = engine.tsum(engine.tanh(w))
            return f, g

        with Record() as rec:
            f, g = build(rec)
            total = engine.add(f, g)
        g_total = rec.backward(total)[rec._lifted[id(w)]].data

        with Record() as rec1:
            f, _ = build(rec1)
        gf = rec1.backward(f)[rec1._lifted[id(w)]].data
        with Record() as rec2:
            _, g = build(rec2)
        gg = rec2.backward(g)[rec2._lifted[id(w)]].data
        np.testing.assert_allclose(g_total, gf + gg, rtol=1e-12)

    def test_replay_is_bitwise(self):
        w = DTensor(_rand((6, 3), seed=2))
        x = DTensor(_rand((3, 4), seed=3))
        with Record() as rec:
            rec.watch(w)
            h = engine.tanh(engine.matmul(w, x))
            out = engine.tmean(engine.exp(h))
        replayed = rec.replay(out)
        assert np.array_equal(replayed, out.data)


# One scalar-loss builder per primitive op; gradients must match central
# finite differences to < 1e-6 on well-conditioned random inputs.
def _loss_builders():
    r = lambda s, seed: DTensor(_rand(s, seed))
    return {
        "add": lambda p: engine.tsum(engine.mul(engine.add(p, r((3, 4), 1)), r((3, 4), 2))),
        "add_broadcast": lambda p: engine.tsum(engine.mul(engine.add(engine.reshape(p, (1, 12)), r((5, 12), 1)), r((5, 12), 2))),
        "sub": lambda p: engine.tsum(engine.mul(engine.sub(r((3, 4), 1), p), r((3, 4), 2))),
        "mul": lambda p: engine.tsum(engine.mul(engine.mul(p, r((3, 4), 1)), r((3, 4), 2))),
        "smul": lambda p: engine.tsum(engine.smul(p, 1.7)),
        "matmul": lambda p: engine.tsum(engine.mul(engine.matmul(engine.reshape(p, (3, 4)), r((4, 2), 1)), r((3, 2), 2))),
        "matmul_batched": lambda p: engine.tsum(engine.matmul(engine.reshape(p, (2, 2, 3)), r((2, 3, 2), 1))),
        "matmul_bcast_lead": lambda p: engine.tsum(engine.matmul(engine.reshape(p, (1, 3, 4)), r((2, 4, 2), 1))),
        "tanh": lambda p: engine.tsum(engine.mul(engine.tanh(p), r((3, 4), 1))),
        "relu": lambda p: engine.tsum(engine.mul(engine.relu(p), r((3, 4), 1))),
        "exp": lambda p: engine.tsum(engine.mul(engine.exp(p), r((3, 4), 1))),
        "softmax": lambda p: engine.tsum(engine.mul(engine.softmax(p), r((3, 4), 1))),
        "softmax_masked": lambda p: engine.tsum(engine.mul(
            engine.softmax(p, mask=np.array([[1, 1, 0, 1]] * 3, dtype=np.uint8)), r((3, 4), 1))),
        "concat": lambda p: engine.tsum(engine.mul(engine.concat([p, r((3, 4), 1)], axis=1), r((3, 8), 2))),
        "sum_axis": lambda p: engine.tsum(engine.mul(engine.tsum(p, axis=0), r((4,), 1))),
        "mean_axis": lambda p: engine.tsum(engine.mul(engine.tmean(p, axis=1, keepdims=True), r((3, 1), 1))),
        "slice": lambda p: engine.tsum(engine.mul(engine.tslice(p, (slice(1, 3), slice(0, 2))), r((2, 2), 1))),
        "reshape": lambda p: engine.tsum(engine.mul(engine.reshape(p, (4, 3)), r((4, 3), 1))),
        "transpose": lambda p: engine.tsum(engine.mul(engine.transpose(p), r((4, 3), 1))),
        "interp": lambda p: engine.tsum(engine.mul(
            engine.interp(engine.reshape(p, (1, 6, 2)),
                          np.array([0, 2, 4, 4]), np.array([0.3, 0.0, 0.9, 1.0]), 6),
            r((1, 4, 2), 1))),
        "rowmatvec": lambda p: engine.tsum(engine.mul(
            engine.rowmatvec(engine.reshape(p, (3, 2, 2)), r((2, 3, 2), 1)), r((2, 3, 2), 2))),
    }


@pytest.mark.parametrize("name", sorted(_loss_builders()))
def test_primitive_gradients_match_finite_differences(name):
    build = _loss_builders()[name]
    p = DTensor(_rand((3, 4), seed=7, lo=-0.9, hi=0.9))
    err = grad_check(lambda: build(p), [p], eps=1e-6)
    assert err < 1e-6, f"{name}: finite-difference mismatch {err}"


class TestGradCheckHarness:
    def test_quadratic_is_exact(self):
        p = DTensor(_rand((5,), seed=5))
        err = grad_check(lambda: engine.tsum(engine.mul(p, p)), [p], eps=1e-5)
        assert err < 1e-7

    def test_constant_function_is_zero(self):
        p = DTensor(_rand((4,), seed=6))
        c = DTensor([2.0])
        err = grad_check(lambda: engine.tsum(engine.mul(c, c)), [p], eps=1e-5)
        assert err == 0.0

    def test_attention_block(self):
        from nielab.attention import AttentionModel, MaskSpec, attention_integral, embed_tokens
        from nielab.quadrature import GridFunction
        model = AttentionModel(d=2, coord_dims=1, d_model=8, n_heads=2, seed=9)
        y = GridFunction(np.linspace(0, 1, 4), _rand((4, 2), seed=10))
        tb = embed_tokens(y)

        def fn():
            out = attention_integral(model, tb, MaskSpec("none"))
            return engine.tsum(engine.mul(out, out))

        assert grad_check(fn, model.params(), eps=1e-5) < 1e-4

    def test_eps_must_be_positive(self):
        p = DTensor([1.0])
        with pytest.raises(EngineError):
            grad_check(lambda: engine.tsum(p), [p], eps=0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = {
            "layer.w": DTensor(_rand((4, 3), seed=11)),
            "layer.b": DTensor(_rand((1, 3), seed=12)),
            "scalar": DTensor(np.array(2.5)),
        }
        path = tmp_path / "ckpt.bin"
        save_params(params, path, meta={"kind": "test"})
        loaded, meta = load_params(path)
        assert meta == {"kind": "test"}
        assert list(loaded) == list(params)
        for name in params:
            assert np.array_equal(loaded[name].data, params[name].data)

    def test_header_is_json_line(self, tmp_path):
        import json
        path = tmp_path / "ckpt.bin"
        save_params({"w": DTensor([1.0, 2.0])}, path)
        first = open(path, "rb").readline()
        header = json.loads(first)
        assert header["params"][0]["name"] == "w"
        assert header["params"][0]["shape"] == [2]
        assert header["params"][0]["offset"] == 0
