#!/usr/bin/env python3

import os.path as op
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.append(str(Path(__file__).resolve().parents[1]))

from uailab import checkpoint
from uailab.nn import (
    DimensionError,
    NonFiniteError,
    ParamStore,
    StaleTapeError,
    Tape,
    absolute,
    add,
    clamp,
    columns,
    concat,
    exp,
    forward_mlp,
    init_mlp,
    matmul,
    mean,
    mlp,
    mul,
    mul_mask,
    reduce_sum,
    sigmoid,
    square,
    tanh,
)
from uailab.optim import AdamState, MissingGradientError, adam_step


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar f() w.r.t. x, perturbed in place."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


class TestGradients(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_mlp_gradients(self):
        params = ParamStore()
        layers = ((5, "tanh"), (4, "sigmoid"), (2, "linear"))
        init_mlp(params, "net", 3, layers, self.rng)
        x = self.rng.standard_normal((6, 3))

        def loss_value():
            tape = Tape()
            return mean(square(mlp(params, "net", layers, tape.constant(x)))).item()

        tape = Tape()
        loss = mean(square(mlp(params, "net", layers, tape.constant(x))))
        params.zero_grad()
        tape.backward(loss)
        for name in params:
            expected = numeric_grad(loss_value, params.params[name])
            np.testing.assert_allclose(params.grads[name], expected, rtol=1e-5, atol=1e-8)

    def test_input_gradient(self):
        a = self.rng.standard_normal((3, 4))
        w = self.rng.standard_normal((4, 2))

        def loss_value():
            tape = Tape()
            return reduce_sum(exp(matmul(tape.constant(a), tape.constant(w)))).item()

        tape = Tape()
        x = tape.watch(a)
        loss = reduce_sum(exp(matmul(x, tape.constant(w))))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, numeric_grad(loss_value, a), rtol=1e-5)

    def test_concat_columns(self):
        a = self.rng.standard_normal((2, 3))
        b = self.rng.standard_normal((2, 2))
        tape = Tape()
        ta, tb = tape.watch(a), tape.watch(b)
        joined = concat([ta, tb])
        self.assertEqual(joined.shape, (2, 5))
        loss = reduce_sum(mul(columns(joined, 1, 4), columns(joined, 1, 4)))
        tape.backward(loss)
        expected_a = np.zeros_like(a)
        expected_a[:, 1:] = 2 * a[:, 1:]
        expected_b = np.zeros_like(b)
        expected_b[:, :1] = 2 * b[:, :1]
        np.testing.assert_allclose(ta.grad, expected_a)
        np.testing.assert_allclose(tb.grad, expected_b)

    def test_mask_blocks_gradient(self):
        tape = Tape()
        x = tape.watch(np.ones((3, 2)))
        loss = reduce_sum(mul_mask(tanh(x), np.array([1.0, 0.0, 1.0])))
        tape.backward(loss)
        self.assertTrue(np.all(x.grad[1] == 0.0))
        self.assertTrue(np.all(x.grad[0] != 0.0))

    def test_clamp_gradient(self):
        tape = Tape()
        x = tape.watch(np.array([[-12.0, 0.5, 11.0]]))
        tape.backward(reduce_sum(clamp(x, -10.0, 10.0)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_abs_and_sum_axis(self):
        tape = Tape()
        x = tape.watch(np.array([[-2.0, 3.0], [1.0, -1.0]]))
        col = reduce_sum(absolute(x), axis=0)
        np.testing.assert_array_equal(col.data, [3.0, 4.0])
        tape.backward(reduce_sum(col))
        np.testing.assert_array_equal(x.grad, [[-1.0, 1.0], [1.0, -1.0]])

    def test_shared_subexpression(self):
        # y = s + s with s = sigmoid(x): dy/dx = 2 s (1 - s)
        tape = Tape()
        x = tape.watch(np.array([[0.3]]))
        s = sigmoid(x)
        tape.backward(reduce_sum(add(s, s)))
        sv = 1 / (1 + np.exp(-0.3))
        self.assertAlmostEqual(float(x.grad[0, 0]), 2 * sv * (1 - sv), places=12)


class TestErrors(unittest.TestCase):

    def test_shape_mismatch(self):
        tape = Tape()
        with self.assertRaises(DimensionError):
            add(tape.constant(np.ones((2, 3))), tape.constant(np.ones((3, 2))))
        with self.assertRaises(DimensionError):
            matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))

    def test_layer_mismatch_names_layer(self):
        params = ParamStore()
        init_mlp(params, "enc", 4, ((3, "relu"),), np.random.default_rng(0))
        with self.assertRaisesRegex(DimensionError, "enc.0"):
            forward_mlp(params, "enc", ((3, "relu"),), np.ones((1, 5)))

    def test_non_scalar_backward(self):
        tape = Tape()
        x = tape.watch(np.ones((2, 2)))
        with self.assertRaises(DimensionError):
            tape.backward(tanh(x))

    def test_non_finite(self):
        tape = Tape()
        with np.errstate(over="ignore"):
            with self.assertRaises(NonFiniteError):
                exp(tape.constant(np.array([[1000.0]])))
        with self.assertRaises(NonFiniteError):
            tape.constant(np.array([np.nan]))

    def test_stale_tape(self):
        params = ParamStore()
        layers = ((1, "linear"),)
        init_mlp(params, "lin", 2, layers, np.random.default_rng(0))
        tape = Tape()
        loss = mean(square(mlp(params, "lin", layers, tape.constant(np.ones((3, 2))))))
        params.zero_grad()
        adam_step(params, AdamState())
        with self.assertRaises(StaleTapeError):
            tape.backward(loss)

    def test_missing_gradient(self):
        params = ParamStore()
        params.add("w", np.ones(3))
        with self.assertRaises(MissingGradientError) as cm:
            adam_step(params, AdamState())
        self.assertIn('"w"', str(cm.exception))


class TestParams(unittest.TestCase):

    def test_initializers(self):
        params = ParamStore()
        init_mlp(params, "id", 4, ((4, "linear"),), np.random.default_rng(0), init="identity")
        out, _ = forward_mlp(params, "id", ((4, "linear"),), np.arange(4.0))
        np.testing.assert_array_equal(out.data, [[0.0, 1.0, 2.0, 3.0]])

        params = ParamStore()
        init_mlp(params, "z", 3, ((2, "relu"), (1, "linear")), np.random.default_rng(0), init="zero")
        self.assertTrue(all(not v.any() for v in params.params.values()))

    def test_he_uniform_bounds(self):
        params = ParamStore()
        init_mlp(params, "h", 24, ((50, "relu"),), np.random.default_rng(3))
        self.assertLessEqual(np.abs(params["h.0.weight"]).max(), np.sqrt(6 / 24))
        self.assertFalse(params["h.0.bias"].any())

    def test_adam_descends(self):
        params = ParamStore()
        params.add("x", np.array([3.0, -2.0]))
        state = AdamState(lr=0.1)
        for _ in range(300):
            tape = Tape()
            loss = reduce_sum(square(tape.param(params, "x")))
            params.zero_grad()
            tape.backward(loss)
            adam_step(params, state)
        self.assertLess(np.abs(params["x"]).max(), 0.1)
        self.assertEqual(state.step, 300)
        self.assertEqual(params.version, 300)

    def test_adam_subset(self):
        params = ParamStore()
        params.add("a.w", np.ones(2))
        params.add("b.w", np.ones(2))
        params.zero_grad()
        params.grads["a.w"] = np.ones(2)
        adam_step(params, AdamState(lr=0.5), params.names("a."))
        self.assertTrue(np.all(params["a.w"] < 1.0))
        np.testing.assert_array_equal(params["b.w"], np.ones(2))

    def test_load_state_dict_strict(self):
        params = ParamStore()
        params.add("w", np.zeros(2))
        with self.assertRaises(DimensionError):
            params.load_state_dict({"v": np.zeros(2)})


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.root = tempfile.TemporaryDirectory()
        self.file = op.join(self.root.name, "model.ckpt")

    def tearDown(self):
        self.root.cleanup()

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(1)
        arrays = {
            "w": rng.standard_normal((3, 4)),
            "b": rng.standard_normal(4),
            "s": np.array(np.pi),
            "tiny": np.array([5e-324, -0.0, 1e308]),
        }
        checkpoint.save(self.file, arrays, {"epochs": 3, "curve": [1.5, 0.25]})
        loaded, meta = checkpoint.load(self.file)
        self.assertEqual(list(loaded), list(arrays))
        for k, a in arrays.items():
            self.assertEqual(loaded[k].shape, np.shape(a))
            self.assertEqual(loaded[k].tobytes(), np.asarray(a, dtype="<f8").tobytes())
        self.assertEqual(meta, {"epochs": 3, "curve": [1.5, 0.25]})

    def test_deterministic_bytes(self):
        arrays = {"w": np.arange(6.0).reshape(2, 3)}
        other = op.join(self.root.name, "other.ckpt")
        checkpoint.save(self.file, arrays, {"seed": 1})
        checkpoint.save(other, arrays, {"seed": 1})
        with open(self.file, "rb") as f, open(other, "rb") as g:
            self.assertEqual(f.read(), g.read())

    def test_bad_magic(self):
        with open(self.file, "wb") as f:
            f.write(b"NOTACHECKPOINT")
        with self.assertRaises(checkpoint.CheckpointError):
            checkpoint.load(self.file)

    def test_truncated_payload(self):
        checkpoint.save(self.file, {"w": np.ones(10)})
        with open(self.file, "rb") as f:
            data = f.read()
        with open(self.file, "wb") as f:
            f.write(data[:-8])
        with self.assertRaises(checkpoint.CheckpointError):
            checkpoint.load(self.file)


if __name__ == "__main__":
    unittest.main()
