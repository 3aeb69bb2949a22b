import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from main.exceptions import (
    ContractError,
    DimensionError,
    DomainError,
    InputError,
    TensorIndexError,
)

from . import ops
from .gradcheck import grad_check
from .io import read_tensor, write_tensor
from .nn import Linear, Module
from .tensor import Tape, Tensor, backward, corrupt_backward, current_tape


def matmul_oracle(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            total = 0.0
            for k in range(a.shape[1]):
                total += a[i, k] * b[k, j]
            out[i, j] = total
    return out


def conv2d_oracle(x, w, b, stride, padding):
    c_in, h, width = x.shape
    c_out, _, kh, kw = w.shape
    padded = np.zeros((c_in, h + 2 * padding, width + 2 * padding))
    padded[:, padding : padding + h, padding : padding + width] = x
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for y in range(out_h):
            for x_ in range(out_w):
                total = b[o]
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            total += padded[c, y * stride + i, x_ * stride + j] * w[o, c, i, j]
                out[o, y, x_] = total
    return out


def transposed_oracle(x, w, stride):
    c_in, h, width = x.shape
    _, c_out, kh, kw = w.shape
    out = np.zeros((c_out, (h - 1) * stride + kh, (width - 1) * stride + kw))
    for c in range(c_in):
        for o in range(c_out):
            for y in range(h):
                for x_ in range(width):
                    for i in range(kh):
                        for j in range(kw):
                            out[o, y * stride + i, x_ * stride + j] += x[c, y, x_] * w[c, o, i, j]
    return out


class ElementwiseTests(SimpleTestCase):
    def test_add_and_relu(self):
        np.testing.assert_array_equal(ops.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
        np.testing.assert_array_equal(ops.elementwise("relu", Tensor([-1, 0, 2])).data, [0, 0, 2])

    def test_scalar_operand_broadcasts(self):
        np.testing.assert_array_equal((Tensor([1.0, 2.0]) * 3).data, [3.0, 6.0])
        np.testing.assert_array_equal((1.0 - Tensor([1.0, 2.0])).data, [0.0, -1.0])

    def test_shape_mismatch_is_a_dimension_error(self):
        with self.assertRaises(DimensionError):
            ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_division_by_exact_zero(self):
        with self.assertRaises(DomainError):
            ops.div(Tensor([1.0, 2.0]), Tensor([1.0, 0.0]))

    def test_mul_gradient_matches_central_differences(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        error = grad_check(lambda x, y: ops.sum(x * y * x), [a, b])
        self.assertLess(error, 1e-6)

    def test_broadcast_gradient_is_summed_back(self):
        rng = np.random.default_rng(1)
        x, bias = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 1, 1))
        self.assertLess(grad_check(lambda a, b: ops.sum((a + b) * (a - b)), [x, bias]), 1e-6)

    def test_forward_stays_finite(self):
        x = Tensor(np.array([-800.0, 0.0, 800.0]))
        for out in (ops.softplus(x), ops.softmax(x), ops.relu(x)):
            self.assertTrue(ops.is_finite(out))


class MatmulTests(SimpleTestCase):
    def test_identity_and_hand_example(self):
        b = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
        out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matches_loop_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            m, k, n = rng.integers(1, 17, size=3)
            a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
            np.testing.assert_allclose(
                ops.matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b), atol=1e-12
            )

    def test_inner_dimension_mismatch(self):
        with self.assertRaises(DimensionError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        self.assertLess(grad_check(lambda x, y: ops.sum(ops.matmul(x, y) * ops.matmul(x, y)), [a, b]), 1e-6)

    def test_batched_with_shared_matrix(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        self.assertLess(grad_check(lambda x, y: ops.sum(ops.relu(ops.matmul(x, y))), [a, b]), 1e-5)


class SoftmaxTests(SimpleTestCase):
    def test_examples(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(ops.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(
            ops.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-12
        )

    def test_slices_sum_to_one_and_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6)) * 5
        out = ops.softmax(Tensor(x), axis=1).data
        self.assertTrue(np.all(out > 0))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(ops.softmax(Tensor(x + 17.5), axis=1).data, out, atol=1e-12)

    def test_mask_zeroes_excluded_entries(self):
        mask = ~np.eye(3, dtype=bool)
        out = ops.softmax(Tensor(np.zeros((3, 3))), axis=1, mask=mask).data
        np.testing.assert_array_equal(np.diag(out), 0.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_composite_gradient(self):
        rng = np.random.default_rng(6)
        x, target = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        error = grad_check(lambda a: ops.sum(ops.softmax(a, axis=1) * Tensor(target)), [x])
        self.assertLess(error, 1e-6)


class ConvolutionTests(SimpleTestCase):
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 6))
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_counts_window(self):
        out = ops.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
        self.assertEqual(out.shape, (1, 3, 3))
        np.testing.assert_array_equal(out.data, 9.0)

    def test_matches_loop_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            c_in, c_out = rng.integers(1, 4, size=2)
            h, w = rng.integers(4, 10, size=2)
            k = int(rng.integers(1, 4))
            stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
            x = rng.normal(size=(c_in, h, w))
            kernels = rng.normal(size=(c_out, c_in, k, k))
            bias = rng.normal(size=c_out)
            out = ops.conv2d(Tensor(x), Tensor(kernels), Tensor(bias), stride, padding)
            np.testing.assert_allclose(
                out.data, conv2d_oracle(x, kernels, bias, stride, padding), atol=1e-12
            )

    def test_kernel_larger_than_padded_input(self):
        with self.assertRaises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding=1)

    def test_conv2d_gradients(self):
        rng = np.random.default_rng(7)
        x, w, b = rng.normal(size=(2, 6, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        error = grad_check(
            lambda a, k, c: ops.sum(ops.softplus(ops.conv2d(a, k, c, stride=2, padding=1))),
            [x, w, b],
        )
        self.assertLess(error, 1e-5)

    def test_depthwise_separable_identity_and_shape(self):
        x = np.random.default_rng(1).normal(size=(8, 16, 16))
        identity = ops.depthwise_separable_conv2d(
            Tensor(x), Tensor(np.ones((8, 1, 1, 1))), Tensor(np.eye(8)[:, :, None, None])
        )
        np.testing.assert_array_equal(identity.data, x)
        strided = ops.depthwise_separable_conv2d(
            Tensor(x),
            Tensor(np.ones((8, 1, 3, 3))),
            Tensor(np.eye(8)[:, :, None, None]),
            stride=4,
            padding=1,
        )
        self.assertEqual(strided.shape, (8, 4, 4))

    def test_depthwise_separable_equals_two_generic_convolutions(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 7, 6))
        depthwise = rng.normal(size=(3, 1, 3, 3))
        pointwise = rng.normal(size=(4, 3, 1, 1))
        block_diagonal = np.zeros((3, 3, 3, 3))
        for c in range(3):
            block_diagonal[c, c] = depthwise[c, 0]
        expected = conv2d_oracle(
            conv2d_oracle(x, block_diagonal, np.zeros(3), 2, 1), pointwise, np.zeros(4), 1, 0
        )
        out = ops.depthwise_separable_conv2d(
            Tensor(x), Tensor(depthwise), Tensor(pointwise), stride=2, padding=1
        )
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_depthwise_channel_mismatch(self):
        with self.assertRaises(DimensionError):
            ops.depthwise_separable_conv2d(
                Tensor(np.ones((3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))), Tensor(np.ones((2, 2, 1, 1)))
            )

    def test_depthwise_gradients(self):
        rng = np.random.default_rng(8)
        x, dw, pw = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(3, 2, 1, 1))
        error = grad_check(
            lambda a, d, p: ops.sum(ops.relu(ops.depthwise_separable_conv2d(a, d, p, 2, 1))),
            [x, dw, pw],
        )
        self.assertLess(error, 1e-5)

    def test_transposed_identity_and_shape(self):
        x = np.random.default_rng(3).normal(size=(2, 4, 4))
        unit = np.eye(2)[:, :, None, None]
        np.testing.assert_array_equal(ops.transposed_conv2d(Tensor(x), Tensor(unit)).data, x)
        out = ops.transposed_conv2d(Tensor(x), Tensor(np.ones((2, 3, 4, 4))), stride=4)
        self.assertEqual(out.shape, (3, 16, 16))

    def test_transposed_matches_oracle_and_crops(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(2, 3, 4))
            w = rng.normal(size=(2, 3, 3, 3))
            stride = int(rng.integers(1, 4))
            expected = transposed_oracle(x, w, stride)
            np.testing.assert_allclose(
                ops.transposed_conv2d(Tensor(x), Tensor(w), stride=stride).data, expected, atol=1e-12
            )
            cropped = ops.transposed_conv2d(
                Tensor(x), Tensor(w), stride=stride, output_size=(expected.shape[1] - 1, expected.shape[2])
            )
            np.testing.assert_allclose(cropped.data, expected[:, :-1, :], atol=1e-12)

    def test_transposed_gradients(self):
        rng = np.random.default_rng(9)
        x, w, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 2, 2, 2)), rng.normal(size=2)
        error = grad_check(
            lambda a, k, c: ops.sum(ops.softplus(ops.transposed_conv2d(a, k, c, stride=2, output_size=(5, 6)))),
            [x, w, b],
        )
        self.assertLess(error, 1e-6)


class PlumbingTests(SimpleTestCase):
    def test_concat_and_gather(self):
        np.testing.assert_array_equal(ops.concat([Tensor([1.0]), Tensor([2.0])], axis=0).data, [1, 2])
        np.testing.assert_array_equal(ops.gather_rows(Tensor(np.eye(3)), [2, 0]).data, np.eye(3)[[2, 0]])

    def test_gather_out_of_range(self):
        with self.assertRaises(TensorIndexError):
            ops.gather_rows(Tensor(np.eye(3)), [3])
        with self.assertRaises(IndexError):
            ops.gather_rows(Tensor(np.eye(3)), [-1])

    def test_gather_backward_accumulates_duplicates(self):
        with Tape() as tape:
            x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
            loss = ops.sum(ops.gather_rows(x, [1, 1, 2]))
            grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x], [[0, 0], [2, 2], [1, 1]])
        rng = np.random.default_rng(0)
        weights = rng.normal(size=(4, 2))
        error = grad_check(
            lambda a: ops.sum(ops.gather_rows(a, [0, 2, 2, 1]) * Tensor(weights) * ops.gather_rows(a, [0, 2, 2, 1])),
            [rng.normal(size=(3, 2))],
        )
        self.assertLess(error, 1e-6)

    def test_concat_dimension_mismatch(self):
        with self.assertRaises(DimensionError):
            ops.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)

    def test_reshape_transpose_getitem_gradients(self):
        rng = np.random.default_rng(1)
        error = grad_check(
            lambda a: ops.sum(ops.transpose(ops.reshape(a, (3, 4)), (1, 0))[::2, 1:] * a[:2, :2]),
            [rng.normal(size=(2, 6))],
        )
        self.assertLess(error, 1e-6)

    def test_scatter_rows_is_gather_adjoint(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
        indices = [4, 0, 4]
        lhs = np.sum(ops.scatter_rows(Tensor(x), indices, 5).data * y)
        rhs = np.sum(x * ops.gather_rows(Tensor(y), indices).data)
        self.assertAlmostEqual(lhs, rhs, places=12)


class BackwardTests(SimpleTestCase):
    def test_sum_gives_ones(self):
        with Tape():
            x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
            grads = backward(ops.sum(x))
        np.testing.assert_array_equal(grads[x], np.ones((2, 3, 4)))

    def test_square_gradient(self):
        with Tape():
            x = Tensor([1.0, 2.0], requires_grad=True)
            grads = backward(ops.sum(x * x))
        np.testing.assert_array_equal(grads[x], [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        with Tape() as tape:
            x = Tensor([1.0, 2.0], requires_grad=True)
            with self.assertRaises(ContractError):
                tape.backward(x * 2)

    def test_tape_order_and_single_visit(self):
        with Tape() as tape:
            x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
            y = ops.relu(x) * x
            loss = ops.sum(y + y)
        for node_id, node in enumerate(tape.nodes):
            for tensor in node.inputs:
                if tensor.node_id is not None:
                    self.assertLess(tensor.node_id, node_id)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x], [4.0, 0.0, 12.0])

    def test_every_leaf_gets_a_gradient_of_its_own_shape(self):
        layer = Linear(3, 2, np.random.default_rng(0))
        with Tape() as tape:
            loss = ops.sum(layer(Tensor(np.ones((4, 3)))))
            grads = tape.backward(loss)
        for name, param in layer.named_parameters():
            self.assertEqual(grads[param].shape, param.shape, name)

    def test_tensors_are_immutable(self):
        x = Tensor([1.0, 2.0])
        with self.assertRaises(ValueError):
            x.data[0] = 5.0

    def test_nothing_is_recorded_outside_a_tape(self):
        self.assertIsNone(current_tape())
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(3):
            y = ops.sum(x * x)
            self.assertIsNone(y.node_id)
            self.assertFalse(y.requires_grad)
        self.assertIsNone(current_tape())
        with self.assertRaises(ContractError):
            backward(y)

    def test_item_needs_a_single_element(self):
        self.assertEqual(Tensor([[2.5]]).item(), 2.5)
        with self.assertRaises(ContractError):
            Tensor([1.0, 2.0]).item()


class GradCheckTests(SimpleTestCase):
    def test_linear_function_is_near_exact(self):
        coefficients = np.arange(1.0, 7.0).reshape(2, 3)
        error = grad_check(lambda a: ops.sum(a * Tensor(coefficients)), [np.ones((2, 3))])
        self.assertLess(error, 1e-7)

    def test_relu_kink_is_excluded(self):
        error = grad_check(lambda a: ops.sum(ops.relu(a)), [np.array([0.0, 1.0, -1.0])])
        self.assertLess(error, 1e-7)

    def test_non_scalar_function_rejected(self):
        with self.assertRaises(ContractError):
            grad_check(lambda a: a * 2, [np.ones(3)])

    def test_corrupted_backward_rule_is_caught(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        with corrupt_backward("matmul"):
            error = grad_check(lambda x, y: ops.sum(ops.matmul(x, y)), [a, b])
        self.assertGreater(error, 0.1)


class ModuleTests(SimpleTestCase):
    def test_bind_replaces_parameters_without_touching_original(self):
        class Pair(Module):
            def __init__(self, rng):
                self.layers = [Linear(2, 2, rng), Linear(2, 1, rng)]

        pair = Pair(np.random.default_rng(0))
        names = list(pair.parameters())
        self.assertEqual(names, ["layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"])
        replaced = pair.bind({"layers.1.bias": Tensor([5.0], requires_grad=True)})
        self.assertEqual(replaced.parameters()["layers.1.bias"].data[0], 5.0)
        self.assertEqual(pair.parameters()["layers.1.bias"].data[0], 0.0)


class TensorFileTests(SimpleTestCase):
    def test_roundtrip_and_header(self):
        value = np.random.default_rng(0).normal(size=(2, 3, 4))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "x.dtns"
            write_tensor(path, Tensor(value))
            raw = path.read_bytes()
            self.assertEqual(raw[:4], b"DTNS")
            self.assertEqual(len(raw), 4 + 4 + 3 * 4 + value.size * 8)
            np.testing.assert_array_equal(read_tensor(path).data, value)

    def test_bad_magic(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.dtns"
            path.write_bytes(b"XXXX\x00\x00\x00\x00")
            with self.assertRaises(InputError):
                read_tensor(path)
