from unittest import TestCase

import numpy as np

from genmeasures.common import (
    InvalidDatasetError,
    InvalidInputError,
    InvalidLayerIndexError,
    InvalidNetworkError,
    ShapeMismatchError,
)
from genmeasures.network import (
    AvgPool,
    Conv2d,
    Dense,
    Flatten,
    LabeledDataset,
    Network,
    OutputMarginConfig,
    ReLU,
    affine_linear_map,
    aggregate_output_margin,
    cross_entropy,
    forward,
    jacobian_frobenius_sq,
    layer_forward,
    layer_input_vjp,
    logit_margin,
    materialize_conv,
    vjp,
)


def dense(weight, bias=None) -> Dense:
    w = np.asarray(weight, dtype=np.float64)
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, float)
    return Dense(w, b)


def naive_conv(x, kernel, stride, padding):
    c_in, h, w = x.shape
    out_ch, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((out_ch, ho, wo))
    for o in range(out_ch):
        for i in range(ho):
            for j in range(wo):
                r, c = i * stride, j * stride
                patch = xp[:, r : r + kh, c : c + kw]
                out[o, i, j] = np.sum(patch * kernel[o])
    return out


def conv_net(rng: np.random.Generator) -> Network:
    return Network(
        (
            Conv2d(
                rng.standard_normal((3, 2, 3, 3)),
                rng.standard_normal(3),
                stride=1,
                padding=1,
            ),
            ReLU(),
            AvgPool(2, 2),
            Flatten(),
            dense(rng.standard_normal((3, 12)), rng.standard_normal(3)),
        ),
        (2, 4, 4),
        3,
    )


class TestNetwork(TestCase):
    def test_forward_records_activations(self) -> None:
        net = Network(
            (dense([[1, -1], [0, 1]]), ReLU(), dense([[1, 0], [0, 1]])),
            (2,),
            2,
        )
        trace = forward(net, np.array([1.0, 2.0]))
        np.testing.assert_array_equal(trace.pre_activations[0], [-1, 2])
        np.testing.assert_array_equal(trace.activations[0], [1, 2])
        np.testing.assert_array_equal(trace.activations[1], [0, 2])
        np.testing.assert_array_equal(trace.output, [0, 2])
        np.testing.assert_array_equal(trace.activations[2], trace.output)
        self.assertEqual(net.num_affine, 2)
        self.assertEqual(net.width(1), 2)

    def test_two_layer_by_hand(self) -> None:
        net = Network(
            (dense(np.eye(2), [1.0, -1.0]), ReLU(), dense([[1.0, 1.0]])),
            (2,),
            1,
        )
        trace = forward(net, np.zeros(2))
        np.testing.assert_array_equal(trace.activations[1], [1.0, 0.0])
        np.testing.assert_array_equal(trace.output, [1.0])

    def test_linear_jacobian(self) -> None:
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        net = Network((dense(w),), (2,), 2)
        trace = forward(net, np.array([0.3, -0.7]))
        self.assertEqual(jacobian_frobenius_sq(net, trace, "input"), 30.0)
        np.testing.assert_array_equal(
            vjp(net, trace, np.array([0.0, 1.0]), "input"), w[1]
        )

    def test_shape_mismatch_names_layer(self) -> None:
        with self.assertRaises(ShapeMismatchError) as cm:
            Network(
                (dense(np.ones((2, 3))), ReLU(), dense(np.ones((2, 3)))),
                (3,),
                2,
            )
        self.assertEqual(cm.exception.layer_index, 2)
        self.assertEqual(cm.exception.expected, (3,))
        self.assertEqual(cm.exception.found, (2,))

    def test_input_shape_mismatch(self) -> None:
        net = Network((dense(np.eye(2)),), (2,), 2)
        with self.assertRaises(ShapeMismatchError) as cm:
            forward(net, np.ones(3))
        self.assertEqual(cm.exception.layer_index, 0)

    def test_nonfinite_input(self) -> None:
        net = Network((dense(np.eye(2)),), (2,), 2)
        with self.assertRaises(InvalidInputError):
            forward(net, np.array([1.0, np.nan]))

    def test_structure_rules(self) -> None:
        with self.assertRaises(InvalidNetworkError):
            Network((ReLU(), dense(np.eye(2))), (2,), 2)
        with self.assertRaises(InvalidNetworkError):
            Network((dense(np.eye(2)), ReLU()), (2,), 2)
        with self.assertRaises(InvalidNetworkError):
            Network(
                (
                    dense(np.eye(2)),
                    Dense(np.eye(2, dtype=np.float32), np.zeros(2, np.float32)),
                ),
                (2,),
                2,
            )

    def test_invalid_layer_index(self) -> None:
        net = Network((dense(np.eye(2)),), (2,), 2)
        trace = forward(net, np.ones(2))
        with self.assertRaises(InvalidLayerIndexError):
            net.check_affine_index(0)
        with self.assertRaises(InvalidLayerIndexError):
            net.check_affine_index(2)
        with self.assertRaises(InvalidLayerIndexError):
            vjp(net, trace, np.ones(2), 5)

    def test_conv_matches_naive_loops(self) -> None:
        rng = np.random.default_rng(0)
        for stride, padding in ((1, 0), (1, 1), (2, 1), (2, 0)):
            layer = Conv2d(
                rng.standard_normal((3, 2, 3, 3)),
                np.zeros(3),
                stride,
                padding,
            )
            x = rng.standard_normal((2, 5, 5))
            y = layer_forward(layer, x[None], with_bias=False)[0]
            np.testing.assert_allclose(
                y, naive_conv(x, layer.kernel, stride, padding), atol=1e-12
            )
            mat = materialize_conv(layer, (2, 5, 5))
            np.testing.assert_allclose(mat @ x.ravel(), y.ravel(), atol=1e-12)

    def test_conv_forward_matches_materialized_matrix(self) -> None:
        rng = np.random.default_rng(7)
        for _ in range(10):
            c_in, size = int(rng.integers(1, 4)), int(rng.integers(3, 9))
            k = int(rng.integers(1, 4))
            stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
            kernel = rng.standard_normal((2, c_in, k, k))
            layer = Conv2d(kernel, np.zeros(2), stride, padding)
            mat = materialize_conv(layer, (c_in, size, size))
            out = mat.shape[0]
            net = Network(
                (layer, Flatten(), dense(np.eye(out))),
                (c_in, size, size),
                out,
            )
            x = rng.standard_normal((c_in, size, size))
            np.testing.assert_allclose(
                forward(net, x).output, mat @ x.ravel(), atol=1e-10
            )

    def test_positive_homogeneity_without_biases(self) -> None:
        rng = np.random.default_rng(8)
        for _ in range(20):
            net = Network(
                (
                    Conv2d(
                        rng.standard_normal((3, 2, 3, 3)), np.zeros(3), 1, 1
                    ),
                    ReLU(),
                    AvgPool(2, 2),
                    Flatten(),
                    dense(rng.standard_normal((5, 12))),
                    ReLU(),
                    dense(rng.standard_normal((3, 5))),
                ),
                (2, 4, 4),
                3,
            )
            x = rng.standard_normal((2, 4, 4))
            c = float(rng.uniform(0.01, 100.0))
            np.testing.assert_allclose(
                forward(net, c * x).output,
                c * forward(net, x).output,
                rtol=1e-9,
                atol=1e-12 * c,
            )

    def test_conv_transpose_is_adjoint(self) -> None:
        rng = np.random.default_rng(1)
        layer = Conv2d(rng.standard_normal((4, 3, 3, 3)), np.zeros(4), 2, 1)
        in_shape = (3, 7, 6)
        for _ in range(20):
            u = rng.standard_normal((1,) + in_shape)
            au = layer_forward(layer, u, with_bias=False)
            v = rng.standard_normal(au.shape)
            atv = layer_input_vjp(layer, u, v, in_shape)
            lhs = float(np.sum(au * v))
            rhs = float(np.sum(u * atv))
            self.assertAlmostEqual(lhs, rhs, delta=1e-9 * max(1, abs(lhs)))

    def test_vjp_matches_finite_differences(self) -> None:
        rng = np.random.default_rng(2)
        net = conv_net(rng)
        x = rng.standard_normal((2, 4, 4))
        c = rng.standard_normal(3)
        trace = forward(net, x)
        grad = vjp(net, trace, c, "input")
        eps = 1e-6
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = eps
            fd[idx] = (
                c @ forward(net, x + e).output - c @ forward(net, x - e).output
            ) / (2 * eps)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    def test_vjp_batched_rows(self) -> None:
        rng = np.random.default_rng(3)
        net = conv_net(rng)
        trace = forward(net, rng.standard_normal((2, 4, 4)))
        cots = rng.standard_normal((5, 3))
        rows = vjp(net, trace, cots, "input")
        self.assertEqual(rows.shape, (5, 2, 4, 4))
        for k in range(5):
            np.testing.assert_allclose(
                rows[k], vjp(net, trace, cots[k], "input"), atol=1e-12
            )
        # a_1 is the flattened input of the last dense layer
        self.assertEqual(vjp(net, trace, cots, 1).shape, (5, 12))

    def test_jacobian_of_logits_is_identity(self) -> None:
        net = Network((dense([[2.0, 0.0], [0.0, 3.0]]),), (2,), 2)
        trace = forward(net, np.array([1.0, 1.0]))
        self.assertEqual(jacobian_frobenius_sq(net, trace, 1), 2.0)
        self.assertEqual(jacobian_frobenius_sq(net, trace, "input"), 13.0)
        np.testing.assert_array_equal(
            vjp(net, trace, np.array([1.0, -1.0]), 1), [1.0, -1.0]
        )

    def test_affine_linear_map_excludes_bias(self) -> None:
        net = Network(
            (Flatten(), dense([[1.0, 2.0, 3.0, 4.0]] * 2, [5.0, 5.0])),
            (1, 2, 2),
            2,
        )
        v = np.ones((3, 1, 2, 2))
        np.testing.assert_allclose(affine_linear_map(net, 1, v), 10.0)

    def test_output_margins(self) -> None:
        self.assertEqual(logit_margin(np.array([3.0, 1.0, 2.5]), 0), 0.5)
        self.assertEqual(logit_margin(np.array([3.0, 1.0, 2.5]), 1), -2.0)
        self.assertEqual(logit_margin(np.array([0.5, 2.0]), 0), -1.5)
        self.assertEqual(logit_margin(np.full(4, 0.3), 2), 0.0)
        net = Network((dense(np.eye(2)),), (2,), 2)
        data = LabeledDataset(
            np.array([[3.0, 0.0], [0.0, 1.0], [2.0, 0.0], [5.0, 0.0]]),
            np.array([0, 1, 0, 1]),
            2,
        )
        # the last example is misclassified
        self.assertEqual(aggregate_output_margin(net, data), 2.0)
        self.assertEqual(
            aggregate_output_margin(net, data, OutputMarginConfig("min")), 1.0
        )
        self.assertEqual(
            aggregate_output_margin(
                net, data, OutputMarginConfig("mean", correct_only=False)
            ),
            (3 + 1 + 2 - 5) / 4,
        )

    def test_dataset_validation(self) -> None:
        with self.assertRaises(InvalidDatasetError):
            LabeledDataset(np.ones((2, 2)), np.array([0, 2]), 2)
        with self.assertRaises(InvalidDatasetError):
            LabeledDataset(np.ones((0, 2)), np.zeros(0, dtype=int), 2)
        with self.assertRaises(InvalidDatasetError):
            LabeledDataset(np.ones((2, 2)), np.array([0]), 2)

    def test_cross_entropy_gradient(self) -> None:
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 2])
        _, grad = cross_entropy(logits, labels)
        eps = 1e-6
        for idx in np.ndindex(logits.shape):
            e = np.zeros_like(logits)
            e[idx] = eps
            fd = (
                cross_entropy(logits + e, labels)[0]
                - cross_entropy(logits - e, labels)[0]
            ) / (2 * eps)
            self.assertAlmostEqual(grad[idx], fd, delta=1e-7)

    def test_astype(self) -> None:
        net = Network(
            (
                Dense(np.eye(2, dtype=np.float32), np.zeros(2, np.float32)),
            ),
            (2,),
            2,
        )
        self.assertEqual(net.dtype, np.float32)
        self.assertEqual(net.astype(np.float64).dtype, np.float64)
