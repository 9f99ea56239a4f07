import math
from dataclasses import replace
from unittest import TestCase

import numpy as np

from genmeasures.common import (
    DegenerateGradientError,
    InvalidConfigError,
    InvalidInputError,
    NonPositiveMarginError,
)
from genmeasures.margins import (
    MarginSolverConfig,
    PerturbationVector,
    all_layer_margin,
    all_layer_margin_measure,
    competitor_margin,
    input_layer_margin,
    input_layer_margin_measure,
    margin_jacobian,
    margin_subsample,
    perturbed_forward,
    perturbed_loss_grad,
)
from genmeasures.network import (
    Dense,
    LabeledDataset,
    Network,
    ReLU,
    forward,
    logit_margin,
)


def dense(weight, bias=None) -> Dense:
    w = np.asarray(weight, dtype=np.float64)
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, float)
    return Dense(w, b)


def relu_net(seed: int) -> Network:
    rng = np.random.default_rng(seed)
    return Network(
        (
            dense(rng.standard_normal((5, 3)), rng.standard_normal(5)),
            ReLU(),
            dense(rng.standard_normal((4, 5)), rng.standard_normal(4)),
            ReLU(),
            dense(rng.standard_normal((3, 4)), rng.standard_normal(3)),
        ),
        (3,),
        3,
    )


class TestInputLayerMargin(TestCase):
    def test_linear_by_hand(self) -> None:
        net = Network((dense([[1.0, 0.0], [-1.0, 0.0]]),), (2,), 2)
        self.assertEqual(input_layer_margin(net, np.array([1.0, 0.0]), 0), 1.0)

    def test_tie_and_misclassified(self) -> None:
        net = Network((dense(np.zeros((3, 2))),), (2,), 3)
        self.assertEqual(input_layer_margin(net, np.ones(2), 1), 0.0)
        net = Network((dense(np.eye(2)),), (2,), 2)
        self.assertEqual(input_layer_margin(net, np.array([2.0, 1.0]), 1), 0.0)

    def test_taylor_exact_for_linear_net(self) -> None:
        rng = np.random.default_rng(0)
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(4)
        net = Network((dense(w, b),), (3,), 4)
        x = rng.standard_normal(3)
        y = int(np.argmax(w @ x + b))
        margin = input_layer_margin(net, x, y)
        self.assertGreater(margin, 0.0)
        # moving by the margin towards the nearest boundary reaches a tie
        others = [k for k in range(4) if k != y]
        dist = [
            (w[y] @ x + b[y] - w[k] @ x - b[k]) / np.linalg.norm(w[y] - w[k])
            for k in others
        ]
        k = others[int(np.argmin(dist))]
        g = w[y] - w[k]
        x_star = x - margin * g / np.linalg.norm(g)
        logits = forward(net, x_star).output
        self.assertAlmostEqual(logits[y], logits[k], places=10)
        self.assertAlmostEqual(logit_margin(logits, y), 0.0, places=10)

    def test_degenerate_gradients(self) -> None:
        # positive margin but the logits do not depend on the input
        net = Network((dense(np.zeros((2, 2)), [1.0, 0.0]),), (2,), 2)
        with self.assertRaises(DegenerateGradientError):
            input_layer_margin(net, np.ones(2), 0)
        data = LabeledDataset(np.ones((3, 2)), np.zeros(3, dtype=int), 2)
        with self.assertRaises(DegenerateGradientError):
            input_layer_margin_measure(net, data)

    def test_measure_is_median(self) -> None:
        net = Network((dense([[1.0, 0.0], [-1.0, 0.0]]),), (2,), 2)
        data = LabeledDataset(
            np.array([[1.0, 0.0], [3.0, 0.0], [-2.0, 0.0]]),
            np.array([0, 0, 0]),
            2,
        )
        r = input_layer_margin_measure(net, data)
        # margins 1, 3 and 0 (misclassified)
        self.assertEqual(r.value, 1.0)
        self.assertEqual(r.num_examples, 3)
        self.assertEqual(r.num_skipped, 0)

    def test_bad_label(self) -> None:
        net = Network((dense(np.eye(2)),), (2,), 2)
        with self.assertRaises(InvalidInputError):
            input_layer_margin(net, np.ones(2), 2)


class TestAllLayerMargin(TestCase):
    def test_single_layer_closed_form(self) -> None:
        net = Network((dense([[2.0, 0.0], [0.0, 0.0]]),), (2,), 2)
        x = np.array([1.0, 0.0])
        r = all_layer_margin(net, x, 0)
        self.assertTrue(r.feasible)
        self.assertGreaterEqual(r.margin, math.sqrt(2) - 1e-6)
        self.assertLess(abs(r.margin - math.sqrt(2)), 0.05 * math.sqrt(2))
        assert r.perturbation is not None
        self.assertAlmostEqual(r.perturbation.norm, r.margin, places=12)
        logits = perturbed_forward(net, x, r.perturbation.deltas)
        self.assertNotEqual(int(np.argmax(logits)), 0)

    def test_single_affine_layer_instances(self) -> None:
        cfg = MarginSolverConfig(initial_radius=1e4)
        for seed in range(30):
            rng = np.random.default_rng(100 + seed)
            c = int(rng.integers(2, 6))
            d = int(rng.integers(2, 8))
            w = rng.standard_normal((c, d))
            b = rng.standard_normal(c)
            net = Network((dense(w, b),), (d,), c)
            x = rng.standard_normal(d)
            z = w @ x + b
            y = int(np.argmax(z))
            # the best delta is t (e_k - e_y) / sqrt(2) for the runner-up k
            gaps = np.delete(z[y] - z, y)
            optimum = float(np.min(gaps)) / (
                math.sqrt(2) * float(np.linalg.norm(x))
            )
            r = all_layer_margin(net, x, y, cfg)
            self.assertTrue(r.feasible)
            self.assertGreaterEqual(r.margin, optimum - 1e-6)
            self.assertLessEqual(r.margin, 1.05 * optimum)
            assert r.perturbation is not None
            logits = perturbed_forward(net, x, r.perturbation.deltas)
            self.assertNotEqual(int(np.argmax(logits)), y)

    def test_more_steps_or_restarts_never_worse(self) -> None:
        rng = np.random.default_rng(11)
        for seed in range(4):
            net = relu_net(20 + seed)
            x = rng.standard_normal(3)
            y = int(np.argmax(forward(net, x).output))
            base = MarginSolverConfig(max_steps=5, num_restarts=2, seed=seed)
            margins = [
                all_layer_margin(net, x, y, cfg).margin
                for cfg in (
                    base,
                    replace(base, max_steps=10),
                    replace(base, num_restarts=4),
                    replace(base, max_steps=10, num_restarts=4),
                )
            ]
            for better in margins[1:]:
                self.assertLessEqual(better, margins[0] * (1 + 1e-12))
            self.assertLessEqual(margins[3], margins[1] * (1 + 1e-12))
            self.assertLessEqual(margins[3], margins[2] * (1 + 1e-12))

    def test_competitor_margin_by_hand(self) -> None:
        value, cot = competitor_margin(np.array([3.0, 1.0, 2.5]), 0)
        self.assertEqual(value, -0.5)
        np.testing.assert_array_equal(cot, [[-1.0, 0.0, 1.0]])

    def test_misclassified_is_zero(self) -> None:
        net = Network((dense(np.eye(2)),), (2,), 2)
        r = all_layer_margin(net, np.array([1.0, 2.0]), 0)
        self.assertEqual(r.margin, 0.0)
        self.assertTrue(r.feasible)
        assert r.perturbation is not None
        self.assertEqual(r.perturbation.norm, 0.0)

    def test_infeasible_at_initial_radius(self) -> None:
        net = Network((dense([[1000.0, 0.0], [0.0, 0.0]]),), (2,), 2)
        r = all_layer_margin(net, np.array([1.0, 0.0]), 0)
        self.assertFalse(r.feasible)
        self.assertEqual(r.margin, math.inf)
        self.assertIsNone(r.perturbation)

    def test_found_perturbation_misclassifies(self) -> None:
        net = relu_net(1)
        rng = np.random.default_rng(2)
        for _ in range(3):
            x = rng.standard_normal(3)
            y = int(np.argmax(forward(net, x).output))
            r = all_layer_margin(net, x, y, MarginSolverConfig(seed=4))
            if not r.feasible:
                continue
            assert r.perturbation is not None
            self.assertEqual(len(r.perturbation.deltas), 3)
            logits = perturbed_forward(net, x, r.perturbation.deltas)
            self.assertNotEqual(int(np.argmax(logits)), y)
            self.assertGreater(r.margin, 0.0)

    def test_zero_perturbation_is_plain_forward(self) -> None:
        net = relu_net(3)
        x = np.random.default_rng(4).standard_normal(3)
        np.testing.assert_allclose(
            perturbed_forward(net, x, PerturbationVector.zeros(net).deltas),
            forward(net, x).output,
            atol=1e-12,
        )

    def test_loss_gradient_matches_finite_differences(self) -> None:
        net = relu_net(5)
        rng = np.random.default_rng(6)
        x = rng.standard_normal(3)
        deltas = [0.1 * rng.standard_normal(s) for s in ((5,), (4,), (3,))]
        _, grads, _ = perturbed_loss_grad(net, x, 1, deltas)
        eps = 1e-6
        for j, d in enumerate(deltas):
            for k in range(d.size):
                plus = [v.copy() for v in deltas]
                minus = [v.copy() for v in deltas]
                plus[j][k] += eps
                minus[j][k] -= eps
                fd = (
                    perturbed_loss_grad(net, x, 1, plus)[0]
                    - perturbed_loss_grad(net, x, 1, minus)[0]
                ) / (2 * eps)
                self.assertAlmostEqual(grads[j][k], fd, delta=1e-6)

    def test_deterministic(self) -> None:
        net = relu_net(7)
        x = np.random.default_rng(8).standard_normal(3)
        y = int(np.argmax(forward(net, x).output))
        cfg = MarginSolverConfig(seed=2)
        a = all_layer_margin(net, x, y, cfg)
        b = all_layer_margin(net, x, y, cfg)
        self.assertEqual(a.margin, b.margin)
        self.assertEqual(a.steps, b.steps)

    def test_wrong_perturbation_shape(self) -> None:
        net = relu_net(9)
        with self.assertRaises(InvalidInputError):
            perturbed_forward(net, np.ones(3), [np.zeros(5), np.zeros(4)])
        with self.assertRaises(InvalidInputError):
            perturbed_forward(
                net, np.ones(3), [np.zeros(5), np.zeros(3), np.zeros(3)]
            )

    def test_measure_median_with_infeasible(self) -> None:
        net = Network((dense([[1000.0, 0.0], [0.0, 0.0]]),), (2,), 2)
        data = LabeledDataset(
            np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]]),
            np.array([0, 0, 0]),
            2,
        )
        r = all_layer_margin_measure(net, data)
        # one misclassified example (margin 0), two beyond the radius
        self.assertEqual(r.value, math.inf)
        self.assertEqual(r.num_failed, 2)
        self.assertEqual(r.num_examples, 3)

    def test_config_validation(self) -> None:
        with self.assertRaises(InvalidConfigError):
            MarginSolverConfig(max_steps=0)
        with self.assertRaises(InvalidConfigError):
            MarginSolverConfig(initial_radius=-1.0)
        with self.assertRaises(InvalidConfigError):
            MarginSolverConfig(num_bisection_steps=-1)


class TestSubsample(TestCase):
    def test_small_dataset_uses_everything(self) -> None:
        cfg = MarginSolverConfig(sample_size=10)
        np.testing.assert_array_equal(margin_subsample(4, cfg), np.arange(4))

    def test_seeded_sorted_subsample(self) -> None:
        cfg = MarginSolverConfig(sample_size=10, seed=3)
        idx = margin_subsample(100, cfg)
        self.assertEqual(len(idx), 10)
        self.assertEqual(len(set(idx.tolist())), 10)
        self.assertTrue(np.all(np.diff(idx) > 0))
        np.testing.assert_array_equal(idx, margin_subsample(100, cfg))


class TestMarginJacobian(TestCase):
    def test_identity_by_hand(self) -> None:
        net = Network((dense(np.eye(2)),), (2,), 2)
        data = LabeledDataset(np.array([[1.0, 0.0]]), np.array([0]), 2)
        r = margin_jacobian(net, data)
        self.assertAlmostEqual(r.margin_term, 1.0, places=12)
        self.assertAlmostEqual(r.jacobian_term, 0.5, places=12)
        self.assertAlmostEqual(r.value, 1.5, places=12)
        self.assertEqual(r.margin, 1.0)

    def test_non_positive_margin(self) -> None:
        net = Network((dense(np.eye(2)),), (2,), 2)
        data = LabeledDataset(np.array([[0.0, 1.0]]), np.array([0]), 2)
        with self.assertRaises(NonPositiveMarginError):
            margin_jacobian(net, data)
