from unittest import TestCase

import numpy as np

from genmeasures.common import InvalidConfigError
from genmeasures.network import Dense, ReLU
from genmeasures.zoo import (
    SyntheticTaskSpec,
    TrainConfig,
    ZooSweep,
    build_default_zoo,
    build_zoo,
    default_zoo_sweep,
    generate_task,
    init_mlp,
    train_model,
)


class TestTasks(TestCase):
    def test_blobs_are_linearly_separable(self) -> None:
        task = generate_task(SyntheticTaskSpec())
        # class 0 sits at +3 on every coordinate, class 1 at -3
        pred = (task.test.inputs.sum(axis=1) < 0).astype(np.int64)
        self.assertGreaterEqual(np.mean(pred == task.test.labels), 0.99)
        self.assertEqual(task.train.inputs.dtype, np.float32)
        self.assertEqual(task.train.inputs.shape, (128, 16))

    def test_no_label_noise(self) -> None:
        task = generate_task(SyntheticTaskSpec())
        np.testing.assert_array_equal(
            task.train.labels, task.clean_train_labels
        )

    def test_label_noise_changes_exact_count(self) -> None:
        task = generate_task(
            SyntheticTaskSpec(num_classes=3, label_noise_fraction=0.25)
        )
        changed = task.train.labels != task.clean_train_labels
        self.assertEqual(int(changed.sum()), 32)

    def test_random_label_fraction(self) -> None:
        task = generate_task(
            SyntheticTaskSpec(
                generator="random-label-fraction", label_noise_fraction=1.0
            )
        )
        changed = task.train.labels != task.clean_train_labels
        # redrawn labels may land on the clean label again
        self.assertGreater(int(changed.sum()), 0)
        self.assertLess(int(changed.sum()), 128)

    def test_deterministic(self) -> None:
        spec = SyntheticTaskSpec(generator="two-spirals", seed=5)
        a = generate_task(spec)
        b = generate_task(spec)
        np.testing.assert_array_equal(a.train.inputs, b.train.inputs)
        np.testing.assert_array_equal(a.test.labels, b.test.labels)
        c = generate_task(SyntheticTaskSpec(generator="two-spirals", seed=6))
        self.assertFalse(np.array_equal(a.train.inputs, c.train.inputs))

    def test_balanced_labels(self) -> None:
        task = generate_task(SyntheticTaskSpec(num_classes=4, n_train=64))
        np.testing.assert_array_equal(
            np.bincount(task.train.labels), [16, 16, 16, 16]
        )

    def test_spec_validation(self) -> None:
        with self.assertRaises(InvalidConfigError):
            SyntheticTaskSpec(generator="moons")
        with self.assertRaises(InvalidConfigError):
            SyntheticTaskSpec(generator="two-spirals", input_dim=1)
        with self.assertRaises(InvalidConfigError):
            SyntheticTaskSpec(label_noise_fraction=1.5)
        with self.assertRaises(InvalidConfigError):
            SyntheticTaskSpec(num_classes=1)


class TestTraining(TestCase):
    def setUp(self) -> None:
        self.task = generate_task(
            SyntheticTaskSpec(input_dim=4, n_train=64, n_test=64, seed=1)
        )

    def test_init_mlp(self) -> None:
        net = init_mlp((4,), 2, 3, 8, np.random.default_rng(0))
        self.assertEqual(net.num_affine, 3)
        self.assertEqual(net.dtype, np.float32)
        self.assertIsInstance(net.layers[0], Dense)
        self.assertIsInstance(net.layers[1], ReLU)
        self.assertIsInstance(net.layers[-1], Dense)
        self.assertFalse(net.layers[0].bias.any())

    def test_fits_separable_task(self) -> None:
        m = train_model(self.task, TrainConfig(epochs=50, depth=2, width=16))
        self.assertFalse(m.did_not_fit)
        self.assertLessEqual(m.train_error, 0.01)
        self.assertLess(m.test_error, 0.1)

    def test_training_is_deterministic(self) -> None:
        cfg = TrainConfig(epochs=3, depth=2, width=8, seed=4)
        a = train_model(self.task, cfg)
        b = train_model(self.task, cfg)
        for pa, pb in zip(a.network.parameters(), b.network.parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_did_not_fit_is_flagged(self) -> None:
        task = generate_task(
            SyntheticTaskSpec(
                generator="random-label-fraction",
                input_dim=4,
                n_train=64,
                n_test=64,
                label_noise_fraction=1.0,
            )
        )
        m = train_model(task, TrainConfig(epochs=1, depth=1))
        self.assertTrue(m.did_not_fit)
        self.assertEqual(m.epochs, 1)

    def test_config_validation(self) -> None:
        with self.assertRaises(InvalidConfigError):
            TrainConfig(depth=0)
        with self.assertRaises(InvalidConfigError):
            TrainConfig(learning_rate=0.0)


class TestZoo(TestCase):
    def test_build_zoo(self) -> None:
        task = generate_task(SyntheticTaskSpec(input_dim=4, n_train=32))
        sweep = [
            TrainConfig(epochs=2, depth=d, width=w)
            for d in (1, 2, 3)
            for w in (4, 8)
        ]
        zoo = build_zoo(task, sweep)
        self.assertEqual(len(zoo), 6)
        self.assertEqual(len({e.model_id for e in zoo}), 6)
        for e in zoo:
            self.assertEqual(
                sorted(e.hyperparams),
                ["depth", "label_noise", "learning_rate", "width"],
            )
            self.assertIsNotNone(e.network)
            self.assertIs(e.train_data, task.train)
            self.assertTrue(0 <= e.train_error <= 1)
        self.assertEqual(zoo[0].model_id, "d1-w4-lr0.05-s0")
        self.assertEqual(zoo[0].hyperparams["label_noise"], "0")

    def test_build_zoo_needs_two_models(self) -> None:
        task = generate_task(SyntheticTaskSpec(input_dim=4, n_train=32))
        with self.assertRaises(InvalidConfigError):
            build_zoo(task, [TrainConfig(epochs=1)])
        with self.assertRaises(InvalidConfigError):
            build_zoo(task, [TrainConfig(epochs=1)] * 2)

    def test_default_sweep(self) -> None:
        sweep = default_zoo_sweep()
        self.assertEqual(sweep.label_noise, (0.0, 0.25, 0.5))
        self.assertEqual(sweep.depth, (1, 2, 3))
        self.assertEqual(sweep.replicates, 3)
        self.assertEqual(ZooSweep.from_dict(sweep.to_dict()), sweep)

    def test_small_default_zoo(self) -> None:
        sweep = ZooSweep(
            SyntheticTaskSpec(input_dim=3, n_train=16, n_test=16),
            label_noise=(0.0, 0.5),
            depth=(1,),
            width=(4,),
            train={"epochs": 2},
            replicates=1,
        )
        zoo = build_default_zoo(seed=7, sweep=sweep)
        ids = [e.model_id for e in zoo]
        self.assertEqual(
            ids, ["n0-r0-d1-w4-lr0.05-s7", "n0.5-r0-d1-w4-lr0.05-s7"]
        )
        self.assertEqual(
            [e.data_path for e in zoo],
            ["data/n0-r0-train.gmds", "data/n0.5-r0-train.gmds"],
        )
        self.assertEqual(
            [e.hyperparams["label_noise"] for e in zoo], ["0", "0.5"]
        )

    def test_invalid_sweep(self) -> None:
        with self.assertRaises(InvalidConfigError):
            ZooSweep.from_dict({"task": {}, "depth": [1]})
        with self.assertRaises(InvalidConfigError):
            ZooSweep(SyntheticTaskSpec(), (0.0,), (), (4,))
