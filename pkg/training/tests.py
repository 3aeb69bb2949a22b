import tempfile
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from completion.checkpoints import load_checkpoint
from completion.network import DeCoTR, ModelConfig
from geometry.sampling import sample_sparse_depth
from main.exceptions import ConfigError, ContractError, DimensionError, InputError, NumericalError
from tensor_core.gradcheck import grad_check
from tensor_core.tensor import Tape, Tensor

from .losses import masked_l1_loss
from .optim import AdamState, adam_step
from .scenes import load_scene_dir, make_scene_set, make_synthetic_scene, write_scene
from .serializers import load_run_config, training_config_from
from .services import (
    TrainingConfig,
    TrainingService,
    read_loss_log,
    smoothed,
    train,
    training_loss,
)
from .signals import step_finished

TINY = ModelConfig(
    encoder_widths=(4, 6, 8, 8, 8),
    guidance_width=8,
    local_layers=1,
    neighbors=4,
    global_attention=True,
    global_points=3,
)
FAST = TrainingConfig(sparse_samples=32, checkpoint_every=2)


class MaskedL1LossTests(SimpleTestCase):
    def test_perfect_prediction(self):
        gt = np.array([[2.0, 0.0], [3.0, 4.0]])
        self.assertEqual(masked_l1_loss(gt, gt).item(), 0.0)

    def test_hand_example(self):
        loss = masked_l1_loss(np.array([[1.0, 9.0, 6.0]]), np.array([[2.0, 0.0, 4.0]]))
        self.assertEqual(loss.item(), 1.5)

    def test_gradient_is_sign_over_count(self):
        pred = Tensor([[1.0, 9.0, 6.0, 2.5]], requires_grad=True)
        with Tape() as tape:
            grads = tape.backward(masked_l1_loss(pred, np.array([[2.0, 0.0, 4.0, 2.0]])))
        np.testing.assert_array_equal(grads[pred], [[-1 / 3, 0.0, 1 / 3, 1 / 3]])

    def test_invalid_pixels_do_not_matter(self):
        rng = np.random.default_rng(0)
        gt = rng.uniform(1, 5, size=(12, 15)) * (rng.random((12, 15)) < 0.5)
        pred = rng.uniform(1, 5, size=(12, 15))
        base = masked_l1_loss(pred, gt).item()
        for trial in range(20):
            perturbed = np.where(gt > 0, pred, rng.normal(scale=100.0, size=pred.shape))
            with self.subTest(trial=trial):
                self.assertEqual(masked_l1_loss(perturbed, gt).item(), base)

    def test_non_finite_predictions_at_invalid_pixels(self):
        gt = np.array([2.0, 0.0, 4.0])
        for bad in (np.inf, -np.inf, np.nan):
            with self.subTest(bad=bad):
                self.assertEqual(masked_l1_loss(Tensor([1.0, bad, 6.0]), gt).item(), 1.5)
        pred = Tensor([[1.0, np.nan, 6.0]], requires_grad=True)
        with Tape() as tape:
            grads = tape.backward(masked_l1_loss(pred, gt.reshape(1, 3)))
        np.testing.assert_array_equal(grads[pred], [[-0.5, 0.0, 0.5]])

    def test_contract_errors(self):
        with self.assertRaises(ContractError):
            masked_l1_loss(np.ones((2, 2)), np.zeros((2, 2)))
        with self.assertRaises(DimensionError):
            masked_l1_loss(np.ones((2, 3)), np.ones((3, 2)))


class AdamTests(SimpleTestCase):
    def test_zero_gradient_keeps_parameters(self):
        params = {"w": Tensor([1.0, -2.0], True)}
        new, state = adam_step(params, {"w": np.zeros(2)}, AdamState.zeros(params), 1e-3, 0.9, 0.999, 1e-8)
        np.testing.assert_array_equal(new["w"].data, [1.0, -2.0])
        self.assertEqual(state.t, 1)

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": Tensor([1.0, 1.0, 1.0], True)}
        grads = {"w": np.array([0.3, -2.0, 5.0])}
        new, _ = adam_step(params, grads, AdamState(), 0.01, 0.9, 0.999, 1e-8)
        np.testing.assert_allclose(new["w"].data, 1.0 - 0.01 * np.sign(grads["w"]), atol=1e-9)

    def test_two_steps_match_the_recurrence(self):
        lr, b1, b2, eps = 5e-4, 0.9, 0.999, 1e-8
        g = np.array([0.5, -1.5])
        params = {"w": Tensor([0.2, 0.4], True)}
        state = AdamState.zeros(params)
        for _ in range(2):
            params, state = adam_step(params, {"w": g}, state, lr, b1, b2, eps)

        p, m, v = np.array([0.2, 0.4]), np.zeros(2), np.zeros(2)
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        np.testing.assert_allclose(params["w"].data, p, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.m["w"], m, rtol=0, atol=1e-12)
        self.assertEqual(state.t, 2)

    def test_zero_learning_rate_is_identity(self):
        rng = np.random.default_rng(0)
        params = {"a": Tensor(rng.normal(size=(3, 4)), True), "b": Tensor(rng.normal(size=5), True)}
        grads = {name: rng.normal(size=p.shape) for name, p in params.items()}
        new, _ = adam_step(params, grads, AdamState.zeros(params), 0.0, 0.9, 0.999, 1e-8)
        for name in params:
            np.testing.assert_array_equal(new[name].data, params[name].data)

    def test_inputs_are_not_mutated(self):
        params = {"w": Tensor([1.0], True)}
        state = AdamState.zeros(params)
        adam_step(params, {"w": np.array([1.0])}, state, 0.1, 0.9, 0.999, 1e-8)
        self.assertEqual(state.t, 0)
        np.testing.assert_array_equal(state.m["w"], [0.0])
        np.testing.assert_array_equal(params["w"].data, [1.0])

    def test_shape_mismatch(self):
        params = {"w": Tensor([1.0, 2.0], True)}
        with self.assertRaises(DimensionError):
            adam_step(params, {"w": np.zeros(3)}, AdamState(), 0.1, 0.9, 0.999, 1e-8)


class SyntheticSceneTests(SimpleTestCase):
    def test_same_seed_same_scene(self):
        first, second = make_synthetic_scene(7, 24, 32), make_synthetic_scene(7, 24, 32)
        np.testing.assert_array_equal(first.image, second.image)
        np.testing.assert_array_equal(first.depth.values, second.depth.values)
        self.assertEqual(first.primitives, second.primitives)

    def test_depth_range_and_image_range(self):
        for seed in range(20):
            scene = make_synthetic_scene(seed, 32, 40)
            with self.subTest(seed=seed):
                self.assertEqual(scene.image.shape, (3, 32, 40))
                self.assertGreaterEqual(scene.depth.values.min(), 0.5)
                self.assertLessEqual(scene.depth.values.max(), 10.0)
                self.assertEqual(scene.depth.valid_count, 32 * 40)
                self.assertTrue(0.0 <= scene.image.min() and scene.image.max() <= 1.0)
                self.assertTrue(2 <= len(scene.primitives) <= 4)

    def test_wall_pixels_lie_on_the_plane(self):
        scene = make_synthetic_scene(3, 32, 40)
        wall = scene.primitives[0]
        intr = scene.intrinsics
        v, u = np.nonzero(scene.labels == 0)
        z = scene.depth.values[v, u]
        x = z * (u - intr.c_u) / intr.gamma_u
        y = z * (v - intr.c_v) / intr.gamma_v
        self.assertGreater(z.size, 0)
        np.testing.assert_allclose(z - wall["a"] * x - wall["b"] * y, wall["z0"], rtol=0, atol=1e-12)

    def test_fixed_camera(self):
        intr = make_synthetic_scene(0, 32, 40).intrinsics
        self.assertEqual((intr.gamma_u, intr.gamma_v, intr.c_u, intr.c_v), (32.0, 32.0, 19.5, 15.5))

    def test_too_small(self):
        with self.assertRaises(ContractError):
            make_synthetic_scene(0, 15, 40)

    def test_directory_roundtrip(self):
        scenes = make_scene_set(1, 3, 16, 20)
        with tempfile.TemporaryDirectory() as tmp:
            for index, scene in enumerate(scenes):
                write_scene(tmp, index, scene)
            self.assertEqual(
                sorted(p.name for p in Path(tmp).iterdir())[:3],
                ["scene_0000_depth.pfm", "scene_0000_image.ppm", "scene_0000_intrinsics.json"],
            )
            loaded = load_scene_dir(tmp)
        self.assertEqual(len(loaded), 3)
        for scene, back in zip(scenes, loaded):
            np.testing.assert_array_equal(back.depth.values, scene.depth.values.astype(np.float32))
            np.testing.assert_allclose(back.image, scene.image, atol=0.5 / 255 + 1e-12)
            self.assertEqual(back.intrinsics, scene.intrinsics)

    def test_missing_directory(self):
        with self.assertRaises(InputError):
            load_scene_dir("/nonexistent/scenes")


class TrainingConfigTests(SimpleTestCase):
    def test_defaults_come_from_settings(self):
        cfg = training_config_from({})
        self.assertEqual(cfg.lr, settings.ADAM_LR)
        self.assertEqual(cfg.aux_weight, 0.5)
        self.assertEqual(cfg, TrainingConfig())

    def test_rejects_bad_values(self):
        for payload in ({"beta1": 1.0}, {"eps": 0.0}, {"sparse_samples": 0}, {"momentum": 0.9}):
            with self.subTest(payload=payload), self.assertRaises(ConfigError):
                training_config_from(payload)

    def test_presets(self):
        model_cfg, training = load_run_config("tiny")
        self.assertEqual(model_cfg, TINY)
        self.assertEqual(training.sparse_samples, 32)
        model_cfg, training = load_run_config("toy")
        self.assertEqual(model_cfg, ModelConfig())
        self.assertEqual(training.sparse_samples, 64)

    def test_missing_file(self):
        with self.assertRaises(InputError):
            load_run_config("/nonexistent/run.json")


class TrainingServiceTests(SimpleTestCase):
    def setUp(self):
        self.scenes = make_scene_set(0, 2, 16, 20)
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_gradient_of_the_training_loss(self):
        model = DeCoTR(TINY, seed=0)
        scene = self.scenes[0]
        sparse = sample_sparse_depth(scene.depth, 32, 0)
        names = ["s2d.depth_conv.weight", "three_d.feedforward.0.first.weight", "final_decoder.head.weight"]
        params = model.parameters()

        def loss(*arrays):
            return training_loss(model.bind(dict(zip(names, arrays))), scene, sparse, 0.5)[0]

        error = grad_check(loss, [params[n].data for n in names], coords_per_input=5, floor=1e-6)
        self.assertLess(error, settings.GRADCHECK_PIPELINE_TOLERANCE)

    def test_runs_are_bit_reproducible(self):
        first = train(TINY, FAST, self.scenes, 3, seed=4)
        second = train(TINY, FAST, self.scenes, 3, seed=4)
        self.assertEqual(first.records, second.records)
        self.assertEqual(first.step, 3)
        self.assertEqual(first.state.t, 3)

    def test_resume_repeats_the_uninterrupted_run(self):
        full = train(TINY, FAST, self.scenes, 4, seed=1, out_dir=self.root / "full")
        checkpoint = load_checkpoint(self.root / "full" / "checkpoints" / "step_000002")
        self.assertEqual(checkpoint.step, 2)
        resumed = TrainingService.from_checkpoint(checkpoint, self.scenes).run(2)
        self.assertEqual(resumed.records, full.records[2:])

    def test_outputs(self):
        result = train(TINY, FAST, self.scenes, 2, seed=0, out_dir=self.root)
        self.assertEqual(read_loss_log(result.loss_log), result.records)
        self.assertEqual(result.loss_log.read_text().splitlines()[0], "step,loss,loss_initial,loss_final")
        self.assertEqual(load_checkpoint(result.checkpoint).step, 2)
        for record in result.records:
            self.assertEqual(record.loss, record.loss_final + 0.5 * record.loss_initial)

    def test_zero_steps_writes_an_untrained_checkpoint(self):
        result = train(TINY, FAST, self.scenes, 0, seed=2, out_dir=self.root)
        self.assertEqual(result.records, [])
        self.assertEqual(read_loss_log(result.loss_log), [])
        loaded = load_checkpoint(result.checkpoint)
        fresh = DeCoTR(TINY, seed=2).parameters()
        for name, value in loaded.model.parameters().items():
            np.testing.assert_array_equal(value.data, fresh[name].data)

    def test_non_finite_loss_aborts(self):
        model = DeCoTR(TINY, seed=0)
        bias = model.parameters()["final_decoder.head.bias"]
        model = model.bind({"final_decoder.head.bias": Tensor(np.full(bias.shape, np.nan), True)})
        with self.assertRaises(NumericalError):
            TrainingService(model, FAST, self.scenes).run(1)

    def test_empty_scene_set(self):
        with self.assertRaises(ContractError):
            TrainingService(DeCoTR(TINY), FAST, [])

    def test_progress_signal(self):
        seen = []

        def handler(sender, step, loss, total=None, **kwargs):
            seen.append((step, total))

        step_finished.connect(handler)
        try:
            train(TINY, FAST, self.scenes, 2, seed=0)
        finally:
            step_finished.disconnect(handler)
        self.assertEqual(seen, [(0, 2), (1, 2)])

    def test_smoothing(self):
        np.testing.assert_allclose(smoothed([4.0, 2.0, 3.0, 1.0], window=2), [3.0, 2.5, 2.0])
        np.testing.assert_allclose(smoothed([1.0, 2.0], window=50), [1.5])


@skipUnless(settings.RUN_SLOW_TESTS, "long training run; set RUN_SLOW_TESTS=True")
class ToyOverfitTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        model_cfg, training = load_run_config("toy")
        cls.result = train(model_cfg, training, make_scene_set(0, 8, 32, 40), 2000, seed=0)

    def tail(self, field, window=50):
        return np.mean([getattr(r, field) for r in self.result.records[-window:]])

    def test_toy_overfit(self):
        records = self.result.records
        initial = smoothed([r.loss_initial for r in records[:60]], window=10)
        self.assertLess(initial[-1], initial[0])
        blocks = smoothed([r.loss for r in records], window=50)[::200]
        self.assertTrue(np.all(np.diff(blocks) <= 0), blocks)
        self.assertLess(self.tail("loss_final"), 0.05)

    def test_refined_depth_beats_initial_depth(self):
        self.assertLess(self.tail("loss_final"), self.tail("loss_initial"))
