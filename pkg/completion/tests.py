import copy
import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from geometry.camera import CameraIntrinsics, DepthMap, SparseDepth
from geometry.cloud import FeaturePointCloud
from main.exceptions import ConfigError, ContractError, DimensionError
from tensor_core import ops
from tensor_core.gradcheck import grad_check
from tensor_core.tensor import Tape, Tensor, current_tape

from .checkpoints import load_checkpoint, save_checkpoint
from .network import (
    DeCoTR,
    ModelConfig,
    S2DTR,
    ThreeDTR,
    decotr_forward,
    early_fusion,
    s2d_tr_forward,
    three_d_tr_stack,
    uplift,
)
from .serializers import model_config_from

TINY = ModelConfig(
    encoder_widths=(4, 6, 8, 8, 8),
    guidance_width=8,
    local_layers=1,
    neighbors=4,
    global_attention=True,
    global_points=3,
)
INTRINSICS = CameraIntrinsics(16.0, 16.0, 9.5, 7.5)


def inputs(seed=0, height=16, width=20):
    rng = np.random.default_rng(seed)
    image = rng.random((3, height, width))
    dense = rng.uniform(1.0, 5.0, size=(height, width))
    sparse = dense * (rng.random((height, width)) < 0.2)
    return image, SparseDepth(sparse)


def with_zeros(module, names):
    params = module.parameters()
    return module.bind({n: Tensor(np.zeros(params[n].shape), True) for n in names})


class ModelConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = model_config_from({})
        self.assertEqual(cfg, ModelConfig())
        self.assertEqual(cfg.to_dict()["encoder_widths"], [16, 32, 64, 128, 128])
        self.assertIsNone(cfg.global_points)

    def test_overrides_and_roundtrip(self):
        cfg = model_config_from(TINY.to_dict())
        self.assertEqual(cfg, TINY)

    def test_rejects_bad_configs(self):
        for payload in (
            {"encoder_widths": [4, 4, 4, 4]},
            {"heads": 3},
            {"neighbors": 0},
            {"unknown_flag": True},
            {"global_points": 1},
            [],
        ):
            with self.subTest(payload=payload), self.assertRaises(ConfigError):
                model_config_from(payload)


class S2DTRTests(SimpleTestCase):
    def setUp(self):
        self.net = S2DTR(TINY, np.random.default_rng(0))

    def test_zero_inputs_give_the_bias_fields(self):
        net = self.net.bind(
            {
                "rgb_conv.bias": Tensor([1.0, 2.0, 3.0], True),
                "depth_conv.bias": Tensor([7.0], True),
            }
        )
        f1 = early_fusion(np.zeros((3, 16, 20)), np.zeros((16, 20)), net)
        self.assertEqual(f1.shape, (4, 16, 20))
        for channel, value in enumerate([1.0, 2.0, 3.0, 7.0]):
            np.testing.assert_array_equal(f1.data[channel], value)

    def test_misaligned_inputs(self):
        with self.assertRaises(DimensionError):
            self.net.early_fusion(np.zeros((3, 16, 20)), np.zeros((16, 21)))

    def test_gradient_reaches_both_fusion_branches(self):
        image, sparse = inputs()
        weights = np.random.default_rng(1).normal(size=(4, 16, 20))
        with Tape() as tape:
            loss = ops.sum(self.net.early_fusion(image, sparse) * Tensor(weights))
            grads = tape.backward(loss)
        self.assertGreater(np.abs(grads[self.net.rgb_conv.weight]).sum(), 0)
        self.assertGreater(np.abs(grads[self.net.depth_conv.weight]).sum(), 0)

    def test_output_shapes(self):
        image, sparse = inputs()
        out = s2d_tr_forward(image, sparse, self.net)
        self.assertEqual(out.initial_depth.shape, (16, 20))
        self.assertEqual(out.guidance.shape, (8, 4, 5))
        self.assertEqual(out.skips[2].shape, (8, 4, 5))
        self.assertTrue(np.all(out.initial_depth.data >= 1e-3))

    def test_odd_sizes_are_cropped_back(self):
        image, sparse = inputs(height=17, width=23)
        out = self.net(image, sparse)
        self.assertEqual(out.initial_depth.shape, (17, 23))
        self.assertEqual(out.guidance.shape, (8, 5, 6))

    def test_zeroed_enhancement_is_plain_s2d(self):
        names = [
            n
            for n in self.net.parameters()
            if n.startswith("enhancer.") and (".attention.value." in n or ".restore." in n)
        ]
        zeroed = with_zeros(self.net, names)
        plain = copy.copy(zeroed)
        plain.enhancer = None
        image, sparse = inputs(2)
        np.testing.assert_array_equal(
            zeroed(image, sparse).initial_depth.data, plain(image, sparse).initial_depth.data
        )

    def test_attention_2d_toggle(self):
        net = S2DTR(TINY.replace(attention_2d=False), np.random.default_rng(0))
        self.assertIsNone(net.enhancer)
        self.assertFalse(any(n.startswith("enhancer.") for n in net.parameters()))


class UpliftTests(SimpleTestCase):
    def test_constant_plane(self):
        guidance = np.random.default_rng(0).normal(size=(8, 4, 5))
        cloud = uplift(guidance, np.full((16, 20), 2.0), INTRINSICS)
        self.assertEqual(len(cloud), 20)
        np.testing.assert_array_equal(cloud.positions.data[:, 2], 2.0)
        np.testing.assert_array_equal(cloud.features.data, guidance.reshape(8, 20).T)

    def test_quarter_pixel_matches_full_pixel(self):
        cloud = uplift(np.zeros((1, 4, 5)), np.full((16, 20), 3.0), INTRINSICS)
        for (u, v), position in zip(cloud.pixel_index, cloud.positions.data):
            expected = [3.0 * (4 * u - 9.5) / 16.0, 3.0 * (4 * v - 7.5) / 16.0, 3.0]
            np.testing.assert_allclose(position, expected, atol=1e-12)

    def test_misaligned_guidance(self):
        with self.assertRaises(DimensionError):
            uplift(np.zeros((1, 3, 5)), np.ones((16, 20)), INTRINSICS)


class ThreeDTRTests(SimpleTestCase):
    def cloud(self, n=32, channels=4, seed=0):
        rng = np.random.default_rng(seed)
        positions = rng.normal(size=(n, 3)) + [0, 0, 5]
        return FeaturePointCloud(
            Tensor(positions), Tensor(rng.normal(size=(n, channels))), np.zeros((n, 2), dtype=int)
        )

    def test_no_layers_is_identity(self):
        cloud = self.cloud()
        out = three_d_tr_stack(cloud, ThreeDTR(4, 0, 3, np.random.default_rng(0)))
        np.testing.assert_array_equal(out.features.data, cloud.features.data)
        np.testing.assert_array_equal(out.positions.data, cloud.positions.data)

    def test_normalization_toggle_keeps_shapes(self):
        cloud = self.cloud()
        for normalize in (True, False):
            stack = ThreeDTR(4, 2, 3, np.random.default_rng(0), normalize=normalize, global_attention=True)
            out = stack(cloud)
            self.assertEqual(out.features.shape, (32, 4))
            np.testing.assert_array_equal(out.positions.data, cloud.positions.data)

    def test_too_few_points(self):
        with self.assertRaises(ContractError):
            ThreeDTR(4, 1, 8, np.random.default_rng(0))(self.cloud(n=8))

    def test_gradient_to_features(self):
        cloud = self.cloud(seed=1)
        stack = ThreeDTR(4, 2, 4, np.random.default_rng(1), global_attention=True, global_points=6)
        weights = np.random.default_rng(2).normal(size=(32, 4))

        def loss(features):
            return ops.sum(stack(cloud.with_features(features)).features * Tensor(weights))

        error = grad_check(loss, [cloud.features.data], coords_per_input=48, floor=1e-6)
        self.assertLess(error, 1e-4)


class DeCoTRTests(SimpleTestCase):
    def test_untrained_output_is_finite_positive_and_full_size(self):
        image, sparse = inputs()
        out = decotr_forward(image, sparse, INTRINSICS, DeCoTR(TINY, seed=0))
        self.assertEqual(out.final_depth.shape, (16, 20))
        self.assertTrue(ops.is_finite(out.final_depth))
        self.assertGreaterEqual(out.final_depth.data.min(), 1e-3)
        self.assertIsInstance(out.final_map, DepthMap)
        self.assertEqual(len(out.cloud), 20)

    def test_without_3d_stage_final_is_initial(self):
        model = DeCoTR(TINY.replace(attention_3d=False), seed=0)
        self.assertIsNone(model.three_d)
        image, sparse = inputs()
        out = model(image, sparse, INTRINSICS)
        np.testing.assert_array_equal(out.final_depth.data, out.initial_depth.data)

    def test_repeated_inference_keeps_no_tape(self):
        model = DeCoTR(TINY, seed=0)
        image, sparse = inputs()
        for _ in range(3):
            out = decotr_forward(image, sparse, INTRINSICS, model)
            self.assertIsNone(out.final_depth.node_id)
            self.assertIsNone(current_tape())
        lengths = []
        for _ in range(3):
            with Tape() as tape:
                decotr_forward(image, sparse, INTRINSICS, model)
            lengths.append(len(tape))
        self.assertEqual(len(set(lengths)), 1)
        self.assertGreater(lengths[0], 0)

    def test_same_seed_same_output(self):
        image, sparse = inputs()
        first = DeCoTR(TINY, seed=3)(image, sparse, INTRINSICS).final_depth.data
        second = DeCoTR(TINY, seed=3)(image, sparse, INTRINSICS).final_depth.data
        np.testing.assert_array_equal(first, second)

    def test_gradient_through_the_whole_pipeline(self):
        model = DeCoTR(TINY, seed=0)
        image, sparse = inputs(1)
        names = ["s2d.encoder.0.weight", "three_d.attention.0.value.weight", "final_decoder.head.bias"]
        params = model.parameters()

        def loss(*arrays):
            bound = model.bind(dict(zip(names, arrays)))
            return ops.mean(bound(image, sparse, INTRINSICS).final_depth)

        error = grad_check(loss, [params[n].data for n in names], coords_per_input=5, floor=1e-6)
        self.assertLess(error, 1e-4)


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_roundtrip_reproduces_outputs(self):
        model = DeCoTR(TINY, seed=5)
        save_checkpoint(self.root / "ckpt", model, step=7, training={"lr": 0.001})
        loaded = load_checkpoint(self.root / "ckpt")
        self.assertEqual(loaded.step, 7)
        self.assertEqual(loaded.training, {"lr": 0.001})
        self.assertEqual(loaded.model.cfg, TINY)
        image, sparse = inputs()
        np.testing.assert_array_equal(
            loaded.model(image, sparse, INTRINSICS).final_depth.data,
            model(image, sparse, INTRINSICS).final_depth.data,
        )

    def test_identical_saves_are_byte_identical(self):
        for name in ("a", "b"):
            save_checkpoint(self.root / name, DeCoTR(TINY, seed=1), step=0)
        files_a = sorted(p.relative_to(self.root / "a") for p in (self.root / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(self.root / "b") for p in (self.root / "b").rglob("*") if p.is_file())
        self.assertEqual(files_a, files_b)
        for rel in files_a:
            self.assertEqual((self.root / "a" / rel).read_bytes(), (self.root / "b" / rel).read_bytes())

    def test_config_mismatch(self):
        save_checkpoint(self.root / "ckpt", DeCoTR(TINY, seed=0))
        config_path = self.root / "ckpt" / "config.json"
        config = json.loads(config_path.read_text())
        config["model"]["guidance_width"] = 6
        config_path.write_text(json.dumps(config))
        with self.assertRaises(ConfigError):
            load_checkpoint(self.root / "ckpt")
