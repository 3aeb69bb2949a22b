import json
import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from main.exceptions import ContractError, EmptyCloudError, GeometryError, InputError
from tensor_core import ops
from tensor_core.gradcheck import grad_check
from tensor_core.tensor import Tensor

from .camera import CameraIntrinsics, DepthMap, SparseDepth
from .cloud import (
    FeaturePointCloud,
    NormalizationTransform,
    denormalize,
    normalize_unit_ball,
    project,
    project_points,
    unproject,
)
from .io import (
    encode_pfm,
    read_depth,
    read_intrinsics,
    read_pfm,
    read_ppm,
    write_depth,
    write_intrinsics,
    write_pfm,
    write_pgm16,
    write_ppm,
)
from .sampling import sample_sparse_depth
from .search import downsample_fps, knn, nearest_selected

INTRINSICS = CameraIntrinsics(100.0, 100.0, 50.0, 40.0)


def cloud_from(points):
    points = np.asarray(points, dtype=np.float64)
    return FeaturePointCloud(
        Tensor(points), Tensor(np.zeros((len(points), 1))), np.zeros((len(points), 2), dtype=int)
    )


def knn_oracle(points, k):
    table = []
    for i in range(len(points)):
        candidates = sorted(
            (math.dist(points[i], points[j]), j) for j in range(len(points)) if j != i
        )
        table.append([j for _, j in candidates[:k]])
    return np.array(table)


def fps_oracle(points, count, start):
    chosen = [start]
    while len(chosen) < count:
        best, best_index = -1.0, None
        for j in range(len(points)):
            if j in chosen:
                continue
            gap = min(math.dist(points[j], points[s]) for s in chosen)
            if gap > best:
                best, best_index = gap, j
        chosen.append(best_index)
    return chosen


class CameraTests(SimpleTestCase):
    def test_focal_lengths_must_be_positive(self):
        with self.assertRaises(GeometryError):
            CameraIntrinsics(0.0, 1.0, 0.0, 0.0)

    def test_scaled_and_dict_roundtrip(self):
        quarter = INTRINSICS.scaled(0.25)
        self.assertEqual(quarter, CameraIntrinsics(25.0, 25.0, 12.5, 10.0))
        self.assertEqual(CameraIntrinsics.from_dict(INTRINSICS.to_dict()), INTRINSICS)

    def test_depth_map_rejects_negative_and_non_finite(self):
        with self.assertRaises(GeometryError):
            DepthMap(np.array([[1.0, -1.0]]))
        with self.assertRaises(GeometryError):
            DepthMap(np.array([[1.0, np.nan]]))
        self.assertEqual(DepthMap(np.array([[0.0, 2.0], [3.0, 0.0]])).valid_count, 2)


class UnprojectTests(SimpleTestCase):
    def test_examples(self):
        depth = np.zeros((81, 151))
        depth[40, 50] = 2.0
        depth[40, 150] = 2.0
        cloud = unproject(DepthMap(depth), INTRINSICS, np.zeros((1, 81, 151)))
        self.assertEqual(len(cloud), 2)
        np.testing.assert_allclose(cloud.positions.data, [[0, 0, 2], [2, 0, 2]])
        np.testing.assert_array_equal(cloud.pixel_index, [[50, 40], [150, 40]])

    def test_all_invalid_depth(self):
        with self.assertRaises(EmptyCloudError):
            unproject(DepthMap(np.zeros((4, 4))), INTRINSICS, np.zeros((2, 4, 4)))

    def test_roundtrip_reproduces_features_and_depth(self):
        rng = np.random.default_rng(0)
        depth = rng.uniform(0.5, 5.0, size=(12, 16)) * (rng.random((12, 16)) > 0.3)
        features = rng.normal(size=(4, 12, 16))
        intr = CameraIntrinsics(20.0, 22.0, 7.5, 5.5)
        cloud = unproject(DepthMap(depth), intr, features)
        feature_map, projected = project(cloud, intr, 12, 16)
        valid = depth > 0
        np.testing.assert_array_equal(projected.values, depth)
        np.testing.assert_array_equal(feature_map.data[:, valid], features[:, valid])
        np.testing.assert_array_equal(feature_map.data[:, ~valid], 0.0)
        pixels = project_points(cloud.positions, intr)
        self.assertLess(np.abs(pixels - cloud.pixel_index).max(), 1e-9)

    def test_principal_axis_projects_to_principal_point(self):
        np.testing.assert_allclose(project_points(np.array([[0.0, 0.0, 2.0]]), INTRINSICS), [[50, 40]])

    def test_points_behind_camera(self):
        with self.assertRaises(GeometryError):
            project_points(np.array([[0.0, 0.0, -1.0]]), INTRINSICS)
        with self.assertRaises(GeometryError):
            project(cloud_from([[0.0, 0.0, 0.0]]), INTRINSICS, 2, 2)

    def test_halved_resolution_gives_same_positions(self):
        depth = np.full((8, 8), 2.0)
        intr = CameraIntrinsics(10.0, 10.0, 3.5, 3.5)
        full = unproject(DepthMap(depth), intr, np.zeros((1, 8, 8)))
        half = unproject(DepthMap(depth[::2, ::2]), intr.scaled(0.5), np.zeros((1, 4, 4)))
        full_rows = {tuple(p): i for i, p in enumerate(full.pixel_index)}
        for position, (u, v) in zip(half.positions.data, half.pixel_index):
            np.testing.assert_allclose(
                position, full.positions.data[full_rows[(2 * u, 2 * v)]], atol=1e-12
            )

    def test_uplift_is_differentiable_in_depth_and_features(self):
        rng = np.random.default_rng(1)
        intr = CameraIntrinsics(5.0, 5.0, 2.0, 1.5)
        weights = rng.normal(size=(12, 3))

        def loss(depth, features):
            cloud = unproject(depth, intr, features)
            normalized, _ = normalize_unit_ball(cloud)
            return ops.sum(normalized.positions * Tensor(weights)) + ops.sum(
                normalized.features * normalized.features
            )

        error = grad_check(loss, [rng.uniform(1, 3, size=(3, 4)), rng.normal(size=(2, 3, 4))])
        self.assertLess(error, 1e-5)


class NormalizationTests(SimpleTestCase):
    def test_symmetric_pair(self):
        normalized, transform = normalize_unit_ball(cloud_from([[2, 0, 0], [-2, 0, 0]]))
        np.testing.assert_allclose(normalized.positions.data, [[1, 0, 0], [-1, 0, 0]])
        np.testing.assert_array_equal(transform.centroid, [0, 0, 0])
        self.assertEqual(transform.scale, 2.0)
        restored = denormalize(normalized, transform)
        np.testing.assert_allclose(restored.positions.data, [[2, 0, 0], [-2, 0, 0]])

    def test_single_point_is_clamped(self):
        normalized, transform = normalize_unit_ball(cloud_from([[3.0, -1.0, 7.0]]))
        np.testing.assert_array_equal(normalized.positions.data, [[0, 0, 0]])
        self.assertEqual(transform.scale, 1.0)

    def test_identity_transform(self):
        cloud = cloud_from(np.random.default_rng(0).normal(size=(5, 3)))
        restored = denormalize(cloud, NormalizationTransform.identity())
        np.testing.assert_array_equal(restored.positions.data, cloud.positions.data)

    def test_random_cloud_lands_on_unit_ball_and_inverts(self):
        for seed in range(5):
            points = np.random.default_rng(seed).normal(loc=3.0, scale=2.0, size=(100, 3))
            normalized, transform = normalize_unit_ball(cloud_from(points))
            norms = np.linalg.norm(normalized.positions.data, axis=1)
            self.assertLessEqual(norms.max(), 1 + 1e-12)
            self.assertGreaterEqual(norms.max(), 1 - 1e-12)
            restored = denormalize(normalized, transform)
            self.assertLess(np.abs(restored.positions.data - points).max(), 1e-12)


class SearchTests(SimpleTestCase):
    def test_tie_goes_to_lower_index(self):
        line = [[0, 0, 0], [1, 0, 0], [2, 0, 0]]
        self.assertEqual(knn(line, 1)[1, 0], 0)

    def test_k_equal_n_minus_one_lists_everyone_else(self):
        points = np.random.default_rng(0).normal(size=(6, 3))
        table = knn(points, 5)
        for i, row in enumerate(table):
            self.assertEqual(sorted(row), [j for j in range(6) if j != i])

    def test_k_out_of_range(self):
        with self.assertRaises(ContractError):
            knn(np.zeros((4, 3)), 4)
        with self.assertRaises(ContractError):
            knn(np.zeros((4, 3)), 0)

    def test_knn_matches_brute_force(self):
        for seed in range(20):
            points = np.random.default_rng(seed).uniform(size=(64, 3))
            np.testing.assert_array_equal(knn(points, 8), knn_oracle(points, 8))
        points = np.random.default_rng(99).uniform(size=(256, 3))
        table = knn(points, 16)
        np.testing.assert_array_equal(table, knn_oracle(points, 16))
        np.testing.assert_array_equal(knn(points + 4.0, 16), table)

    def test_knn_spans_row_blocks(self):
        points = np.random.default_rng(3).uniform(size=(600, 3))
        table = knn(points, 4)
        full = np.sum((points[:, None] - points[None]) ** 2, axis=2)
        np.fill_diagonal(full, np.inf)
        np.testing.assert_array_equal(table, np.argsort(full, axis=1, kind="stable")[:, :4])

    def test_fps_examples(self):
        line = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]
        self.assertEqual(list(downsample_fps(line, 2, 0)), [0, 3])
        self.assertEqual(sorted(downsample_fps(line, 4, 0)), [0, 1, 2, 3])
        with self.assertRaises(ContractError):
            downsample_fps(line, 5, 0)

    def test_fps_matches_greedy_oracle(self):
        for seed in range(20):
            points = np.random.default_rng(seed).normal(size=(128, 3))
            start = seed % 128
            self.assertEqual(list(downsample_fps(points, 16, start)), fps_oracle(points, 16, start))

    def test_nearest_selected_assignment(self):
        points = np.array([[0, 0, 0], [0.4, 0, 0], [0.9, 0, 0], [1, 0, 0]], dtype=float)
        np.testing.assert_array_equal(nearest_selected(points, [0, 3]), [0, 0, 1, 1])


class SparseSamplingTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.dense = DepthMap(rng.uniform(1, 4, size=(10, 12)) * (rng.random((10, 12)) > 0.2))

    def test_large_n_keeps_every_valid_pixel(self):
        sparse = sample_sparse_depth(self.dense, 10_000, seed=1)
        self.assertIsInstance(sparse, SparseDepth)
        np.testing.assert_array_equal(sparse.values, self.dense.values)

    def test_seeded_and_a_restriction_of_dense(self):
        first = sample_sparse_depth(self.dense, 20, seed=3)
        second = sample_sparse_depth(self.dense, 20, seed=3)
        other = sample_sparse_depth(self.dense, 20, seed=4)
        np.testing.assert_array_equal(first.values, second.values)
        self.assertFalse(np.array_equal(first.valid_mask, other.valid_mask))
        self.assertEqual(first.valid_count, 20)
        mask = first.valid_mask
        np.testing.assert_array_equal(first.values[mask], self.dense.values[mask])

    def test_contract_errors(self):
        with self.assertRaises(ContractError):
            sample_sparse_depth(self.dense, 0, seed=0)
        with self.assertRaises(ContractError):
            sample_sparse_depth(DepthMap(np.zeros((3, 3))), 5, seed=0)


class FileFormatTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_pfm_header_and_roundtrip(self):
        values = np.arange(12, dtype=np.float32).reshape(3, 4).astype(np.float64) / 4
        raw = encode_pfm(values)
        self.assertTrue(raw.startswith(b"Pf\n4 3\n-1.0\n"))
        # bottom row is stored first
        self.assertEqual(np.frombuffer(raw[-16:], dtype="<f4").tolist(), values[0].tolist())
        write_pfm(self.root / "d.pfm", values)
        np.testing.assert_array_equal(read_depth(self.root / "d.pfm").values, values)

    def test_three_channel_pfm(self):
        image = np.random.default_rng(0).random((3, 5, 4)).astype(np.float32)
        write_pfm(self.root / "rgb.pfm", image)
        np.testing.assert_array_equal(read_pfm(self.root / "rgb.pfm"), image)

    def test_pgm16_uses_meters_per_unit(self):
        values = np.array([[0.0, 1.5], [2.25, 9.999]])
        write_depth(self.root / "d.pgm", DepthMap(values))
        self.assertIn(b"# meters_per_unit 0.001", (self.root / "d.pgm").read_bytes())
        np.testing.assert_allclose(read_depth(self.root / "d.pgm").values, values, atol=1e-12)
        write_pgm16(self.root / "cm.pgm", values, meters_per_unit=0.25)
        np.testing.assert_allclose(read_depth(self.root / "cm.pgm").values, [[0, 1.5], [2.25, 10.0]])

    def test_ppm_roundtrip(self):
        image = np.random.default_rng(1).integers(0, 256, size=(3, 4, 6)) / 255.0
        write_ppm(self.root / "i.ppm", image)
        np.testing.assert_allclose(read_ppm(self.root / "i.ppm"), image, atol=1e-12)

    def test_intrinsics_json(self):
        write_intrinsics(self.root / "k.json", INTRINSICS)
        self.assertEqual(
            json.loads((self.root / "k.json").read_text()),
            {"gamma_u": 100.0, "gamma_v": 100.0, "c_u": 50.0, "c_v": 40.0},
        )
        self.assertEqual(read_intrinsics(self.root / "k.json"), INTRINSICS)

    def test_bad_inputs_carry_the_path(self):
        (self.root / "junk.pfm").write_bytes(b"P7\n1 1\n")
        with self.assertRaises(InputError) as ctx:
            read_depth(self.root / "junk.pfm")
        self.assertIn("junk.pfm", str(ctx.exception))
        with self.assertRaises(InputError):
            read_depth(self.root / "missing.pfm")
        (self.root / "short.pfm").write_bytes(b"Pf\n4 3\n-1.0\n" + b"\x00" * 8)
        with self.assertRaises(InputError):
            read_depth(self.root / "short.pfm")
        (self.root / "k.json").write_text('{"gamma_u": 1}')
        with self.assertRaises(InputError):
            read_intrinsics(self.root / "k.json")
