import math

import numpy as np
from django.test import SimpleTestCase

from main.exceptions import ConfigError, ContractError
from tensor_core import ops
from tensor_core.gradcheck import grad_check
from tensor_core.tensor import Tensor

from .layers import (
    GlobalAttentionLayer,
    Mhsa2d,
    Mhsa2dConfig,
    PyramidEnhancer,
    VectorAttentionLayer,
    enhance_pyramid,
    global_scalar_attention,
    mhsa_2d,
    vector_cross_attention,
)


def zeros_like_param(layer, *names):
    params = layer.parameters()
    return layer.bind({name: Tensor(np.zeros(params[name].shape), True) for name in names})


def arrays(layer):
    return {name: t.data for name, t in layer.parameters().items()}


def dense_softmax(logits, axis=-1):
    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def mhsa_oracle(layer, f):
    params = arrays(layer)
    c, h, w = f.shape
    tokens = f.reshape(c, h * w).T
    q, k, v = (tokens @ params[f"{name}.weight"] for name in ("query", "key", "value"))
    heads = layer.cfg.heads
    width = c // heads
    out = np.zeros_like(tokens)
    for head in range(heads):
        cols = slice(head * width, (head + 1) * width)
        scores = np.zeros((h * w, h * w))
        for i in range(h * w):
            for j in range(h * w):
                scores[i, j] = np.dot(q[i, cols], k[j, cols]) / math.sqrt(width)
        out[:, cols] = dense_softmax(scores) @ v[:, cols]
    return out.T.reshape(c, h, w)


def vector_oracle(layer, g, p, neighbors):
    params = arrays(layer)

    def linear(prefix, x):
        return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"]

    def mlp(prefix, x):
        return linear(f"{prefix}.second", np.maximum(linear(f"{prefix}.first", x), 0.0))

    out = np.zeros_like(g)
    for i, row in enumerate(neighbors):
        query = linear("query", g[i])
        scores, values = [], []
        for j in row:
            delta = mlp("position_encoding", p[i] - p[j])
            scores.append(mlp("weight_encoding", query - linear("key", g[j]) + delta))
            values.append(linear("value", g[j]) + delta)
        out[i] = (dense_softmax(np.array(scores), axis=0) * np.array(values)).sum(axis=0)
    return out


def global_oracle(layer, g):
    params = arrays(layer)
    q, k, v = (g @ params[f"{name}.weight"] for name in ("query", "key", "value"))
    m, c = g.shape
    out = np.zeros_like(g)
    for i in range(m):
        others = [j for j in range(m) if j != i]
        logits = np.array([np.dot(q[i], k[j]) / math.sqrt(c) for j in others])
        out[i] = dense_softmax(logits) @ v[others]
    return out


class Mhsa2dTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_heads_must_divide_channels(self):
        with self.assertRaises(ConfigError):
            Mhsa2dConfig(heads=3, channels=4, height=2, width=2)

    def test_zero_values_give_zero_output(self):
        cfg = Mhsa2dConfig(2, 4, 2, 3)
        layer = zeros_like_param(Mhsa2d(cfg, self.rng), "value.weight")
        out = mhsa_2d(self.rng.normal(size=(4, 2, 3)), cfg, layer)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_queries_average_the_values(self):
        cfg = Mhsa2dConfig(2, 4, 2, 3)
        layer = zeros_like_param(Mhsa2d(cfg, self.rng), "query.weight")
        f = self.rng.normal(size=(4, 2, 3))
        tokens = f.reshape(4, 6).T
        values = tokens @ layer.value.weight.data
        out = layer(f).data.reshape(4, 6).T
        np.testing.assert_allclose(out, np.tile(values.mean(axis=0), (6, 1)), atol=1e-12)

    def test_matches_dense_matrix_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            heads = 1 if seed % 2 == 0 else 2
            cfg = Mhsa2dConfig(heads, 4, 2, 2)
            layer = Mhsa2d(cfg, rng)
            f = rng.normal(size=(4, 2, 2))
            np.testing.assert_allclose(layer(f).data, mhsa_oracle(layer, f), atol=1e-12)


class PyramidEnhancerTests(SimpleTestCase):
    widths = [2, 3, 4, 4]
    shapes = [(8, 10), (4, 5), (2, 3), (1, 2)]

    def pyramid(self, rng):
        return [rng.normal(size=(c,) + s) for c, s in zip(self.widths, self.shapes)]

    def test_shapes_preserved(self):
        rng = np.random.default_rng(0)
        enhancer = PyramidEnhancer([8, 16, 32, 32], 2, rng)
        pyramid = [rng.normal(size=(c,) + s) for c, s in [(8, 32, 40), (16, 16, 20), (32, 8, 10), (32, 4, 5)]]
        out = enhance_pyramid([Tensor(f) for f in pyramid], enhancer)
        self.assertEqual([t.shape for t in out], [f.shape for f in pyramid])
        self.assertEqual([len(level.downsize) for level in enhancer.levels], [3, 2, 1, 1])

    def test_zero_branch_is_exact_residual(self):
        rng = np.random.default_rng(1)
        enhancer = PyramidEnhancer(self.widths, 2, rng)
        names = [n for n in enhancer.parameters() if ".attention.value." in n or ".restore." in n]
        enhancer = zeros_like_param(enhancer, *names)
        pyramid = self.pyramid(rng)
        for f, out in zip(pyramid, enhancer([Tensor(f) for f in pyramid])):
            np.testing.assert_array_equal(out.data, f)

    def test_unreachable_schedule(self):
        rng = np.random.default_rng(0)
        enhancer = PyramidEnhancer([2, 2], 1, rng)
        with self.assertRaises(ConfigError):
            enhancer([rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 3, 3))])

    def test_gradient_to_each_level(self):
        rng = np.random.default_rng(2)
        enhancer = PyramidEnhancer(self.widths, 2, rng)
        pyramid = self.pyramid(rng)
        for index in range(len(pyramid)):

            def loss(f, index=index):
                levels = [Tensor(x) for x in pyramid]
                levels[index] = f
                return ops.sum(enhancer(levels)[index])

            error = grad_check(loss, [pyramid[index]], coords_per_input=40, seed=index)
            self.assertLess(error, 1e-5)


class VectorAttentionTests(SimpleTestCase):
    def instance(self, seed, n=8, k=3, c=4):
        rng = np.random.default_rng(seed)
        layer = VectorAttentionLayer(c, rng)
        g = rng.normal(size=(n, c))
        p = rng.normal(size=(n, 3))
        neighbors = np.array([rng.choice([j for j in range(n) if j != i], k, replace=False) for i in range(n)])
        return layer, g, p, neighbors

    def test_single_neighbor_passes_value_plus_position(self):
        layer, g, p, neighbors = self.instance(0, k=1)
        out = vector_cross_attention(g, p, neighbors, layer).data
        values = layer.value(g).data
        for i, (j,) in enumerate(neighbors):
            delta = layer.position_encoding(Tensor(p[i] - p[j])).data
            np.testing.assert_allclose(out[i], values[j] + delta, atol=1e-12)

    def test_zero_weight_encoding_averages_neighbors(self):
        layer, g, p, neighbors = self.instance(1)
        layer = zeros_like_param(layer, "weight_encoding.second.weight", "weight_encoding.second.bias")
        out = layer(g, p, neighbors).data
        values = layer.value(g).data
        for i, row in enumerate(neighbors):
            expected = np.mean(
                [values[j] + layer.position_encoding(Tensor(p[i] - p[j])).data for j in row], axis=0
            )
            np.testing.assert_allclose(out[i], expected, atol=1e-12)

    def test_position_only_in_relation(self):
        layer, g, p, neighbors = self.instance(2, k=1)
        layer.position_in_value = False
        out = layer(g, p, neighbors).data
        np.testing.assert_allclose(out, layer.value(g).data[neighbors[:, 0]], atol=1e-12)

    def test_matches_loop_oracle(self):
        for seed in range(20):
            layer, g, p, neighbors = self.instance(seed)
            np.testing.assert_allclose(layer(g, p, neighbors).data, vector_oracle(layer, g, p, neighbors), atol=1e-12)

    def test_set_semantics_and_translation(self):
        for seed in range(50):
            layer, g, p, neighbors = self.instance(seed)
            rng = np.random.default_rng(1000 + seed)
            base = layer(g, p, neighbors).data
            shuffled = np.array([rng.permutation(row) for row in neighbors])
            np.testing.assert_allclose(layer(g, p, shuffled).data, base, atol=1e-12)
            shift = rng.uniform(-3, 3, size=3)
            np.testing.assert_allclose(layer(g, p + shift, neighbors).data, base, atol=1e-12)

    def test_point_permutation_equivariance(self):
        layer, g, p, neighbors = self.instance(3)
        perm = np.random.default_rng(0).permutation(len(g))
        inverse = np.argsort(perm)
        relabeled = inverse[neighbors[perm]]
        out = layer(g[perm], p[perm], relabeled).data
        np.testing.assert_allclose(out, layer(g, p, neighbors).data[perm], atol=1e-12)

    def test_index_out_of_range(self):
        layer, g, p, neighbors = self.instance(4)
        neighbors[0, 0] = len(g)
        with self.assertRaises(IndexError):
            layer(g, p, neighbors)

    def test_gradients(self):
        layer, g, p, neighbors = self.instance(5, n=6, k=2, c=3)
        error = grad_check(lambda a, b: ops.sum(layer(a, b, neighbors)), [g, p], floor=1e-8)
        self.assertLess(error, 1e-5)


class GlobalAttentionTests(SimpleTestCase):
    def test_two_points_swap_values(self):
        rng = np.random.default_rng(0)
        layer = GlobalAttentionLayer(3, rng)
        g = rng.normal(size=(2, 3))
        values = layer.value(g).data
        np.testing.assert_allclose(global_scalar_attention(g, layer).data, values[::-1], atol=1e-12)

    def test_identical_keys_average_the_others(self):
        rng = np.random.default_rng(1)
        layer = zeros_like_param(GlobalAttentionLayer(3, rng), "key.weight")
        g = rng.normal(size=(5, 3))
        values = layer.value(g).data
        out = layer(g).data
        for i in range(5):
            np.testing.assert_allclose(out[i], np.delete(values, i, axis=0).mean(axis=0), atol=1e-12)

    def test_matches_self_masked_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            layer = GlobalAttentionLayer(4, rng)
            g = rng.normal(size=(16, 4))
            np.testing.assert_allclose(layer(g).data, global_oracle(layer, g), atol=1e-12)

    def test_needs_two_points(self):
        layer = GlobalAttentionLayer(2, np.random.default_rng(0))
        with self.assertRaises(ContractError):
            layer(np.ones((1, 2)))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        layer = GlobalAttentionLayer(3, rng)
        error = grad_check(lambda a: ops.sum(layer(a) * layer(a)), [rng.normal(size=(5, 3))], floor=1e-8)
        self.assertLess(error, 1e-5)
