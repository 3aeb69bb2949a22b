"""
Self-verification suite behind ``manage.py gradcheck``.

Each registered check returns a max relative error. Gradient checks compare
the tape against central differences; oracle checks compare vectorized code
against straight loops on 20 seeds. Index-valued oracles (KNN, FPS) report
the fraction of mismatching entries.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from attention.layers import (
    GlobalAttentionLayer,
    Mhsa2d,
    Mhsa2dConfig,
    VectorAttentionLayer,
    global_scalar_attention,
    mhsa_2d,
    vector_cross_attention,
)
from completion.network import DeCoTR, ModelConfig
from geometry.camera import CameraIntrinsics
from geometry.cloud import unproject
from geometry.sampling import sample_sparse_depth
from geometry.search import downsample_fps, knn
from metrics.evaluation import evaluate
from tensor_core import ops
from tensor_core.gradcheck import grad_check
from tensor_core.tensor import corrupt_backward
from training.scenes import make_synthetic_scene
from training.services import training_loss

logger = logging.getLogger(__name__)

ORACLE_SEEDS = 20

OP = "op"
PIPELINE = "pipeline"
ORACLE = "oracle"

_REGISTRY = []


def register(name, kind):
    def decorator(func):
        _REGISTRY.append((name, kind, func))
        return func

    return decorator


def tolerance_for(kind) -> float:
    if kind == OP:
        return getattr(settings, "GRADCHECK_OP_TOLERANCE", 1e-5)
    if kind == PIPELINE:
        return getattr(settings, "GRADCHECK_PIPELINE_TOLERANCE", 1e-4)
    return getattr(settings, "ORACLE_TOLERANCE", 1e-12)


@dataclass(frozen=True)
class CheckResult:
    name: str
    kind: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.error) and self.error <= self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<36} max_rel_error={self.error:.3e} tol={self.tolerance:.0e} {status}"


def check_names() -> list[str]:
    return [name for name, _, _ in _REGISTRY]


def run_checks(model_cfg: ModelConfig, seed=0, corrupt=(), only=None) -> list[CheckResult]:
    """Run every registered check (or those named in ``only``), in registration order."""
    results = []
    with corrupt_backward(*corrupt):
        for index, (name, kind, func) in enumerate(_REGISTRY):
            if only and name not in only:
                continue
            rng = np.random.default_rng([seed, index])
            error = float(func(rng, model_cfg=model_cfg, seed=seed))
            result = CheckResult(name, kind, error, tolerance_for(kind))
            logger.info(f"[GRADCHECK] check={name} error={error:.3e} passed={result.passed}")
            results.append(result)
    return results


def _relative(actual, expected) -> float:
    actual, expected = np.asarray(actual, dtype=np.float64), np.asarray(expected, dtype=np.float64)
    return float(np.max(np.abs(actual - expected) / np.maximum(1.0, np.abs(expected)), initial=0.0))


def _weighted(rng, shape):
    weights = ops.as_tensor(rng.normal(size=shape))
    return lambda out: ops.sum(out * weights)


def _eps():
    return getattr(settings, "GRADCHECK_EPS", 1e-6)


# Gradient checks on single operations


def _binary(kind, rng, positive=False):
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4)) if positive else rng.normal(size=(1, 4))
    reduce = _weighted(rng, (3, 4))
    return grad_check(lambda x, y: reduce(ops.elementwise(kind, x, y)), [a, b], eps=_eps())


@register("grad:add", OP)
def _add(rng, **_):
    return _binary("add", rng)


@register("grad:sub", OP)
def _sub(rng, **_):
    return _binary("sub", rng)


@register("grad:mul", OP)
def _mul(rng, **_):
    return _binary("mul", rng)


@register("grad:div", OP)
def _div(rng, **_):
    return _binary("div", rng, positive=True)


def _unary(func, x, rng):
    reduce = _weighted(rng, x.shape)
    return grad_check(lambda t: reduce(func(t)), [x], eps=_eps())


@register("grad:relu", OP)
def _relu(rng, **_):
    return _unary(ops.relu, rng.normal(size=(4, 5)), rng)


@register("grad:abs", OP)
def _abs(rng, **_):
    return _unary(ops.absolute, rng.normal(size=(4, 5)), rng)


@register("grad:exp", OP)
def _exp(rng, **_):
    return _unary(ops.exp, rng.normal(size=(4, 5)), rng)


@register("grad:sqrt", OP)
def _sqrt(rng, **_):
    return _unary(ops.sqrt, rng.uniform(0.5, 3.0, size=(4, 5)), rng)


@register("grad:softplus", OP)
def _softplus(rng, **_):
    return _unary(ops.softplus, rng.normal(scale=3.0, size=(4, 5)), rng)


@register("grad:reductions", OP)
def _reductions(rng, **_):
    x = rng.normal(size=(3, 4, 5))
    w1, w2 = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))

    def f(t):
        return (
            ops.sum(ops.sum(t, axis=1) * w1)
            + ops.sum(ops.mean(t, axis=0) * w2)
            + ops.sum(ops.amax(t, axis=2))
        )

    return grad_check(f, [x], eps=_eps())


@register("grad:matmul", OP)
def _matmul(rng, **_):
    reduce = _weighted(rng, (2, 3, 5))
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    return grad_check(lambda x, y: reduce(ops.matmul(x, y)), [a, b], eps=_eps())


@register("grad:softmax", OP)
def _softmax(rng, **_):
    mask = rng.random((4, 6)) < 0.7
    mask[:, 0] = True
    reduce = _weighted(rng, (4, 6))
    return grad_check(lambda x: reduce(ops.softmax(x, axis=1, mask=mask)), [rng.normal(size=(4, 6))], eps=_eps())


@register("grad:conv2d", OP)
def _conv2d(rng, **_):
    x, w, b = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    reduce = _weighted(rng, (3, 4, 3))
    return grad_check(lambda *a: reduce(ops.conv2d(*a, stride=2, padding=1)), [x, w, b], eps=_eps())


@register("grad:depthwise_separable_conv2d", OP)
def _separable(rng, **_):
    x, dw, pw = rng.normal(size=(3, 6, 6)), rng.normal(size=(3, 1, 3, 3)), rng.normal(size=(4, 3, 1, 1))
    reduce = _weighted(rng, (4, 3, 3))
    return grad_check(
        lambda *a: reduce(ops.depthwise_separable_conv2d(*a, stride=2, padding=1)), [x, dw, pw], eps=_eps()
    )


@register("grad:transposed_conv2d", OP)
def _transposed(rng, **_):
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3)
    reduce = _weighted(rng, (3, 5, 7))
    return grad_check(
        lambda *a: reduce(ops.transposed_conv2d(*a, stride=2, output_size=(5, 7))), [x, w, b], eps=_eps()
    )


@register("grad:plumbing", OP)
def _plumbing(rng, **_):
    indices = np.array([0, 2, 2, 4, 1])
    reduce = _weighted(rng, (6, 3))

    def f(a, b):
        joined = ops.concat([a, b], axis=0)
        flipped = ops.transpose(ops.reshape(joined, (3, 5)), (1, 0))
        picked = ops.gather_rows(flipped, indices)
        spread = ops.scatter_rows(picked, indices[::-1], 6)
        return reduce(spread) + ops.sum(ops.getitem(joined, slice(1, 7, 2)))

    return grad_check(f, [rng.normal(size=6), rng.normal(size=9)], eps=_eps())


# Gradient checks on layers and the pipeline


@register("grad:mhsa_2d", OP)
def _mhsa_grad(rng, **_):
    cfg = Mhsa2dConfig(2, 4, 2, 3)
    layer = Mhsa2d(cfg, rng)
    reduce = _weighted(rng, (4, 2, 3))
    return grad_check(lambda f: reduce(mhsa_2d(f, cfg, layer)), [rng.normal(size=(4, 2, 3))], eps=_eps(), floor=1e-8)


@register("grad:vector_attention", OP)
def _vector_grad(rng, **_):
    layer = VectorAttentionLayer(4, rng)
    g, p = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
    neighbors = knn(p, 3)
    reduce = _weighted(rng, (7, 4))
    return grad_check(
        lambda a, b: reduce(vector_cross_attention(a, b, neighbors, layer)), [g, p], eps=_eps(), floor=1e-8
    )


@register("grad:global_attention", OP)
def _global_grad(rng, **_):
    layer = GlobalAttentionLayer(3, rng)
    reduce = _weighted(rng, (5, 3))
    return grad_check(lambda a: reduce(global_scalar_attention(a, layer)), [rng.normal(size=(5, 3))], eps=_eps(), floor=1e-8)


@register("grad:unproject", OP)
def _unproject_grad(rng, **_):
    intr = CameraIntrinsics(6.0, 5.0, 2.5, 1.5)
    features = rng.normal(size=(2, 4, 6))
    reduce = _weighted(rng, (24, 3))
    return grad_check(
        lambda d: reduce(unproject(d, intr, features).positions), [rng.uniform(1.0, 4.0, size=(4, 6))], eps=_eps()
    )


@register("grad:end_to_end_loss", PIPELINE)
def _end_to_end(rng, model_cfg, seed, **_):
    model = DeCoTR(model_cfg, seed=seed)
    scene = make_synthetic_scene(seed, 16, 20)
    sparse = sample_sparse_depth(scene.depth, 32, seed)
    names = ["s2d.rgb_conv.weight", "s2d.depth_head.weight"]
    if model.three_d is not None:
        names += ["three_d.attention.0.value.weight", "final_decoder.head.weight"]
    params = model.parameters()

    def loss(*arrays):
        return training_loss(model.bind(dict(zip(names, arrays))), scene, sparse, 0.5)[0]

    return grad_check(loss, [params[n].data for n in names], eps=_eps(), floor=1e-6, coords_per_input=5, seed=seed)


# Oracle equivalence


def _softmax_rows(logits):
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _worst(rng, trial):
    return max(trial(np.random.default_rng([int(rng.integers(2**31)), s])) for s in range(ORACLE_SEEDS))


@register("oracle:matmul", ORACLE)
def _matmul_oracle(rng, **_):
    def trial(r):
        m, k, n = r.integers(1, 9, size=3)
        a, b = r.normal(size=(m, k)), r.normal(size=(k, n))
        loops = [[math.fsum(a[i, t] * b[t, j] for t in range(k)) for j in range(n)] for i in range(m)]
        return _relative(ops.matmul(a, b).data, loops)

    return _worst(rng, trial)


@register("oracle:conv2d", ORACLE)
def _conv_oracle(rng, **_):
    def trial(r):
        x, w, b = r.normal(size=(2, 6, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        out = np.zeros((3, 3, 3))
        for o in range(3):
            for y in range(3):
                for z in range(3):
                    terms = [
                        padded[c, 2 * y + i, 2 * z + j] * w[o, c, i, j]
                        for c in range(2)
                        for i in range(3)
                        for j in range(3)
                    ]
                    out[o, y, z] = math.fsum(terms + [b[o]])
        return _relative(ops.conv2d(x, w, b, stride=2, padding=1).data, out)

    return _worst(rng, trial)


@register("oracle:mhsa_2d", ORACLE)
def _mhsa_oracle(rng, **_):
    def trial(r):
        cfg = Mhsa2dConfig(2, 4, 2, 3)
        layer = Mhsa2d(cfg, r)
        f = r.normal(size=(4, 2, 3))
        tokens = f.reshape(4, 6).T
        q, k, v = (tokens @ getattr(layer, name).weight.data for name in ("query", "key", "value"))
        out = np.zeros_like(tokens)
        for head in range(2):
            cols = slice(2 * head, 2 * head + 2)
            scores = np.array([[np.dot(q[i, cols], k[j, cols]) / math.sqrt(2) for j in range(6)] for i in range(6)])
            out[:, cols] = _softmax_rows(scores) @ v[:, cols]
        return _relative(mhsa_2d(f, cfg, layer).data, out.T.reshape(4, 2, 3))

    return _worst(rng, trial)


@register("oracle:vector_attention", ORACLE)
def _vector_oracle(rng, **_):
    def trial(r):
        layer = VectorAttentionLayer(3, r)
        g, p = r.normal(size=(6, 3)), r.normal(size=(6, 3))
        neighbors = knn(p, 3)

        def linear(module, x):
            return x @ module.weight.data + module.bias.data

        def mlp(module, x):
            return linear(module.second, np.maximum(linear(module.first, x), 0.0))

        out = np.zeros_like(g)
        for i, row in enumerate(neighbors):
            deltas = [mlp(layer.position_encoding, p[i] - p[j]) for j in row]
            query = linear(layer.query, g[i])
            scores = np.array(
                [mlp(layer.weight_encoding, query - linear(layer.key, g[j]) + d) for j, d in zip(row, deltas)]
            )
            values = np.array([linear(layer.value, g[j]) + d for j, d in zip(row, deltas)])
            out[i] = (_softmax_rows(scores.T).T * values).sum(axis=0)
        return _relative(vector_cross_attention(g, p, neighbors, layer).data, out)

    return _worst(rng, trial)


@register("oracle:global_attention", ORACLE)
def _global_oracle(rng, **_):
    def trial(r):
        layer = GlobalAttentionLayer(3, r)
        g = r.normal(size=(5, 3))
        q, k, v = (g @ getattr(layer, name).weight.data for name in ("query", "key", "value"))
        out = np.zeros_like(g)
        for i in range(5):
            others = [j for j in range(5) if j != i]
            logits = np.array([np.dot(q[i], k[j]) / math.sqrt(3) for j in others])
            out[i] = _softmax_rows(logits) @ v[others]
        return _relative(global_scalar_attention(g, layer).data, out)

    return _worst(rng, trial)


@register("oracle:knn", ORACLE)
def _knn_oracle(rng, **_):
    def trial(r):
        points = r.normal(size=(int(r.integers(5, 40)), 3))
        k = int(r.integers(1, 5))
        expected = [
            [j for _, j in sorted((math.dist(p, q), j) for j, q in enumerate(points) if j != i)[:k]]
            for i, p in enumerate(points)
        ]
        return float(np.mean(knn(points, k) != np.array(expected)))

    return _worst(rng, trial)


@register("oracle:fps", ORACLE)
def _fps_oracle(rng, **_):
    def trial(r):
        points = r.normal(size=(int(r.integers(5, 40)), 3))
        count = int(r.integers(2, 6))
        chosen = [0]
        while len(chosen) < count:
            gaps = [(min(math.dist(q, points[s]) for s in chosen), -j) for j, q in enumerate(points) if j not in chosen]
            chosen.append(-max(gaps)[1])
        return float(np.mean(downsample_fps(points, count) != np.array(chosen)))

    return _worst(rng, trial)


@register("oracle:metrics", ORACLE)
def _metrics_oracle(rng, **_):
    def trial(r):
        gt = r.uniform(0.5, 12.0, size=(6, 7)) * (r.random((6, 7)) < 0.8)
        pred = r.uniform(0.4, 11.0, size=(6, 7))
        pairs = [(float(d), float(g)) for d, g in zip(pred.ravel(), gt.ravel()) if 0 < g <= 10.0]
        if not pairs:
            return 0.0
        n = len(pairs)
        report = evaluate(pred, gt, 10.0)
        expected = [
            math.sqrt(math.fsum((d - g) ** 2 for d, g in pairs) / n),
            math.fsum(abs(d - g) for d, g in pairs) / n,
            math.fsum(abs(d - g) / g for d, g in pairs) / n,
            math.sqrt(math.fsum((1000 / d - 1000 / g) ** 2 for d, g in pairs) / n),
            math.fsum(abs(1000 / d - 1000 / g) for d, g in pairs) / n,
        ]
        actual = [report.rmse, report.mae, report.abs_rel, report.irmse, report.imae]
        return max(abs(a - e) / max(1.0, abs(e)) for a, e in zip(actual, expected))

    return _worst(rng, trial)
