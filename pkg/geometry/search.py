"""Exact neighbor search and farthest-point downsampling over N×3 positions."""

import numpy as np

from main.exceptions import ContractError, DimensionError
from tensor_core.tensor import Tensor

# query rows per distance block
BLOCK_ROWS = 512


def _coords(points) -> np.ndarray:
    if hasattr(points, "positions"):
        points = points.positions
    if isinstance(points, Tensor):
        points = points.data
    coords = np.asarray(points, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"expected N×3 positions, got {coords.shape}")
    return coords


def _squared_distances(queries, points):
    diff = queries[:, None, :] - points[None, :, :]
    return np.einsum("ijc,ijc->ij", diff, diff)


def knn(points, k: int) -> np.ndarray:
    """
    N×k table of each point's k nearest other points, rows ordered by
    (distance, index).
    """
    coords = _coords(points)
    n = len(coords)
    if not 1 <= k <= n - 1:
        raise ContractError(f"knn needs 1 <= k <= N-1, got k={k} for N={n}")
    table = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, BLOCK_ROWS):
        stop = min(start + BLOCK_ROWS, n)
        dist = _squared_distances(coords[start:stop], coords)
        dist[np.arange(stop - start), np.arange(start, stop)] = np.inf
        # stable sort keeps the lower index first among equal distances
        table[start:stop] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return table


def downsample_fps(points, count: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest-point selection starting from ``start_index``; ties go to the lower index."""
    coords = _coords(points)
    n = len(coords)
    if not 1 <= count <= n:
        raise ContractError(f"downsample_fps needs 1 <= count <= N, got count={count} for N={n}")
    if not 0 <= start_index < n:
        raise ContractError(f"start_index {start_index} out of range for N={n}")

    selected = [start_index]
    nearest = _squared_distances(coords[start_index : start_index + 1], coords)[0]
    nearest[start_index] = -1.0
    for _ in range(count - 1):
        pick = int(np.argmax(nearest))
        selected.append(pick)
        nearest = np.minimum(nearest, _squared_distances(coords[pick : pick + 1], coords)[0])
        nearest[pick] = -1.0
    return np.asarray(selected, dtype=np.int64)


def nearest_selected(points, selected) -> np.ndarray:
    """For every point, the position in ``selected`` of its nearest selected point."""
    coords = _coords(points)
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size == 0:
        raise ContractError("nearest_selected needs at least one selected point")
    anchors = coords[selected]
    assignment = np.empty(len(coords), dtype=np.int64)
    for start in range(0, len(coords), BLOCK_ROWS):
        stop = min(start + BLOCK_ROWS, len(coords))
        assignment[start:stop] = np.argmin(_squared_distances(coords[start:stop], anchors), axis=1)
    return assignment
