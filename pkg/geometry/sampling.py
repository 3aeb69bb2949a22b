import logging

import numpy as np

from main.exceptions import ContractError

from .camera import DepthMap, SparseDepth

logger = logging.getLogger(__name__)


def sample_sparse_depth(dense: DepthMap, n: int, seed) -> SparseDepth:
    """
    Keep ``n`` valid pixels chosen uniformly without replacement; every valid
    pixel when ``n`` is at least the valid count. ``seed`` is anything
    ``numpy.random.default_rng`` accepts, e.g. ``(seed, step)``.
    """
    if n < 1:
        raise ContractError(f"sparse sample count must be >= 1, got {n}")
    valid = np.flatnonzero(dense.values)
    if valid.size == 0:
        raise ContractError("dense depth map has no valid pixels to sample")
    if n >= valid.size:
        chosen = valid
    else:
        chosen = np.random.default_rng(seed).choice(valid, size=n, replace=False)
    values = np.zeros(dense.values.size)
    values[chosen] = dense.values.reshape(-1)[chosen]
    logger.debug(f"[SPARSE] kept={chosen.size} valid={valid.size}")
    return SparseDepth(values.reshape(dense.shape))
