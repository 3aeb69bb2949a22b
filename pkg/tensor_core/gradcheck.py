import logging

import numpy as np

from main.exceptions import ContractError

from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

KINK_TOLERANCE = 1e-3


def _scalar(f, arrays):
    # throwaway tape: f may close over parameters that still require grad
    with Tape():
        out = f(*[Tensor(a) for a in arrays])
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def analytic_gradients(f, inputs):
    with Tape() as tape:
        leaves = [Tensor(np.asarray(x.data if isinstance(x, Tensor) else x), True) for x in inputs]
        out = f(*leaves)
        if out.data.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        if out.node_id is None:
            return [np.zeros(leaf.shape) for leaf in leaves]
        grads = tape.backward(out)
    return [grads[leaf] for leaf in leaves]


def grad_check(f, inputs, eps=1e-6, floor=1e-12, coords_per_input=None, seed=0):
    """
    Max over checked coordinates of
    ``|analytic − central difference| / max(|analytic|, |cd|, floor)``.

    Coordinates where the one-sided differences disagree (a kink such as relu
    at exactly 0) are skipped. ``coords_per_input`` samples a seeded subset of
    coordinates for large inputs.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    analytic = analytic_gradients(f, arrays)
    base = _scalar(f, arrays)
    rng = np.random.default_rng(seed)

    worst = 0.0
    skipped = 0
    for position, array in enumerate(arrays):
        coords = list(np.ndindex(array.shape))
        if coords_per_input is not None and len(coords) > coords_per_input:
            picks = rng.choice(len(coords), size=coords_per_input, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        for index in coords:
            original = array[index]
            array[index] = original + eps
            plus = _scalar(f, arrays)
            array[index] = original - eps
            minus = _scalar(f, arrays)
            array[index] = original

            forward = (plus - base) / eps
            backward = (base - minus) / eps
            if abs(forward - backward) > KINK_TOLERANCE * max(abs(forward), abs(backward), 1.0):
                skipped += 1
                continue
            central = (plus - minus) / (2.0 * eps)
            exact = float(analytic[position][index])
            error = abs(exact - central) / max(abs(exact), abs(central), floor)
            worst = max(worst, error)

    if skipped:
        logger.debug(f"[GRADCHECK] skipped {skipped} non-differentiable coordinates")
    return worst
