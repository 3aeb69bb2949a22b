import numpy as np

from geometry.camera import DepthMap
from main.exceptions import ContractError, DimensionError
from tensor_core import ops
from tensor_core.tensor import Tensor


def masked_l1_loss(pred, gt) -> Tensor:
    """Mean absolute error over pixels with positive ground truth."""
    pred = Tensor(pred.values) if isinstance(pred, DepthMap) else ops.as_tensor(pred)
    gt_values = gt.values if isinstance(gt, DepthMap) else np.asarray(gt, dtype=np.float64)
    if pred.shape != gt_values.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt_values.shape} differ")
    valid = np.flatnonzero(gt_values > 0)
    if valid.size == 0:
        raise ContractError("ground truth has no valid pixels")
    # only valid pixels enter the graph; invalid predictions may be anything, inf and nan included
    selected = ops.gather_rows(ops.reshape(pred, (-1,)), valid)
    errors = ops.absolute(selected - Tensor(gt_values.reshape(-1)[valid]))
    return ops.sum(errors) / float(valid.size)
