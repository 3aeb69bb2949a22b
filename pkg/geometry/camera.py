from dataclasses import dataclass, field

import numpy as np

from main.exceptions import GeometryError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    gamma_u: float
    gamma_v: float
    c_u: float
    c_v: float

    def __post_init__(self):
        for name in ("gamma_u", "gamma_v", "c_u", "c_v"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise GeometryError(f"intrinsics {name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.gamma_u <= 0 or self.gamma_v <= 0:
            raise GeometryError(
                f"focal lengths must be positive, got gamma_u={self.gamma_u} gamma_v={self.gamma_v}"
            )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image whose pixel grid is resampled by ``factor``."""
        return CameraIntrinsics(
            self.gamma_u * factor, self.gamma_v * factor, self.c_u * factor, self.c_v * factor
        )

    def to_dict(self) -> dict:
        return {"gamma_u": self.gamma_u, "gamma_v": self.gamma_v, "c_u": self.c_u, "c_v": self.c_v}

    @classmethod
    def from_dict(cls, payload: dict) -> "CameraIntrinsics":
        try:
            return cls(*(payload[key] for key in ("gamma_u", "gamma_v", "c_u", "c_v")))
        except KeyError as exc:
            raise GeometryError(f"intrinsics missing key {exc.args[0]!r}")
        except (TypeError, ValueError) as exc:
            raise GeometryError(f"intrinsics values must be numbers: {exc}")


@dataclass(frozen=True)
class DepthMap:
    """
    Per-pixel depth in meters. Zero marks an invalid pixel; every value is
    finite and non-negative.
    """

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise GeometryError(f"depth map must be H×W, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise GeometryError("depth map contains non-finite values")
        if np.any(values < 0):
            raise GeometryError("depth map contains negative values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values > 0

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.values))


class SparseDepth(DepthMap):
    """A depth map holding measurements at a small subset of pixels."""
