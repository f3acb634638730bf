"""Pinhole camera: projection and its analytic Jacobian.

The camera sits at the origin looking down +z with x right and y down, and
world coordinates are camera coordinates.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_points

DEPTH_EPS = 1e-6


class ProjectionError(ValueError):
    """A point at or behind the camera plane was projected."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"intrinsic {name} must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def check_image_size(self, width, height):
        """Principal point must lie inside a ``width`` x ``height`` image."""
        if not (0 <= self.cx <= width and 0 <= self.cy <= height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {width}x{height} image")


def _project(K, P):
    z = P[:, 2]
    return np.column_stack([K.fx * P[:, 0] / z + K.cx, K.fy * P[:, 1] / z + K.cy])


def project(K, v):
    """Project one point (3,) or many (M, 3) to pixel coordinates.

    Raises :class:`ProjectionError` if any depth is <= ``DEPTH_EPS``.
    """
    P, single = check_points(v, 3, name="v", allow_single=True)
    bad = P[:, 2] <= DEPTH_EPS
    if bad.any():
        raise ProjectionError(f"point behind camera (depth={P[bad][0, 2]:.6g})")
    uv = _project(K, P)
    return uv[0] if single else uv


def project_unchecked(K, P):
    """Vectorised projection returning ``(uv, in_front)`` without raising.

    Entries with ``in_front == False`` hold NaN.
    """
    P = np.asarray(P, dtype=np.float64)
    in_front = P[:, 2] > DEPTH_EPS
    uv = np.full((P.shape[0], 2), np.nan)
    if in_front.any():
        uv[in_front] = _project(K, P[in_front])
    return uv, in_front


def _jacobian(K, P):
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    J = np.zeros((P.shape[0], 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z ** 2
    return J


def project_jacobian(K, v):
    """d project / d v: a 2x3 matrix, or (M, 2, 3) for stacked points."""
    P, single = check_points(v, 3, name="v", allow_single=True)
    bad = P[:, 2] <= DEPTH_EPS
    if bad.any():
        raise ProjectionError(f"point behind camera (depth={P[bad][0, 2]:.6g})")
    J = _jacobian(K, P)
    return J[0] if single else J


def project_jacobian_unchecked(K, P):
    """Like :func:`project_jacobian`; rows behind the camera are zero."""
    P = np.asarray(P, dtype=np.float64)
    J = np.zeros((P.shape[0], 2, 3))
    ok = P[:, 2] > DEPTH_EPS
    if ok.any():
        J[ok] = _jacobian(K, P[ok])
    return J
