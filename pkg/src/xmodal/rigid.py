"""2D rigid transforms (translation + rotation) and image resampling.

Points are ``(x, y)`` with x along columns and y along rows. A transform maps
source coordinates to target coordinates as ``p' = R(theta) (p - c) + c + t``
where ``c`` is the stored rotation center (normally the source image center)
and theta is in degrees, counter-clockwise in the (x, y) basis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

FEATURE_STRIDE = 8


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform2D:
    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0  # degrees CCW
    cx: float = 0.0
    cy: float = 0.0
    frame: str = "pixel"  # "pixel" | "feature"

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix acting on (x, y, 1) column vectors."""
        a = np.deg2rad(self.theta)
        c, s = np.cos(a), np.sin(a)
        r = np.array([[c, -s], [s, c]])
        center = np.array([self.cx, self.cy])
        t = center + np.array([self.tx, self.ty]) - r @ center
        m = np.eye(3)
        m[:2, :2] = r
        m[:2, 2] = t
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray, frame: str = "pixel") -> "RigidTransform2D":
        theta = np.rad2deg(np.arctan2(m[1, 0], m[0, 0]))
        return cls(tx=float(m[0, 2]), ty=float(m[1, 2]), theta=float(theta),
                   cx=0.0, cy=0.0, frame=frame)


def identity(frame: str = "pixel") -> RigidTransform2D:
    return RigidTransform2D(frame=frame)


def apply(t: RigidTransform2D, points: np.ndarray) -> np.ndarray:
    """Transform an ``(..., 2)`` array of (x, y) points."""
    pts = np.asarray(points, dtype=np.float64)
    m = t.matrix()
    return pts @ m[:2, :2].T + m[:2, 2]


def compose(a: RigidTransform2D, b: RigidTransform2D) -> RigidTransform2D:
    """Transform applying ``b`` first, then ``a`` (result centered at origin)."""
    if a.frame != b.frame:
        raise FrameError(f"frame mismatch: {a.frame} vs {b.frame}")
    return RigidTransform2D.from_matrix(a.matrix() @ b.matrix(), frame=a.frame)


def invert(t: RigidTransform2D) -> RigidTransform2D:
    return RigidTransform2D.from_matrix(np.linalg.inv(t.matrix()), frame=t.frame)


def to_pixel_coords(t: RigidTransform2D, stride: int = FEATURE_STRIDE) -> RigidTransform2D:
    """Rescale a feature-frame transform to pixel coordinates."""
    if t.frame != "feature":
        raise FrameError(f"expected feature frame, got {t.frame}")
    return replace(t, tx=t.tx * stride, ty=t.ty * stride,
                   cx=t.cx * stride, cy=t.cy * stride, frame="pixel")


def resample_rigid(image: np.ndarray, t: RigidTransform2D, out_shape,
                   interp: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    """Warp ``image`` (C,H,W) so that output pixel p holds the input at t^-1(p).

    Out-of-bounds reads return ``fill``. ``interp`` is "bilinear" or "nearest"
    (nearest keeps masks binary).
    """
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    oh, ow = int(out_shape[0]), int(out_shape[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"out_shape must be positive, got {out_shape}")

    minv = np.linalg.inv(t.matrix())
    ys, xs = np.meshgrid(np.arange(oh, dtype=np.float64),
                         np.arange(ow, dtype=np.float64), indexing="ij")
    sx = minv[0, 0] * xs + minv[0, 1] * ys + minv[0, 2]
    sy = minv[1, 0] * xs + minv[1, 1] * ys + minv[1, 2]

    out = np.full((c, oh, ow), fill, dtype=img.dtype)
    if interp == "nearest":
        ix = np.round(sx).astype(np.int64)
        iy = np.round(sy).astype(np.int64)
        valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out[:, valid] = img[:, iy[valid], ix[valid]]
    elif interp == "bilinear":
        x0 = np.floor(sx).astype(np.int64)
        y0 = np.floor(sy).astype(np.int64)
        fx = sx - x0
        fy = sy - y0
        acc = np.zeros((c, oh, ow), dtype=np.float64)
        wsum = np.zeros((oh, ow), dtype=np.float64)
        for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                            (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wv = np.where(ok, wgt, 0.0)
            acc[:, ok] += img[:, yi[ok], xi[ok]] * wv[ok]
            wsum += wv
        # Corners falling fully outside take the fill; partly-covered pixels
        # blend sampled mass with the fill for the missing fraction.
        full = wsum > 0
        acc[:, full] += fill * (1.0 - wsum[full])
        out[:, full] = acc[:, full].astype(img.dtype)
    else:
        raise ValueError(f"unknown interp {interp!r}")
    return out[0] if squeeze else out


def image_center(shape_hw) -> tuple[float, float]:
    """(cx, cy) of an H x W image."""
    h, w = shape_hw
    return ((w - 1) / 2.0, (h - 1) / 2.0)
