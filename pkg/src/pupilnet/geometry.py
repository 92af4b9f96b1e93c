"""Ellipse representation, direct least-squares fitting and conic transforms.

Coordinates are continuous pixel coordinates: pixel ``(row i, col j)`` covers
the unit square ``[j, j+1] x [i, i+1]`` and has its center at
``(j + 0.5, i + 0.5)``. With this convention a horizontal flip is exactly
``x -> W - x`` and a resize by ``s`` is exactly ``x -> s * x``.

Angles are degrees, measured counterclockwise from the horizontal axis as
seen on screen (image rows grow downward), canonical range ``[0, 180)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage
from skimage.measure import regionprops

from .errors import (
    DegenerateInput,
    EmptyMask,
    InvariantViolation,
    NonSquareInput,
    OutOfRange,
    RejectedByAspect,
    RejectedBySolidity,
    SingularTransform,
)

FILTER_THRESHOLD = 0.5


def _wrap_angle(theta: float) -> float:
    t = math.fmod(theta, 180.0)
    if t < 0:
        t += 180.0
    # fmod can land on 180.0 after the shift for tiny negative inputs
    return 0.0 if t >= 180.0 else t


@dataclass(frozen=True)
class Ellipse:
    """Pupil boundary as the quintuple (xc, yc, a, b, theta).

    ``a`` and ``b`` are semi-axes in pixels with ``a >= b > 0``; ``theta`` is
    the direction of the major axis in degrees. Construct through
    :meth:`canonical` when the axis order or angle range is not guaranteed.
    """

    xc: float
    yc: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        vals = (self.xc, self.yc, self.a, self.b, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise InvariantViolation(f"non-finite ellipse parameters {vals}")
        if not self.b > 0:
            raise InvariantViolation(f"semi-minor axis must be positive, got {self.b}")
        if self.a < self.b:
            raise InvariantViolation(f"semi-major axis {self.a} < semi-minor axis {self.b}")
        if not 0.0 <= self.theta < 180.0:
            raise InvariantViolation(f"theta {self.theta} outside [0, 180)")

    @classmethod
    def canonical(cls, xc, yc, ax1, ax2, theta) -> Ellipse:
        """Build an ellipse from unordered semi-axes.

        ``theta`` is the direction of ``ax1``. If ``ax2 > ax1`` the axes are
        swapped and the angle rotated by 90 degrees. Circles get theta 0.
        """
        xc, yc, ax1, ax2, theta = (float(v) for v in (xc, yc, ax1, ax2, theta))
        if ax2 > ax1:
            ax1, ax2, theta = ax2, ax1, theta + 90.0
        theta = 0.0 if ax1 == ax2 else _wrap_angle(theta)
        return cls(xc, yc, ax1, ax2, theta)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.xc, self.yc])

    def major_direction(self) -> np.ndarray:
        t = math.radians(self.theta)
        # screen-counterclockwise: y grows downward in pixel coordinates
        return np.array([math.cos(t), -math.sin(t)])

    def to_dict(self) -> dict:
        return {"xc": self.xc, "yc": self.yc, "a": self.a, "b": self.b, "theta_deg": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> Ellipse:
        return cls(float(d["xc"]), float(d["yc"]), float(d["a"]), float(d["b"]), float(d["theta_deg"]))

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.xc, self.yc, self.a, self.b, self.theta)


@dataclass(frozen=True)
class NormalizedEllipse:
    """Regression target: center and full axes over the image side, angle over 180."""

    nxc: float
    nyc: float
    nd_major: float
    nd_minor: float
    ntheta: float

    def validate(self) -> NormalizedEllipse:
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise OutOfRange(f"non-finite normalized parameters {tuple(vals)}")
        if not (0 < self.nxc < 1 and 0 < self.nyc < 1):
            raise OutOfRange(f"normalized center ({self.nxc}, {self.nyc}) outside (0, 1)")
        if not 0 < self.nd_major < 1:
            raise OutOfRange(f"normalized major axis {self.nd_major} outside (0, 1)")
        if not 0 < self.nd_minor:
            raise OutOfRange(f"normalized minor axis {self.nd_minor} not positive")
        if self.nd_minor > self.nd_major:
            raise InvariantViolation(f"minor axis {self.nd_minor} exceeds major axis {self.nd_major}")
        if not -1 <= self.ntheta <= 1:
            raise OutOfRange(f"normalized angle {self.ntheta} outside [-1, 1]")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.nxc, self.nyc, self.nd_major, self.nd_minor, self.ntheta], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> NormalizedEllipse:
        v = [float(x) for x in np.asarray(values, dtype=np.float64).reshape(5)]
        return cls(*v)


@dataclass(frozen=True)
class AffineTransform2D:
    """``p -> m @ p + t`` on continuous pixel coordinates."""

    m: np.ndarray = field(default_factory=lambda: np.eye(2))
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64).reshape(2, 2))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(2))

    @property
    def matrix(self) -> np.ndarray:
        h = np.eye(3)
        h[:2, :2] = self.m
        h[:2, 2] = self.t
        return h

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.m.T + self.t

    def then(self, other: AffineTransform2D) -> AffineTransform2D:
        """Composition applying ``self`` first, then ``other``."""
        return AffineTransform2D(other.m @ self.m, other.m @ self.t + other.t)

    def inverse(self) -> AffineTransform2D:
        if abs(np.linalg.det(self.m)) < 1e-15:
            raise SingularTransform("affine transform is not invertible")
        mi = np.linalg.inv(self.m)
        return AffineTransform2D(mi, -mi @ self.t)

    @classmethod
    def identity(cls) -> AffineTransform2D:
        return cls()

    @classmethod
    def scale(cls, sx: float, sy: float | None = None) -> AffineTransform2D:
        return cls(np.diag([sx, sx if sy is None else sy]))

    @classmethod
    def translate(cls, dx: float, dy: float) -> AffineTransform2D:
        return cls(np.eye(2), [dx, dy])

    @classmethod
    def rotation(cls, degrees: float, cx: float = 0.0, cy: float = 0.0) -> AffineTransform2D:
        """Screen-counterclockwise rotation about ``(cx, cy)``."""
        r = math.radians(degrees)
        c, s = math.cos(r), math.sin(r)
        # y axis points down, so a visual ccw turn is a clockwise matrix in (x, y)
        m = np.array([[c, s], [-s, c]])
        center = np.array([cx, cy])
        return cls(m, center - m @ center)

    @classmethod
    def hflip(cls, width: float) -> AffineTransform2D:
        return cls(np.diag([-1.0, 1.0]), [width, 0.0])

    @classmethod
    def vflip(cls, height: float) -> AffineTransform2D:
        return cls(np.diag([1.0, -1.0]), [0.0, height])

    @classmethod
    def rot90(cls, k: int, width: float, height: float) -> AffineTransform2D:
        """Point map matching ``np.rot90(image, k)`` for an image of the given size."""
        k %= 4
        if k == 0:
            return cls()
        if k == 1:
            return cls([[0.0, 1.0], [-1.0, 0.0]], [0.0, width])
        if k == 2:
            return cls(-np.eye(2), [width, height])
        return cls([[0.0, -1.0], [1.0, 0.0]], [height, 0.0])


# --- conic <-> quintuple ---------------------------------------------------

def ellipse_to_conic(e: Ellipse) -> np.ndarray:
    """Symmetric 3x3 matrix ``C`` with ``[x y 1] C [x y 1]^T = 0`` on the boundary, < 0 inside."""
    u = e.major_direction()
    v = np.array([-u[1], u[0]])
    q = np.outer(u, u) / e.a**2 + np.outer(v, v) / e.b**2
    c = e.center
    conic = np.empty((3, 3))
    conic[:2, :2] = q
    conic[:2, 2] = conic[2, :2] = -q @ c
    conic[2, 2] = c @ q @ c - 1.0
    return conic


def conic_to_ellipse(conic: np.ndarray) -> Ellipse:
    conic = np.asarray(conic, dtype=np.float64)
    conic = 0.5 * (conic + conic.T)
    q = conic[:2, :2]
    if np.linalg.det(q) <= 0:
        raise DegenerateInput("conic is not an ellipse")
    if q[0, 0] < 0:
        conic = -conic
        q = conic[:2, :2]
    center = np.linalg.solve(q, -conic[:2, 2])
    k = conic[2, 2] + conic[:2, 2] @ center
    if not k < 0:
        raise DegenerateInput("conic is an imaginary or point ellipse")
    evals, evecs = np.linalg.eigh(q / -k)
    ax = 1.0 / np.sqrt(evals)
    d = evecs[:, 0]
    theta = math.degrees(math.atan2(-d[1], d[0]))
    return Ellipse.canonical(center[0], center[1], ax[0], ax[1], theta)


def conic_coefficients(e: Ellipse) -> np.ndarray:
    """(A, B, C, D, E, F) of ``Ax^2 + Bxy + Cy^2 + Dx + Ey + F = 0``."""
    m = ellipse_to_conic(e)
    return np.array([m[0, 0], 2 * m[0, 1], m[1, 1], 2 * m[0, 2], 2 * m[1, 2], m[2, 2]])


# --- fitting ----------------------------------------------------------------

def fit_ellipse_lsq(points) -> Ellipse:
    """Direct least-squares ellipse fit with the block-decomposed eigenproblem.

    Minimizes the algebraic distance subject to ``4AC - B^2 = 1``. Points are
    centered and scaled before building the scatter matrices so the fit is
    well conditioned at any image scale.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2:
        raise DegenerateInput(f"expected an (N, 2) point array, got shape {p.shape}")
    if len(p) < 6:
        raise DegenerateInput(f"need at least 6 points, got {len(p)}")
    if not np.all(np.isfinite(p)):
        raise DegenerateInput("points contain non-finite values")

    mean = p.mean(axis=0)
    centered = p - mean
    scale = math.sqrt((centered**2).sum(axis=1).mean())
    if scale == 0:
        raise DegenerateInput("all points coincide")
    sv = np.linalg.svd(centered / scale, compute_uv=False)
    if sv[-1] < 1e-9 * sv[0]:
        raise DegenerateInput("points are collinear")
    x, y = (centered / scale).T

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInput("singular linear scatter block") from exc
    reduced = s1 + s2 @ t
    # premultiply by the inverse of the 3x3 constraint block
    m = np.vstack([reduced[2] / 2.0, -reduced[1], reduced[0] / 2.0])
    evals, evecs = np.linalg.eig(m)
    evecs = np.real(evecs)
    cond = 4 * evecs[0] * evecs[2] - evecs[1] ** 2
    candidates = np.flatnonzero(cond > 0)
    if candidates.size == 0:
        raise DegenerateInput("constrained eigenproblem has no elliptic solution")
    a1 = evecs[:, candidates[np.argmin(np.abs(np.real(evals[candidates])))]]
    a2 = t @ a1
    A, B, C = a1
    D, E, F = a2
    conic = np.array([[A, B / 2, D / 2], [B / 2, C, E / 2], [D / 2, E / 2, F]])
    norm = np.array([[1 / scale, 0, -mean[0] / scale], [0, 1 / scale, -mean[1] / scale], [0, 0, 1]])
    try:
        return conic_to_ellipse(norm.T @ conic @ norm)
    except (DegenerateInput, np.linalg.LinAlgError) as exc:
        raise DegenerateInput(f"fit did not produce a valid ellipse: {exc}") from exc


# --- masks ------------------------------------------------------------------

def _as_binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[..., 0]
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    return (m > (127 if m.dtype == np.uint8 and m.max() > 1 else 0.5)).astype(np.uint8)


def largest_component(mask) -> np.ndarray:
    """Largest 8-connected foreground component as a {0,1} uint8 mask."""
    m = _as_binary(mask)
    if not m.any():
        raise EmptyMask("mask has no foreground pixels")
    n, labels, stats, _ = cv2.connectedComponentsWithStats(m, connectivity=8)
    if n == 2:
        return m
    best = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    return (labels == best).astype(np.uint8)


def boundary_points(mask) -> np.ndarray:
    """Crack-edge boundary points of a binary region.

    One point per foreground/background 4-neighbour pair, placed midway between
    the two pixel centers. Unlike the boundary pixel centers themselves these
    points carry no inward bias of half a pixel.
    """
    m = _as_binary(mask)
    h, w = m.shape
    padded = np.pad(m, 1)
    xs, ys = [], []
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        i, j = np.nonzero((m == 1) & (nb == 0))
        xs.append(j + 0.5 + 0.5 * dx)
        ys.append(i + 0.5 + 0.5 * dy)
    return np.column_stack([np.concatenate(xs), np.concatenate(ys)]).astype(np.float64)


def solidity(mask) -> float:
    """Area of the largest component over the area of its filled convex hull."""
    comp = largest_component(mask)
    props = regionprops(comp)[0]
    return float(props.solidity)


def mask_to_ellipse(mask, threshold: float = FILTER_THRESHOLD) -> Ellipse:
    """Fit the pupil ellipse to the largest component of a binary mask.

    Raises :class:`RejectedBySolidity` or :class:`RejectedByAspect` when the
    region fails the outlier filter (both thresholds default to 0.5).
    """
    comp = largest_component(mask)
    sol = float(regionprops(comp)[0].solidity)
    if sol < threshold:
        raise RejectedBySolidity(sol, threshold)
    filled = ndimage.binary_fill_holes(comp).astype(np.uint8)
    e = fit_ellipse_lsq(boundary_points(filled))
    aspect = e.b / e.a
    if aspect < threshold:
        raise RejectedByAspect(aspect, threshold)
    return e


def rasterize_ellipse(e: Ellipse, height: int, width: int) -> np.ndarray:
    """{0,1} uint8 mask of the pixels whose centers lie inside or on ``e``."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    u = e.major_direction()
    dx, dy = x - e.xc, y - e.yc
    along = dx * u[0] + dy * u[1]
    across = -dx * u[1] + dy * u[0]
    return ((along / e.a) ** 2 + (across / e.b) ** 2 <= 1.0).astype(np.uint8)


# --- transforms and normalization -----------------------------------------

def transform_ellipse(e: Ellipse, t: AffineTransform2D) -> Ellipse:
    """Image of ``e`` under an invertible affine map, exact for any such map.

    General maps push the conic matrix through ``T^-T C T^-1``. Rigid maps
    (rotations, flips, translations) use the closed form so axis lengths are
    carried over untouched.
    """
    det = np.linalg.det(t.m)
    if abs(det) < 1e-15:
        raise SingularTransform(f"affine transform has determinant {det}")
    center = t.m @ e.center + t.t
    if np.allclose(t.m.T @ t.m, np.eye(2), rtol=0, atol=1e-14):
        if e.a == e.b:
            theta = 0.0
        elif np.all(np.isin(t.m, (-1.0, 0.0, 1.0))):
            theta = _permuted_angle(e.theta, t.m)
        else:
            d = t.m @ e.major_direction()
            theta = math.degrees(math.atan2(-d[1], d[0]))
        return Ellipse(float(center[0]), float(center[1]), e.a, e.b, _wrap_angle(theta))
    tinv = np.linalg.inv(t.matrix)
    conic = tinv.T @ ellipse_to_conic(e) @ tinv
    out = conic_to_ellipse(conic)
    assert out.b > 0, "invertible affine map produced a non-ellipse"
    # the center is an affine covariant; take it from the direct map
    return Ellipse(float(center[0]), float(center[1]), out.a, out.b, out.theta)


def _permuted_angle(theta: float, m: np.ndarray) -> float:
    """Angle after a flip or quarter turn, without trigonometric round-off."""
    if m[0, 1] == 0:
        # diagonal: identity, point reflection, or an axis flip
        return theta if m[0, 0] == m[1, 1] else 180.0 - theta
    # anti-diagonal: quarter turns keep handedness, the two diagonal mirrors swap it
    return theta + 90.0 if m[0, 1] == -m[1, 0] else 90.0 - theta


def normalize_params(e: Ellipse, width: int, height: int | None = None) -> NormalizedEllipse:
    if height is not None and height != width:
        raise NonSquareInput(f"network input must be square, got {width}x{height}")
    theta = e.theta if e.theta <= 180.0 else e.theta - 360.0
    n = NormalizedEllipse(e.xc / width, e.yc / width, 2 * e.a / width, 2 * e.b / width, theta / 180.0)
    return n.validate()


def denormalize_params(n: NormalizedEllipse, width: int) -> Ellipse:
    n.validate()
    return Ellipse(
        n.nxc * width,
        n.nyc * width,
        n.nd_major * width / 2,
        n.nd_minor * width / 2,
        _wrap_angle(n.ntheta * 180.0),
    )


def decode_prediction(values, width: int) -> Ellipse:
    """Lenient decoding of raw head outputs: swaps axes and wraps the angle as needed."""
    v = np.asarray(values, dtype=np.float64).reshape(5)
    ax1 = max(v[2] * width / 2, 1e-6)
    ax2 = max(v[3] * width / 2, 1e-6)
    return Ellipse.canonical(v[0] * width, v[1] * width, ax1, ax2, v[4] * 180.0)


def pupil_diameter(e: Ellipse) -> float:
    """Pupil diameter as the sum of the semi-axes."""
    return e.a + e.b
