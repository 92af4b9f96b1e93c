import math

import cv2
import numpy as np

from pupilnet.geometry import Ellipse


def ellipse_points(xc, yc, a, b, theta, n=64, phase=0.0):
    """Points on the ellipse from the parametric form (screen-ccw angle)."""
    t = np.linspace(0, 2 * np.pi, n, endpoint=False) + phase
    r = math.radians(theta)
    u = np.array([math.cos(r), -math.sin(r)])
    v = np.array([math.sin(r), math.cos(r)])
    return np.array([xc, yc]) + np.outer(a * np.cos(t), u) + np.outer(b * np.sin(t), v)


def angle_diff(t1, t2):
    """Smallest difference between two axis directions in degrees."""
    d = (t1 - t2) % 180.0
    return min(d, 180.0 - d)


def random_interior_ellipse(rng, height=224, width=224, b_range=(8.0, 40.0), margin=2.0):
    b = rng.uniform(*b_range)
    a = b / rng.uniform(0.5, 1.0)
    theta = rng.uniform(0, 180)
    xc = rng.uniform(a + margin, width - a - margin)
    yc = rng.uniform(a + margin, height - a - margin)
    return Ellipse.canonical(xc, yc, a, b, theta)


def resize_mask(mask, width, height):
    return cv2.resize(mask, (width, height), interpolation=cv2.INTER_NEAREST_EXACT)
