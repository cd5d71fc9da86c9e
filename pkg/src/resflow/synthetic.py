"""Synthetic shape pairs with known ground-truth correspondence."""

import numpy as np

from .geometry import PointCloud


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """n nearly uniform, pairwise distinct points on a sphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return radius * np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def sphere_to_ellipsoid(n: int = 500, axes=(1.0, 0.7, 1.3)):
    """Sphere source and the same points scaled per axis; label i matches i."""
    src = fibonacci_sphere(n)
    labels = np.arange(n)
    return PointCloud(src, labels=labels), PointCloud(src * np.asarray(axes), labels=labels)


def sphere_translation(n: int = 200, offset=(0.3, 0.0, 0.0)):
    """Sphere and its translate, offset given in units of the sphere's bbox diagonal."""
    src = fibonacci_sphere(n)
    diag = np.linalg.norm(src.max(axis=0) - src.min(axis=0))
    labels = np.arange(n)
    return (PointCloud(src, labels=labels),
            PointCloud(src + diag * np.asarray(offset, dtype=np.float64), labels=labels))
