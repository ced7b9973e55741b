"""Memoized pixel grids shared by ultrasound rendering and compounding."""

import threading

import numpy as np
from cachetools import LRUCache, cached

PLANE_CACHE_SIZE = 16

_plane_cache: LRUCache = LRUCache(maxsize=PLANE_CACHE_SIZE)
_plane_lock = threading.Lock()


@cached(cache=_plane_cache, lock=_plane_lock)
def image_plane_points(height: int, width: int, spacing_x: float, spacing_y: float) -> np.ndarray:
    """
    Image-plane positions of every pixel, row-major: pixel (u, v) sits at (u * sx, v * sy, 0).

    Every frame of a sweep has the same geometry, so the grid is built once per image
    shape and spacing. The returned array is shared and read-only.

    Args:
        height: Image rows
        width: Image columns
        spacing_x: Column spacing (mm)
        spacing_y: Row spacing (mm)

    Returns:
        (height * width, 3) array in mm
    """
    vv, uu = np.mgrid[0:height, 0:width]
    plane = np.column_stack([uu.ravel() * spacing_x, vv.ravel() * spacing_y, np.zeros(height * width)])
    plane.setflags(write=False)
    return plane


def plane_cache_size() -> int:
    return len(_plane_cache)


def clear_plane_cache() -> None:
    """Drop every memoized grid."""
    with _plane_lock:
        _plane_cache.clear()
