"""Depth-buffered orthographic renderer for a flat-colored cuboid.

The camera looks down the -z axis from +z; image rows run top to bottom
(+y up in the scene) and columns left to right (+x right). Pixel centers are
placed symmetrically about the image center, so negating x and y of the scene
maps pixel ``(r, c)`` to ``(H-1-r, W-1-c)`` exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rotgeo import UnitQuaternion, quat_to_matrix

# +x, -x, +y, -y, +z, -z
FACE_COLORS = (
    (220, 40, 40),
    (40, 200, 200),
    (40, 200, 60),
    (200, 50, 200),
    (50, 80, 230),
    (230, 210, 40),
)


@dataclass(frozen=True)
class RenderConfig:
    dims: tuple[float, float, float] = (1.0, 0.7, 0.4)
    # scene units covered by the full image width
    view_extent: float = 1.4
    background: tuple[int, int, int] = (51, 51, 51)
    colors: tuple[tuple[int, int, int], ...] = FACE_COLORS


def _faces(dims):
    hx, hy, hz = (0.5 * d for d in dims)
    half = np.array([hx, hy, hz])
    eye = np.eye(3)
    faces = []
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for sign in (1.0, -1.0):
            faces.append((sign * half[axis] * eye[axis], sign * eye[axis],
                          eye[u_ax], half[u_ax], eye[v_ax], half[v_ax]))
    return faces


def render_cuboid(q: UnitQuaternion, size: int, params: RenderConfig | None = None) -> np.ndarray:
    """Render the cuboid at orientation ``q``; returns a ``(size, size, 3)`` uint8 image."""
    params = params or RenderConfig()
    rot = quat_to_matrix(q)
    scale = params.view_extent / size
    coords = (np.arange(size, dtype=np.float64) + 0.5 - 0.5 * size) * scale
    px = coords[None, :]
    py = -coords[:, None]
    depth = np.full((size, size), -np.inf)
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = params.background
    for idx, (center, normal, u_dir, u_half, v_dir, v_half) in enumerate(_faces(params.dims)):
        n = rot @ normal
        if n[2] <= 1e-12:
            continue
        c = rot @ center
        u = rot @ u_dir
        v = rot @ v_dir
        dx = px - c[0]
        dy = py - c[1]
        dz = -(n[0] * dx + n[1] * dy) / n[2]
        z = c[2] + dz
        lu = u[0] * dx + u[1] * dy + u[2] * dz
        lv = v[0] * dx + v[1] * dy + v[2] * dz
        inside = (np.abs(lu) <= u_half) & (np.abs(lv) <= v_half) & (z > depth)
        depth[inside] = z[inside]
        image[inside] = params.colors[idx]
    return image


def to_float(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / np.float32(255.0)
