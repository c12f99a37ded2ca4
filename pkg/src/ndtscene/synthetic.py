"""Seeded synthetic rooms: a floor, three walls and a few boxes with noise."""
from __future__ import annotations

import numpy as np

from .io import CameraView, PointCloud


def _sample_rect(rng, n, origin, u, v):
    s = rng.random((n, 2))
    return origin + s[:, :1] * u + s[:, 1:] * v


def synthetic_room(n_points: int, seed: int = 0, size=(6.0, 5.0, 3.0), n_boxes: int = 4,
                   noise: float = 0.005) -> PointCloud:
    """Sample ``n_points`` from room surfaces with per-surface colors.

    Points are split across surfaces in proportion to their area.
    """
    if n_points < 1:
        raise ValueError("n_points must be positive")
    rng = np.random.default_rng(seed)
    sx, sy, sz = size
    o = np.zeros(3)
    ex, ey, ez = np.array([sx, 0, 0]), np.array([0, sy, 0]), np.array([0, 0, sz])
    rects = [(o, ex, ey), (o, ex, ez), (o, ey, ez), (o + ey, ex, ez)]
    for _ in range(n_boxes):
        w, d, h = rng.uniform(0.4, 1.2, 3)
        base = np.array([rng.uniform(0.3, sx - w - 0.3), rng.uniform(0.3, sy - d - 0.3), 0.0])
        bx, by, bz = np.array([w, 0, 0]), np.array([0, d, 0]), np.array([0, 0, h])
        rects += [(base + bz, bx, by), (base, bx, bz), (base + by, bx, bz),
                  (base, by, bz), (base + bx, by, bz)]
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in rects])
    counts = np.floor(areas / areas.sum() * n_points).astype(np.int64)
    counts[: n_points - counts.sum()] += 1
    palette = rng.uniform(0.1, 0.9, (len(rects), 3))
    pts, cols = [], []
    for (origin, u, v), k, color in zip(rects, counts, palette):
        if k == 0:
            continue
        pts.append(_sample_rect(rng, k, origin, u, v))
        cols.append(np.repeat(color[None, :], k, axis=0))
    positions = np.concatenate(pts) + rng.normal(0.0, noise, (n_points, 3))
    colors = np.clip(np.concatenate(cols) + rng.normal(0.0, 0.02, (n_points, 3)), 0.0, 1.0)
    return PointCloud(positions, colors)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``
    (x right, y down, z forward)."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    return ext


def render_views(cloud: PointCloud, eyes, target, width: int = 64, height: int = 48,
                 focal: float = 40.0) -> list[CameraView]:
    """Splat colored points into small RGB images with a z-buffer."""
    if cloud.colors is None:
        raise ValueError("rendering needs a colored cloud")
    views = []
    for eye in eyes:
        ext = look_at(eye, target)
        cam = cloud.positions @ ext[:3, :3].T + ext[:3, 3]
        z = cam[:, 2]
        front = z > 1e-6
        u = np.floor(focal * cam[front, 0] / z[front] + width / 2 + 0.5).astype(np.int64)
        v = np.floor(focal * cam[front, 1] / z[front] + height / 2 + 0.5).astype(np.int64)
        ok = (u >= 0) & (u < width) & (v >= 0) & (v < height)
        zf, cf = z[front][ok], cloud.colors[front][ok]
        u, v = u[ok], v[ok]
        image = np.zeros((height, width, 3))
        depth = np.full((height, width), np.inf)
        pix = v * width + u
        order = np.lexsort((zf, pix))  # nearest point first within each pixel
        first = order[np.unique(pix[order], return_index=True)[1]]
        depth[v[first], u[first]] = zf[first]
        image[v[first], u[first]] = cf[first]
        depth[np.isinf(depth)] = 1e6
        views.append(CameraView(focal, focal, width / 2, height / 2, ext, width, height,
                                image, depth))
    return views
