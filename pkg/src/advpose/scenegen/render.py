"""Procedural z-buffered rasteriser for the satellite mock-up."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .. import geometry as geo
from .trajectory import PoseLabel

NEAR_PLANE = 0.05


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    albedo: tuple

    def triangles(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64)
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        v = c + corners * h
        # each face as (normal, four corner indices in cyclic order)
        faces = [
            ((-1, 0, 0), (0, 1, 3, 2)), ((1, 0, 0), (4, 6, 7, 5)),
            ((0, -1, 0), (0, 4, 5, 1)), ((0, 1, 0), (2, 3, 7, 6)),
            ((0, 0, -1), (0, 2, 6, 4)), ((0, 0, 1), (1, 5, 7, 3)),
        ]
        tris, normals = [], []
        for n, (a, b, cc, d) in faces:
            tris += [v[[a, b, cc]], v[[a, cc, d]]]
            normals += [n, n]
        return np.array(tris), np.array(normals, dtype=np.float64)


@dataclass(frozen=True)
class Cylinder:
    center: tuple
    axis: int
    radius: float
    half_length: float
    albedo: tuple
    segments: int = 12

    def triangles(self):
        c = np.asarray(self.center, dtype=np.float64)
        a = self.axis
        u, w = [i for i in range(3) if i != a]
        # half-step offset keeps every side normal off the coordinate planes
        th = (np.arange(self.segments) + 0.5) * 2 * np.pi / self.segments
        ring = np.zeros((self.segments, 3))
        ring[:, u] = self.radius * np.cos(th)
        ring[:, w] = self.radius * np.sin(th)
        top, bot = ring.copy(), ring.copy()
        top[:, a] += self.half_length
        bot[:, a] -= self.half_length
        top += c
        bot += c
        tris, normals = [], []
        axis_vec = np.zeros(3)
        axis_vec[a] = 1.0
        for i in range(self.segments):
            j = (i + 1) % self.segments
            mid = 0.5 * (th[i] + th[i] + 2 * np.pi / self.segments)
            n = np.zeros(3)
            n[u], n[w] = np.cos(mid), np.sin(mid)
            tris += [np.array([bot[i], bot[j], top[j]]), np.array([bot[i], top[j], top[i]])]
            normals += [n, n]
            tris += [np.array([c + axis_vec * self.half_length, top[i], top[j]]),
                     np.array([c - axis_vec * self.half_length, bot[j], bot[i]])]
            normals += [axis_vec, -axis_vec]
        return np.array(tris), np.array(normals)


@dataclass(frozen=True)
class SatelliteModel:
    primitives: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.primitives:
            raise RenderError("satellite model has no primitives")

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(T, 3, 3) body-frame triangles, (T, 3) normals, (T, 3) albedo."""
        tris, normals, albedo = [], [], []
        for p in self.primitives:
            t, n = p.triangles()
            tris.append(t)
            normals.append(n)
            albedo.append(np.tile(np.asarray(p.albedo, dtype=np.float64), (len(t), 1)))
        return np.concatenate(tris), np.concatenate(normals), np.concatenate(albedo)

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.mesh[0].reshape(-1, 3), axis=1).max())


def default_satellite() -> SatelliteModel:
    """Box bus, two unequal solar panels and an off-centre antenna.

    The asymmetry (panel lengths, colours, antenna placement) keeps attitude
    observable from a single view.
    """
    return SatelliteModel(primitives=(
        Box((0.0, 0.0, 0.0), (0.75, 0.6, 1.0), (0.85, 0.65, 0.25)),
        Box((-2.1, 0.0, 0.0), (1.35, 0.55, 0.03), (0.2, 0.3, 0.85)),
        Box((1.85, 0.0, 0.0), (1.1, 0.55, 0.03), (0.35, 0.25, 0.7)),
        Cylinder((0.35, -0.95, -0.3), axis=1, radius=0.18, half_length=0.35, albedo=(0.95, 0.95, 0.95)),
    ))


@dataclass
class Frame:
    image: np.ndarray
    label: PoseLabel
    frame_index: int = 0
    timestamp: Optional[float] = None
    sequence_id: int = 0


def render_frame(model: SatelliteModel, label: PoseLabel, K: geo.CameraIntrinsics,
                 light_dir=(0.0, 0.0, -1.0), size: tuple = (90, 120), ambient: float = 0.1,
                 frame_index: int = 0, timestamp: Optional[float] = None) -> Frame:
    """Rasterise the model at ``label`` with flat Lambertian shading on black.

    ``light_dir`` points from the scene toward the light, in camera axes.
    Pixel values are quantised to multiples of 1/255 so frames survive 8-bit
    lossless storage unchanged.
    """
    h, w = size
    tris_b, normals_b, albedo = model.mesh
    r = geo.quat_to_matrix(label.quaternion)
    tris = tris_b @ r.T + label.position
    normals = normals_b @ r.T
    if np.all(tris[..., 2] <= NEAR_PLANE):
        raise RenderError("target is entirely behind the camera")

    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    centroids = tris.mean(axis=1)
    keep = np.all(tris[..., 2] > NEAR_PLANE, axis=1) & (np.einsum("ij,ij->i", normals, centroids) < 0)
    lambert = np.clip(normals @ light, 0.0, None)
    colours = albedo * (ambient + (1.0 - ambient) * lambert)[:, None]

    img = np.zeros((h, w, 3))
    inv_depth = np.zeros((h, w))
    for tri, col in zip(tris[keep], colours[keep]):
        uv = geo.project(K, tri)
        _raster_triangle(img, inv_depth, uv, 1.0 / tri[:, 2], col)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Frame(img, label, frame_index, timestamp)


def _raster_triangle(img, inv_depth, uv, iz, colour) -> None:
    h, w = inv_depth.shape
    x0 = max(int(np.floor(uv[:, 0].min() - 0.5)), 0)
    x1 = min(int(np.ceil(uv[:, 0].max() - 0.5)), w - 1)
    y0 = max(int(np.floor(uv[:, 1].min() - 0.5)), 0)
    y1 = min(int(np.ceil(uv[:, 1].max() - 0.5)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    (ax, ay), (bx, by), (cx, cy) = uv
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if abs(area) < 1e-12:
        return
    px, py = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
    w0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area
    w1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return
    # 1/z is affine in screen space, so the barycentric blend is exact
    z_inv = w0 * iz[0] + w1 * iz[1] + w2 * iz[2]
    region = inv_depth[y0:y1 + 1, x0:x1 + 1]
    closer = inside & (z_inv > region)
    region[closer] = z_inv[closer]
    img[y0:y1 + 1, x0:x1 + 1][closer] = colour


def render_labels(model: SatelliteModel, labels, K: geo.CameraIntrinsics, size=(90, 120),
                  light_dir=(0.3, -0.4, -1.0), ambient: float = 0.1) -> np.ndarray:
    """Render a batch of labels to a uint8 ``(N, H, W, 3)`` array."""
    out = np.empty((len(labels), size[0], size[1], 3), dtype=np.uint8)
    for i, lab in enumerate(labels):
        out[i] = np.round(render_frame(model, lab, K, light_dir, size, ambient).image * 255.0).astype(np.uint8)
    return out
