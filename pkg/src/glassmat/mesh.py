"""Triangle meshes extracted from SDF fields."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates
from skimage.measure import marching_cubes

MIN_RESOLUTION = 16
MAX_RESOLUTION = 512


class EmptyLevelSet(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def face_normals(self, unit=True):
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if unit:
            n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)
        return n

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=-1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def centroids(self):
        return self.vertices[self.faces].mean(axis=1)

    def sample_points(self, n: int, rng):
        """Area-weighted uniform samples on the surface."""
        areas = self.face_areas()
        face = rng.choice(len(self.faces), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        v = self.vertices[self.faces[face]]
        return (
            (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
        )

    def save_obj(self, path):
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_obj(cls, path) -> TriangleMesh:
        verts, faces = [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        return cls(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _grid_axes(box, resolution):
    return [np.linspace(box.lo[k], box.hi[k], resolution) for k in range(3)]


def _evaluate(field, pts, chunk=1 << 16):
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s : s + chunk] = field.query(pts[s : s + chunk])
    return out


def sample_grid(field, resolution: int, narrow_band: bool | None = None):
    """SDF values on a ``resolution**3`` grid spanning the bounding box.

    Expensive (learned) fields are evaluated coarse-to-fine: only fine points
    whose coarse interpolated distance is within a few coarse cells of the
    surface are queried exactly, the rest keep the interpolated value.
    """
    box = field.bounding_box
    axes = _grid_axes(box, resolution)
    if narrow_band is None:
        narrow_band = getattr(field, "expensive", False)
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    if not narrow_band or resolution < 64:
        return _evaluate(field, grid).reshape((resolution,) * 3), axes
    coarse_res = resolution // 4 + 1
    coarse_vals, _ = sample_grid(field, coarse_res, narrow_band=False)
    scale = (coarse_res - 1) / (resolution - 1)
    idx = np.stack(np.meshgrid(*[np.arange(resolution)] * 3, indexing="ij"), 0).reshape(3, -1)
    approx = map_coordinates(coarse_vals, idx * scale, order=1, mode="nearest")
    cell = np.linalg.norm(box.hi - box.lo) / (coarse_res - 1)
    near = np.abs(approx) < 2.0 * cell
    vals = approx
    vals[near] = _evaluate(field, grid[near])
    return vals.reshape((resolution,) * 3), axes


def extract_mesh(field, resolution: int = 128) -> TriangleMesh:
    """Marching cubes on the zero level set; faces oriented outward."""
    if not MIN_RESOLUTION <= resolution <= MAX_RESOLUTION:
        raise ValueError(f"resolution must be in [{MIN_RESOLUTION}, {MAX_RESOLUTION}]")
    vals, axes = sample_grid(field, resolution)
    if vals.min() > 0 or vals.max() < 0:
        raise EmptyLevelSet("field has no sign change inside its bounding box")
    spacing = tuple(float(a[1] - a[0]) for a in axes)
    verts, faces, _, _ = marching_cubes(vals, level=0.0, spacing=spacing)
    verts = verts + field.bounding_box.lo
    mesh = TriangleMesh(verts, faces.astype(np.int64))
    # orient so that face normals follow the SDF gradient (outward)
    probe = mesh.centroids()
    g = field.gradient(probe)
    if np.sum(np.sum(g * mesh.face_normals(), axis=-1) < 0) > len(faces) / 2:
        mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


def sample_sphere(n: int, rng, center=(0.0, 0.0, 0.0), radius=1.0):
    p = rng.normal(size=(n, 3))
    return np.asarray(center) + radius * p / np.linalg.norm(p, axis=-1, keepdims=True)
