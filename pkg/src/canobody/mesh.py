"""Level-set mesh extraction and OBJ export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from skimage import measure


@dataclass
class TriMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.float64))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def validate(self):
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.triangles) and self.triangles.min() < 0:
            raise ValueError("negative triangle index")
        if len(self.triangles):
            a = self.vertices[self.triangles[:, 0]]
            b = self.vertices[self.triangles[:, 1]]
            c = self.vertices[self.triangles[:, 2]]
            areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            if areas.min() <= 1e-12:
                raise ValueError("degenerate (zero-area) triangle")


def extract_mesh(occupancy_fn, tau: float, grid_res: int) -> TriMesh:
    """Triangulate the ``occ = tau`` level set over [-1,1]^3.

    occupancy_fn maps an [N,3] point array to [N] occupancy values.
    Classic marching cubes (256-case table, linear edge interpolation on
    ``occ - tau``). A sign-definite field yields an empty mesh.
    """
    if grid_res < 8:
        raise ValueError("grid_res must be >= 8")
    axis = np.linspace(-1.0, 1.0, grid_res)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    occ = np.asarray(occupancy_fn(pts), dtype=np.float64).reshape(grid_res, grid_res, grid_res)
    if occ.min() >= tau or occ.max() <= tau:
        return TriMesh()
    verts, faces, _, _ = measure.marching_cubes(occ, level=tau, method="lorensen",
                                                allow_degenerate=False)
    spacing = 2.0 / (grid_res - 1)
    verts = verts * spacing - 1.0
    return TriMesh(vertices=verts.astype(np.float64), triangles=faces.astype(np.int64))


def edge_use_counts(mesh: TriMesh) -> np.ndarray:
    """How many triangles use each undirected edge (2 everywhere = watertight)."""
    tri = mesh.triangles
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


def is_watertight(mesh: TriMesh) -> bool:
    if mesh.is_empty():
        return False
    counts = edge_use_counts(mesh)
    return bool(np.all(counts == 2))


def write_obj(path, mesh: TriMesh):
    """ASCII OBJ with v/f records only; vertices at 6 decimal places."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriMesh(vertices=np.asarray(verts, dtype=np.float64),
                   triangles=np.asarray(faces, dtype=np.int64))
