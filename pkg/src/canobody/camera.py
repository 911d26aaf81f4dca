"""Pinhole camera and ray construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rot: np.ndarray      # [3,3] world-to-camera rotation
    trans: np.ndarray    # [3] world-to-camera translation
    width: int
    height: int

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(3, 3)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(self.rot @ self.rot.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rot.T @ self.trans

    def pixel_ray(self, px: float, py: float):
        """World-space (origin, unit direction) through image point (px, py)."""
        if not (0 <= px < self.width and 0 <= py < self.height):
            raise ValueError(f"pixel ({px},{py}) outside {self.width}x{self.height} image")
        d_cam = np.array([(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0])
        d_world = self.rot.T @ d_cam
        return self.center, d_world / np.linalg.norm(d_world)

    def pixel_rays(self, px: np.ndarray, py: np.ndarray):
        """Vectorized pixel_ray for arrays of image coordinates."""
        d_cam = np.stack([(px - self.cx) / self.fx, (py - self.cy) / self.fy,
                          np.ones_like(px)], axis=-1)
        d_world = d_cam @ self.rot
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        return self.center, d_world

    def all_pixel_rays(self):
        """Rays through every pixel center (+0.5 convention), row-major."""
        ys, xs = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5,
                             indexing="ij")
        return self.pixel_rays(xs.ravel(), ys.ravel())

    def to_json_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.rot.reshape(-1).tolist(), "t": self.trans.tolist(),
                "W": self.width, "H": self.height}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Camera":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   rot=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                   trans=np.asarray(d["t"], dtype=np.float64),
                   width=int(d["W"]), height=int(d["H"]))


def look_at(eye, target, up, fx: float, fy: float, width: int, height: int) -> Camera:
    """Camera at ``eye`` looking toward ``target``; image y runs downward."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    return Camera(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                  rot=rot, trans=-rot @ eye, width=width, height=height)


def ray_box_intersection(origin: np.ndarray, dirs: np.ndarray, half_extent: float = None,
                         lo: np.ndarray = None, hi: np.ndarray = None):
    """Slab test against an axis-aligned box.

    Pass either ``half_extent`` (cube [-h,h]^3) or explicit ``lo``/``hi``
    corners. Returns (t_near, t_far, hit) with t_near clamped to 0 (rays
    start at their origin).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    origin = np.broadcast_to(np.asarray(origin, dtype=np.float64), dirs.shape)
    if half_extent is not None:
        lo = np.full(3, -half_extent)
        hi = np.full(3, half_extent)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    t_lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    t_hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # parallel rays: inside the slab -> infinite interval, outside -> miss
    par = np.abs(dirs) < 1e-15
    inside = (origin >= lo) & (origin <= hi)
    t_lo = np.where(par, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(par, np.where(inside, np.inf, -np.inf), t_hi)
    t_near = t_lo.max(axis=-1)
    t_far = t_hi.min(axis=-1)
    hit = (t_far >= np.maximum(t_near, 0.0)) & np.isfinite(t_far)
    return np.maximum(t_near, 0.0), t_far, hit
