"""Implicit surface rendering by ray marching in deformed space.

Each ray is sampled uniformly between its entry and exit of a
conservative bounding cube; samples map to canonical space through the
skinning correspondence, where the clothed occupancy is evaluated. The
surface sits at the first crossing of the occupancy level set, refined
by bisection (occupancy saturates, so secant steps are not trusted).
The soft silhouette of a ray is the maximum occupancy over its samples.

Gradients never flow through hit depths or hit-point positions; the
training stage re-evaluates the fields at these (detached) points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import ImplicitBodyModel, LatentCodes
from .camera import Camera, ray_box_intersection
from .config import MarchConfig
from .skinning import SkinningModel, forward_kinematics

CALL_COUNTS = {"render": 0}


@dataclass
class RayMarchResult:
    """Per-ray march outputs (R rays; canonical coordinates)."""

    hit: np.ndarray         # [R] bool
    t_hit: np.ndarray       # [R]
    xhat: np.ndarray        # [R,3] canonical hit point (zeros where miss)
    mask_soft: np.ndarray   # [R] max occupancy along the ray
    best_xhat: np.ndarray   # [R,3] canonical point attaining the max
    best_ok: np.ndarray     # [R] bool: max-occupancy sample had a root


@dataclass
class RenderResult:
    rgb: np.ndarray         # [H,W,3] in [0,1]
    mask_soft: np.ndarray   # [H,W] in [0,1]
    hit: np.ndarray         # [H,W] bool
    hit_points: np.ndarray  # [H,W,3] canonical
    depth: np.ndarray       # [H,W] ray parameter at the hit
    best_xhat: np.ndarray   # [H,W,3] canonical argmax-occupancy points
    best_ok: np.ndarray     # [H,W] bool


def march_rays(occ_fn, corr_fn, origins: np.ndarray, dirs: np.ndarray,
               march: MarchConfig, tau: float, bounds=None) -> RayMarchResult:
    """March rays against an occupancy field defined in canonical space.

    occ_fn : canonical points [M,3] -> occupancy [M]
    corr_fn: world points [M,3] -> (canonical [M,3], ok [M]); rootless
             samples count as empty space.
    bounds : optional (lo, hi) posed-space AABB; defaults to the cube of
             march.box_half_extent. Rays missing it issue no queries.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    r = dirs.shape[0]
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    n = march.n_steps

    if bounds is None:
        t_near, t_far, boxhit = ray_box_intersection(origins, dirs,
                                                     half_extent=march.box_half_extent)
    else:
        t_near, t_far, boxhit = ray_box_intersection(origins, dirs,
                                                     lo=bounds[0], hi=bounds[1])

    out = RayMarchResult(
        hit=np.zeros(r, dtype=bool), t_hit=np.zeros(r),
        xhat=np.zeros((r, 3)), mask_soft=np.zeros(r),
        best_xhat=np.zeros((r, 3)), best_ok=np.zeros(r, dtype=bool))
    if not boxhit.any():
        return out

    bi = np.nonzero(boxhit)[0]
    near, far = t_near[bi], t_far[bi]
    steps = (np.arange(n) + 0.5) / n
    ts = near[:, None] + steps[None, :] * (far - near)[:, None]           # [B,N]
    pts = origins[bi, None, :] + ts[..., None] * dirs[bi, None, :]        # [B,N,3]

    flat = pts.reshape(-1, 3)
    xhat, ok = corr_fn(flat)
    occ = np.zeros(len(flat))
    if ok.any():
        occ[ok] = occ_fn(xhat[ok])
    occ = occ.reshape(len(bi), n)
    xhat = xhat.reshape(len(bi), n, 3)
    ok = ok.reshape(len(bi), n)

    out.mask_soft[bi] = occ.max(axis=1)
    best = occ.argmax(axis=1)
    rows = np.arange(len(bi))
    out.best_xhat[bi] = xhat[rows, best]
    out.best_ok[bi] = ok[rows, best]

    inside = occ >= tau
    any_inside = inside.any(axis=1)
    first = inside.argmax(axis=1)

    # crossing in the interval before the first inside sample -> bisect
    refine = any_inside & (first > 0)
    if refine.any():
        ri = np.nonzero(refine)[0]
        lo = ts[ri, first[ri] - 1]
        hi = ts[ri, first[ri]]
        hi_xhat = xhat[ri, first[ri]]
        o = origins[bi[ri]]
        d = dirs[bi[ri]]
        for _ in range(march.refine_steps):
            mid = 0.5 * (lo + hi)
            mx, mok = corr_fn(o + mid[:, None] * d)
            mocc = np.zeros(len(mid))
            if mok.any():
                mocc[mok] = occ_fn(mx[mok])
            go_hi = mocc >= tau
            hi = np.where(go_hi, mid, hi)
            hi_xhat = np.where(go_hi[:, None], mx, hi_xhat)
            lo = np.where(go_hi, lo, mid)
        sel = bi[ri]
        out.hit[sel] = True
        out.t_hit[sel] = hi
        out.xhat[sel] = hi_xhat

    # ray already inside at its first sample: hit at entry
    entered = any_inside & (first == 0)
    if entered.any():
        ei = np.nonzero(entered)[0]
        sel = bi[ei]
        out.hit[sel] = True
        out.t_hit[sel] = ts[ei, 0]
        out.xhat[sel] = xhat[ei, 0]
    return out


def trace_pixel(occ_fn, corr_fn, camera: Camera, px: float, py: float,
                march: MarchConfig, tau: float):
    """Single-ray march; returns (xhat, t_hit) or None on a miss."""
    origin, direction = camera.pixel_ray(px, py)
    res = march_rays(occ_fn, corr_fn, origin[None, :], direction[None, :], march, tau)
    if not res.hit[0]:
        return None
    return res.xhat[0], float(res.t_hit[0])


def model_corr_fn(skin: SkinningModel, z_id: np.ndarray, theta: np.ndarray,
                  occupancy_fn=None, tol: float = 1e-5, max_iter: int = 30):
    bones = forward_kinematics(skin.rig, theta)

    def corr(pts):
        from .skinning import canonical_correspondence
        return canonical_correspondence(skin.weight_fn(z_id), bones, pts,
                                        tol=tol, max_iter=max_iter,
                                        occupancy_fn=occupancy_fn)
    return corr


def posed_bounds(rig, theta: np.ndarray, margin: float, clamp: float):
    """AABB of the posed joints, padded by ``margin`` and clamped to the
    conservative cube. The renderer samples rays only inside this box."""
    bones = forward_kinematics(rig, theta)
    posed = np.einsum("kij,kj->ki", bones[:, :3, :3], rig.rest_joints) + bones[:, :3, 3]
    lo = np.maximum(posed.min(axis=0) - margin, -clamp)
    hi = np.minimum(posed.max(axis=0) + margin, clamp)
    return lo, hi


def render_image(model: ImplicitBodyModel, codes: LatentCodes, theta: np.ndarray,
                 camera: Camera, march: MarchConfig, skin: SkinningModel,
                 corr_tol: float = 1e-5, corr_max_iter: int = 30) -> RenderResult:
    """Full-frame render: texture-field shading at clothed-surface hits."""
    CALL_COUNTS["render"] += 1
    volume = model.generate_volume_np(codes.z_id)

    def occ(pts):
        return model.clothed_occupancy_np(codes, pts, volume=volume)

    corr = model_corr_fn(skin, codes.z_id, theta, occupancy_fn=occ,
                         tol=corr_tol, max_iter=corr_max_iter)
    origin, dirs = camera.all_pixel_rays()
    bounds = posed_bounds(skin.rig, theta, margin=march.bound_margin,
                          clamp=march.box_half_extent)
    res = march_rays(occ, corr, origin[None, :], dirs, march, model.cfg.tau,
                     bounds=bounds)

    h, w = camera.height, camera.width
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    rgb[:] = np.asarray(march.background)
    hitmap = res.hit.reshape(h, w)
    if res.hit.any():
        colors = model.query_texture_np(codes.z_tex, codes.z_cloth, res.xhat[res.hit])
        rgb.reshape(-1, 3)[res.hit] = colors
    return RenderResult(
        rgb=rgb,
        mask_soft=res.mask_soft.reshape(h, w),
        hit=hitmap,
        hit_points=res.xhat.reshape(h, w, 3),
        depth=res.t_hit.reshape(h, w),
        best_xhat=res.best_xhat.reshape(h, w, 3),
        best_ok=res.best_ok.reshape(h, w),
    )
