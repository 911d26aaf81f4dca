"""Procedural capsule-body world with exact labels.

Subjects are capsule chains: identity is carried by bone lengths and
body radii only; an outfit adds a clothing layer (radius offsets over an
axial span of each bone) and a palette drawn from a shared pool, so the
same garment look recurs across subjects. The two occupancy layers, the
point colors, the projected silhouettes and the skinning weights all
have closed forms, which makes every trained quantity checkable.

Deformed-space labels come from rigidly posing each capsule with its
bone transform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ppm, rng
from .camera import Camera, look_at
from .skinning import (SkeletonRig, forward_kinematics, point_segment_distance,
                       point_segment_sqdist)

SKIN_COLOR = np.array([0.80, 0.65, 0.55])

# shared garment palette pool (pairs of garment tones); outfits reuse these
PALETTE_POOL = np.array([
    [[0.85, 0.10, 0.10], [0.95, 0.90, 0.85]],
    [[0.10, 0.25, 0.80], [0.85, 0.85, 0.20]],
    [[0.10, 0.60, 0.20], [0.30, 0.30, 0.30]],
    [[0.95, 0.55, 0.05], [0.10, 0.10, 0.35]],
    [[0.55, 0.10, 0.55], [0.75, 0.75, 0.75]],
    [[0.05, 0.05, 0.05], [0.90, 0.30, 0.50]],
])

NORMAL_POSE_CAP = 0.25       # per-joint axis-angle magnitude, 'normal' tag
CHALLENGING_POSE_CAP = 0.55  # 'challenging' tag


@dataclass
class Outfit:
    offsets: np.ndarray    # [K] added radius where the garment covers
    cover: np.ndarray      # [K,2] axial span (fractions of the bone segment)
    covered: np.ndarray    # [K] bool
    palette: np.ndarray    # [P,3] garment colors, bone k wears palette[k % P]


@dataclass
class SyntheticSubject:
    index: int
    rig: SkeletonRig
    outfits: list[Outfit] = field(default_factory=list)

    def garment_segments(self, outfit_idx: int):
        """Clothed-layer capsules: (segments [K,2,3], radii [K], active [K])."""
        out = self.outfits[outfit_idx]
        segs = self.rig.bone_segments().copy()
        a, b = segs[:, 0].copy(), segs[:, 1].copy()
        lo = out.cover[:, 0:1]
        hi = out.cover[:, 1:2]
        ga = a + lo * (b - a)
        gb = a + hi * (b - a)
        gsegs = np.stack([ga, gb], axis=1)
        return gsegs, self.rig.radii + out.offsets, out.covered


def make_subject(seed: int, index: int, n_bones: int = 3, n_outfits: int = 2) -> SyntheticSubject:
    """Deterministic subject: a vertical capsule chain with random
    proportions, plus ``n_outfits`` clothing layers."""
    g = rng.stream(seed, "subject", index)
    base_y = np.linspace(-0.52, 0.42, n_bones)
    ys = base_y + g.uniform(-0.06, 0.06, size=n_bones)
    joints = np.stack([np.zeros(n_bones), np.sort(ys), np.zeros(n_bones)], axis=1)
    base_r = np.linspace(0.17, 0.11, n_bones)
    radii = base_r * g.uniform(0.75, 1.30, size=n_bones)
    parents = np.arange(n_bones) - 1
    subject = SyntheticSubject(index=index,
                               rig=SkeletonRig(parents=parents, rest_joints=joints,
                                               radii=radii))
    for o in range(n_outfits):
        subject.outfits.append(make_outfit(seed, index, o, n_bones))
    return subject


def make_outfit(seed: int, subject_index: int, outfit_index: int, n_bones: int) -> Outfit:
    g = rng.stream(seed, "outfit", subject_index, outfit_index)
    offsets = g.uniform(0.05, 0.10, size=n_bones)
    lo = g.uniform(0.0, 0.15, size=n_bones)
    hi = g.uniform(0.80, 1.0, size=n_bones)
    covered = np.ones(n_bones, dtype=bool)
    covered[-1] = False  # the last bone (head sphere) stays bare
    palette = PALETTE_POOL[int(g.integers(len(PALETTE_POOL)))]
    return Outfit(offsets=offsets, cover=np.stack([lo, hi], axis=1),
                  covered=covered, palette=np.asarray(palette, dtype=np.float64))


def sample_pose(g: np.random.Generator, rig: SkeletonRig, tag: str) -> np.ndarray:
    cap = NORMAL_POSE_CAP if tag == "normal" else CHALLENGING_POSE_CAP
    k = rig.n_bones
    axes = g.normal(size=(k, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    mags = g.uniform(0.0, cap, size=(k, 1))
    theta = axes * mags
    theta[0] *= 0.4  # keep the root near upright
    return theta


# ---------------------------------------------------------------------------
# analytic fields

def _posed_segments(segs: np.ndarray, bones: np.ndarray) -> np.ndarray:
    """Rigidly pose rest segments [K,2,3] with bone transforms [K,4,4]."""
    rot = bones[:, :3, :3]
    t = bones[:, :3, 3]
    return np.einsum("kij,ksj->ksi", rot, segs) + t[:, None, :]


def oracle_occupancy(subject: SyntheticSubject, outfit_idx: int, theta: np.ndarray,
                     x: np.ndarray):
    """Binary (o1, o2) labels at deformed-space points [N,3]."""
    bones = forward_kinematics(subject.rig, theta)
    body_segs = _posed_segments(subject.rig.bone_segments(), bones)
    d2_body, _ = point_segment_sqdist(np.asarray(x, dtype=np.float64), body_segs)
    o1 = (d2_body <= subject.rig.radii[None, :] ** 2).any(axis=1)

    gsegs, gradii, active = subject.garment_segments(outfit_idx)
    gsegs = _posed_segments(gsegs, bones)
    d2_gar, _ = point_segment_sqdist(np.asarray(x, dtype=np.float64), gsegs)
    in_gar = (d2_gar <= gradii[None, :] ** 2) & active[None, :]
    o2 = o1 | in_gar.any(axis=1)
    return o1.astype(np.float64), o2.astype(np.float64)


def oracle_color(subject: SyntheticSubject, outfit_idx: int, theta: np.ndarray,
                 x: np.ndarray) -> np.ndarray:
    """Color at deformed points: nearest covering garment tone, else skin."""
    out = subject.outfits[outfit_idx]
    bones = forward_kinematics(subject.rig, theta)
    gsegs, gradii, active = subject.garment_segments(outfit_idx)
    gsegs = _posed_segments(gsegs, bones)
    d_gar, _ = point_segment_distance(np.asarray(x, dtype=np.float64), gsegs)
    signed = d_gar - gradii[None, :]
    signed[:, ~active] = np.inf
    nearest = signed.argmin(axis=1)
    # small slack so exact surface hits from the analytic projector stay
    # on the garment side of the boundary
    inside_any = (signed <= 1e-9).any(axis=1)
    colors = np.repeat(SKIN_COLOR[None, :], len(x), axis=0)
    pal = out.palette[nearest % len(out.palette)]
    colors[inside_any] = pal[inside_any]
    return colors


def canonical_occupancy_fns(subject: SyntheticSubject, outfit_idx: int):
    """Rest-pose (o1, o2, color) field callables on canonical points."""
    zero = np.zeros((subject.rig.n_bones, 3))

    def o1_fn(pts):
        return oracle_occupancy(subject, outfit_idx, zero, pts)[0]

    def o2_fn(pts):
        return oracle_occupancy(subject, outfit_idx, zero, pts)[1]

    def color_fn(pts):
        return oracle_color(subject, outfit_idx, zero, pts)

    return o1_fn, o2_fn, color_fn


# ---------------------------------------------------------------------------
# analytic projection (exact ray-capsule intersection)

def ray_capsule_t(origins: np.ndarray, dirs: np.ndarray, seg_a: np.ndarray,
                  seg_b: np.ndarray, radius: float) -> np.ndarray:
    """First intersection parameter of rays with one capsule (inf = miss)."""
    o = origins - seg_a
    ab = seg_b - seg_a
    ab2 = float(ab @ ab)
    t_best = np.full(len(dirs), np.inf)

    if ab2 < 1e-18:
        # sphere
        b = 2.0 * (dirs * o).sum(axis=1)
        c = (o * o).sum(axis=1) - radius * radius
        disc = b * b - 4.0 * c
        okd = disc >= 0
        root = (-b - np.sqrt(np.where(okd, disc, 0.0))) / 2.0
        valid = okd & (root >= 0)
        t_best[valid] = root[valid]
        return t_best

    n = ab / np.sqrt(ab2)
    d_par = (dirs @ n)[:, None] * n[None, :]
    d_perp = dirs - d_par
    o_par = (o @ n)[:, None] * n[None, :]
    o_perp = o - o_par

    a_q = (d_perp * d_perp).sum(axis=1)
    b_q = 2.0 * (d_perp * o_perp).sum(axis=1)
    c_q = (o_perp * o_perp).sum(axis=1) - radius * radius
    disc = b_q * b_q - 4.0 * a_q * c_q
    okd = (disc >= 0) & (a_q > 1e-18)
    sq = np.sqrt(np.where(okd, disc, 0.0))
    for sign in (-1.0, 1.0):
        t = (-b_q + sign * sq) / (2.0 * np.where(okd, a_q, 1.0))
        s = (o + t[:, None] * dirs) @ n
        valid = okd & (t >= 0) & (s >= 0) & (s <= np.sqrt(ab2))
        t_best = np.where(valid & (t < t_best), t, t_best)

    for cap in (np.zeros(3), ab):
        oc = o - cap
        b_s = 2.0 * (dirs * oc).sum(axis=1)
        c_s = (oc * oc).sum(axis=1) - radius * radius
        disc_s = b_s * b_s - 4.0 * c_s
        oks = disc_s >= 0
        root = (-b_s - np.sqrt(np.where(oks, disc_s, 0.0))) / 2.0
        valid = oks & (root >= 0)
        t_best = np.where(valid & (root < t_best), root, t_best)
    return t_best


def analytic_render(subject: SyntheticSubject, outfit_idx: int, theta: np.ndarray,
                    camera: Camera):
    """Exact image and silhouette of the posed clothed subject."""
    bones = forward_kinematics(subject.rig, theta)
    body_segs = _posed_segments(subject.rig.bone_segments(), bones)
    gsegs, gradii, active = subject.garment_segments(outfit_idx)
    gsegs = _posed_segments(gsegs, bones)

    origin, dirs = camera.all_pixel_rays()
    origins = np.broadcast_to(origin, dirs.shape)

    t_best = np.full(len(dirs), np.inf)
    for k in range(subject.rig.n_bones):
        t_best = np.minimum(t_best, ray_capsule_t(origins, dirs, body_segs[k, 0],
                                                  body_segs[k, 1], subject.rig.radii[k]))
        if active[k]:
            t_best = np.minimum(t_best, ray_capsule_t(origins, dirs, gsegs[k, 0],
                                                      gsegs[k, 1], gradii[k]))
    hit = np.isfinite(t_best)
    h, w = camera.height, camera.width
    img = np.zeros((h, w, 3))
    if hit.any():
        pts = origins[hit] + t_best[hit, None] * dirs[hit]
        img.reshape(-1, 3)[hit] = oracle_color(subject, outfit_idx, theta, pts)
    mask = hit.reshape(h, w).astype(np.float64)
    return img, mask, t_best.reshape(h, w)


# ---------------------------------------------------------------------------
# scan samples

@dataclass
class ScanSample:
    theta: np.ndarray     # [K,3]
    label: int            # subject identity
    points: np.ndarray    # [n,3] deformed-space samples
    o1: np.ndarray        # [n]
    o2: np.ndarray        # [n]
    color: np.ndarray     # [n,3]


def generate_scan(subject: SyntheticSubject, outfit_idx: int, theta: np.ndarray,
                  n: int, seed: int, stream_tag: object = "scan") -> ScanSample:
    """Labeled point sample: half near the clothed surface, half uniform."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = rng.stream(seed, stream_tag, subject.index, outfit_idx)
    n_near = n // 2
    n_uni = n - n_near

    bones = forward_kinematics(subject.rig, theta)
    gsegs, gradii, active = subject.garment_segments(outfit_idx)
    band = np.where(active, gradii, subject.rig.radii)
    segs = np.where(active[:, None, None], gsegs, subject.rig.bone_segments())
    segs = _posed_segments(segs, bones)

    k = subject.rig.n_bones
    pick = g.integers(0, k, size=n_near)
    s = g.uniform(0.0, 1.0, size=(n_near, 1))
    axis_pts = segs[pick, 0] + s * (segs[pick, 1] - segs[pick, 0])
    dir_vec = g.normal(size=(n_near, 3))
    dir_vec /= np.linalg.norm(dir_vec, axis=1, keepdims=True)
    radial = g.uniform(0.0, 1.5, size=(n_near, 1)) * band[pick][:, None]
    near_pts = axis_pts + dir_vec * radial

    uni_pts = g.uniform(-1.0, 1.0, size=(n_uni, 3))
    pts = np.concatenate([near_pts, uni_pts], axis=0)

    o1, o2 = oracle_occupancy(subject, outfit_idx, theta, pts)
    color = oracle_color(subject, outfit_idx, theta, pts)
    return ScanSample(theta=np.asarray(theta, dtype=np.float64), label=subject.index,
                      points=pts, o1=o1, o2=o2, color=color)


SCAN_MAGIC = b"IAKSCAN1"


def save_scan(path, scan: ScanSample):
    n = len(scan.points)
    k = scan.theta.shape[0]
    rows = np.concatenate([scan.points, scan.o1[:, None], scan.o2[:, None], scan.color],
                          axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(SCAN_MAGIC)
        fh.write(struct.pack("<II", n, k))
        fh.write(scan.theta.astype("<f4").tobytes())
        fh.write(rows.tobytes())


def load_scan(path, label: int = -1) -> ScanSample:
    raw = Path(path).read_bytes()
    if raw[:8] != SCAN_MAGIC:
        raise ValueError(f"{path}: not a scan file")
    n, k = struct.unpack_from("<II", raw, 8)
    off = 16
    theta = np.frombuffer(raw, dtype="<f4", count=k * 3, offset=off).reshape(k, 3)
    off += k * 3 * 4
    rows = np.frombuffer(raw, dtype="<f4", count=n * 8, offset=off).reshape(n, 8)
    return ScanSample(theta=theta.astype(np.float64), label=label,
                      points=rows[:, :3].astype(np.float64),
                      o1=rows[:, 3].astype(np.float64), o2=rows[:, 4].astype(np.float64),
                      color=rows[:, 5:8].astype(np.float64))


# ---------------------------------------------------------------------------
# dataset synthesis

CAMERA_DISTANCE = 2.8
CAMERA_FOCAL = 180.0
IMAGE_HEIGHT = 128
IMAGE_WIDTH = 64


def ring_camera(angle: float, height: int = IMAGE_HEIGHT, width: int = IMAGE_WIDTH,
                distance: float = CAMERA_DISTANCE, focal: float = CAMERA_FOCAL) -> Camera:
    eye = np.array([distance * np.sin(angle), 0.0, -distance * np.cos(angle)])
    return look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]),
                   fx=focal, fy=focal, width=width, height=height)


def generate_image_set(out_dir, n_subjects: int, n_outfits: int, n_poses: int,
                       seed: int, scan_points: int = 20000, n_bones: int = 3) -> dict:
    """Write the full synthetic dataset and return its manifest.

    Per (subject, outfit, pose): one PPM image, one PGM mask and one JSON
    sidecar. Per (subject, outfit): one labeled point scan. Exactly one
    'normal'-pose record per subject is flagged as the gallery.
    """
    if n_outfits < 2:
        raise ValueError("need at least two outfits per subject for cloth-change splits")
    out_dir = Path(out_dir)
    for sub in ("images", "scans", "rigs"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    subjects = [make_subject(seed, i, n_bones=n_bones, n_outfits=n_outfits)
                for i in range(n_subjects)]
    records = []
    scan_records = []
    rec_id = 0
    for subj in subjects:
        rig_path = f"rigs/subject_{subj.index:03d}.json"
        subj.rig.save(out_dir / rig_path)
        for o in range(n_outfits):
            if scan_points > 0:
                g = rng.stream(seed, "scanpose", subj.index, o)
                scan_theta = sample_pose(g, subj.rig, "normal")
                scan = generate_scan(subj, o, scan_theta, scan_points, seed)
                scan_path = f"scans/scan_s{subj.index:03d}_o{o}.bin"
                save_scan(out_dir / scan_path, scan)
                scan_records.append({"path": scan_path, "subject": subj.index,
                                     "outfit": o, "pose_tag": "normal"})
            for p in range(n_poses):
                tag = "normal" if p < (n_poses + 1) // 2 else "challenging"
                g = rng.stream(seed, "imgpose", subj.index, o, p)
                theta = sample_pose(g, subj.rig, tag)
                angle = 2.0 * np.pi * ((subj.index + o * 3 + p * 5) % 8) / 8.0
                cam = ring_camera(angle)
                img, mask, _ = analytic_render(subj, o, theta, cam)
                stem = f"img_s{subj.index:03d}_o{o}_p{p}"
                img_path = f"images/{stem}.ppm"
                mask_path = f"images/{stem}.pgm"
                meta_path = f"images/{stem}.json"
                ppm.write_ppm(out_dir / img_path, img)
                ppm.write_pgm(out_dir / mask_path, mask)
                sidecar = {"subject": subj.index, "outfit": o, "pose_tag": tag,
                           "theta": theta.tolist(), "camera": cam.to_json_dict(),
                           "image_path": img_path, "mask_path": mask_path}
                (out_dir / meta_path).write_text(json.dumps(sidecar, sort_keys=True))
                records.append({"id": rec_id, "subject": subj.index, "outfit": o,
                                "pose_tag": tag, "image": img_path, "mask": mask_path,
                                "meta": meta_path, "gallery": False})
                rec_id += 1

    # one gallery record per subject from the normal-pose set
    gal = rng.stream(seed, "gallery")
    for subj_idx in range(n_subjects):
        normals = [r for r in records if r["subject"] == subj_idx and r["pose_tag"] == "normal"]
        choice = normals[int(gal.integers(len(normals)))]
        choice["gallery"] = True

    manifest = {"split": "synthetic", "seed": seed, "n_subjects": n_subjects,
                "n_outfits": n_outfits, "n_poses": n_poses, "n_bones": n_bones,
                "rigs": {str(s.index): f"rigs/subject_{s.index:03d}.json" for s in subjects},
                "records": records, "scans": scan_records}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def load_rigs(data_dir, manifest: dict) -> dict[int, SkeletonRig]:
    base = Path(data_dir)
    return {int(k): SkeletonRig.load(base / p) for k, p in manifest["rigs"].items()}


def rebuild_subjects(manifest: dict) -> list[SyntheticSubject]:
    """Re-derive the subjects of a dataset from its seed (oracle access)."""
    return [make_subject(manifest["seed"], i, n_bones=manifest["n_bones"],
                         n_outfits=manifest["n_outfits"])
            for i in range(manifest["n_subjects"])]
