"""Blend skinning: forward kinematics, weight fields, and the inverse map.

Deformation follows x' = sum_k w_k(x) B_k x with homogeneous points.
The inverse (canonical correspondence of an observed deformed point) has
no closed form; it is recovered by root finding on d(x) - x' = 0 with a
rank-1 quasi-Newton update, one candidate start per bone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tape
from .nn import Mlp
from .tape import Tensor

# instrumentation: inference-cost contracts assert these stay untouched
CALL_COUNTS = {"canonical_correspondence": 0}

JOINT_LIMIT = 2.0  # rad, correspondence guard
WEIGHT_TEMPERATURE = 0.05  # squared-distance softmax temperature for rig weights


@dataclass
class SkeletonRig:
    """Bone tree with rest joints and (for synthetic rigs) capsule radii."""

    parents: np.ndarray       # [K] int, -1 at the root
    rest_joints: np.ndarray   # [K,3]
    radii: np.ndarray         # [K]

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        k = len(self.parents)
        if k < 1 or self.rest_joints.shape != (k, 3) or self.radii.shape != (k,):
            raise ValueError("inconsistent rig arrays")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        if np.any(self.parents[1:] < 0):
            raise ValueError("only joint 0 may be parentless")
        # reject cycles / forests: every joint must reach the root
        for j in range(1, k):
            seen, cur = set(), j
            while cur != 0:
                if cur in seen or not 0 <= cur < k:
                    raise ValueError(f"parent chain of joint {j} does not reach the root")
                seen.add(cur)
                cur = int(self.parents[cur])

    @property
    def n_bones(self) -> int:
        return len(self.parents)

    def topo_order(self) -> list[int]:
        order, placed = [], set()
        pending = list(range(self.n_bones))
        while pending:
            rest = []
            for j in pending:
                if self.parents[j] == -1 or self.parents[j] in placed:
                    order.append(j)
                    placed.add(j)
                else:
                    rest.append(j)
            pending = rest
        return order

    def bone_segments(self) -> np.ndarray:
        """Rest capsule segment per bone: joint to its first child (leaves
        collapse to a point, i.e. a sphere of the bone radius)."""
        k = self.n_bones
        segs = np.repeat(self.rest_joints[:, None, :], 2, axis=1)
        for j in range(k):
            children = np.nonzero(self.parents == j)[0]
            if len(children):
                segs[j, 1] = self.rest_joints[children[0]]
        return segs

    def to_json_dict(self) -> dict:
        return {"K": self.n_bones, "parents": self.parents.tolist(),
                "rest_joints": self.rest_joints.tolist(), "radii": self.radii.tolist()}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SkeletonRig":
        rig = cls(parents=np.asarray(d["parents"]), rest_joints=np.asarray(d["rest_joints"]),
                  radii=np.asarray(d["radii"]))
        if rig.n_bones != d.get("K", rig.n_bones):
            raise ValueError("rig K field disagrees with array lengths")
        return rig

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "SkeletonRig":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def validate_pose(rig: SkeletonRig, theta: np.ndarray, limit: float = np.pi):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (rig.n_bones, 3):
        raise ValueError(f"pose shape {theta.shape}, want ({rig.n_bones}, 3)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("non-finite pose")
    mags = np.linalg.norm(theta, axis=1)
    if np.any(mags >= limit):
        raise ValueError(f"axis-angle magnitude {mags.max():.3f} exceeds limit {limit}")
    return theta


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors [K,3] to rotation matrices [K,3,3]."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    angles = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(angles < 1e-12, 1.0, angles)
    axes = aa / safe
    kx, ky, kz = axes[:, 0], axes[:, 1], axes[:, 2]
    zero = np.zeros_like(kx)
    kmat = np.stack([
        np.stack([zero, -kz, ky], axis=-1),
        np.stack([kz, zero, -kx], axis=-1),
        np.stack([-ky, kx, zero], axis=-1),
    ], axis=-2)
    s = np.sin(angles)[..., None]
    c = np.cos(angles)[..., None]
    eye = np.eye(3)[None]
    rot = eye + s * kmat + (1.0 - c) * (kmat @ kmat)
    small = (angles < 1e-12)[..., None]
    return np.where(small, eye, rot)


def forward_kinematics(rig: SkeletonRig, theta: np.ndarray) -> np.ndarray:
    """Bone transforms B [K,4,4] mapping rest-frame points to posed frame.

    Each joint rotates about its own rest position; the zero pose yields
    identities for every bone.
    """
    theta = validate_pose(rig, theta)
    k = rig.n_bones
    rots = rodrigues(theta)
    world = np.zeros((k, 4, 4))
    for j in rig.topo_order():
        parent = int(rig.parents[j])
        local = np.eye(4)
        local[:3, :3] = rots[j]
        offset = rig.rest_joints[j] - (rig.rest_joints[parent] if parent >= 0 else 0.0)
        trans = np.eye(4)
        trans[:3, 3] = offset
        step = trans @ local
        world[j] = step if parent < 0 else world[parent] @ step
    bones = np.empty((k, 4, 4))
    for j in range(k):
        undo = np.eye(4)
        undo[:3, 3] = -rig.rest_joints[j]
        bones[j] = world[j] @ undo
    return bones


# ---------------------------------------------------------------------------
# weight fields

def point_segment_sqdist(x: np.ndarray, segs: np.ndarray):
    """Squared distances [N,K] and axial parameters [N,K] to segments.

    Expanded into matrix products so no [N,K,3] temporary is built; this
    sits on the hot path of every weight/occupancy evaluation.
    """
    x = np.asarray(x, dtype=np.float64)
    a, b = segs[:, 0], segs[:, 1]
    ab = b - a
    ab2 = np.maximum((ab * ab).sum(axis=1), 1e-18)
    x_dot_ab = x @ ab.T
    a_dot_ab = (a * ab).sum(axis=1)
    t = np.clip((x_dot_ab - a_dot_ab) / ab2, 0.0, 1.0)
    x2 = (x * x).sum(axis=1)
    d2 = (x2[:, None] - 2.0 * (x @ a.T) + (a * a).sum(axis=1)
          - 2.0 * t * (x_dot_ab - a_dot_ab) + t * t * ab2)
    return np.maximum(d2, 0.0), t


def point_segment_distance(x: np.ndarray, segs: np.ndarray):
    """Distances [N,K] and axial parameters [N,K] from points to segments."""
    d2, t = point_segment_sqdist(x, segs)
    return np.sqrt(d2), t


def rig_weights(rig: SkeletonRig, x: np.ndarray,
                temperature: float = WEIGHT_TEMPERATURE) -> np.ndarray:
    """Analytic soft skinning weights: softmax of -d^2/T over rest capsules."""
    d2, _ = point_segment_sqdist(np.asarray(x, dtype=np.float64), rig.bone_segments())
    logits = -d2 / temperature
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def query_weights(w_net: Mlp, z_id: Tensor, x: Tensor) -> Tensor:
    """Learned skinning weights at canonical x (softmax-normalized, taped)."""
    n = x.shape[0]
    zrep = tape.repeat_rows(z_id, n)
    return tape.softmax(w_net.forward(tape.concat([zrep, x], axis=-1)))


def make_weight_fn(w_net: Mlp, z_id: np.ndarray):
    """Bind z_id into a fast weight-field closure.

    The identity code enters only the first layer, so its contribution is
    folded into the bias once; per-call work is then a [N,3] matmul plus
    the hidden stack. This is the inner loop of root finding and ray
    marching.
    """
    z = np.asarray(z_id, dtype=np.float32).reshape(-1)
    w0 = w_net.weights[0].data
    z_part = (z @ w0[:len(z)] + w_net.biases[0].data).astype(np.float32)
    w0x = np.ascontiguousarray(w0[len(z):])

    def weight_fn(x: np.ndarray) -> np.ndarray:
        h = x.astype(np.float32) @ w0x + z_part
        h = tape.softplus_np(h)
        last = len(w_net.weights) - 1
        for i in range(1, last + 1):
            h = h @ w_net.weights[i].data + w_net.biases[i].data
            if i < last:
                h = tape.softplus_np(h)
        h = h - h.max(axis=1, keepdims=True)
        e = np.exp(h.astype(np.float64))
        return e / e.sum(axis=1, keepdims=True)

    return weight_fn


def query_weights_np(w_net: Mlp, z_id: np.ndarray, x: np.ndarray) -> np.ndarray:
    return make_weight_fn(w_net, z_id)(x)


# ---------------------------------------------------------------------------
# deformation

def deform_points(weight_fn, bones: np.ndarray, x: np.ndarray) -> np.ndarray:
    """x' = sum_k w_k(x) B_k x for points [N,3]; weight_fn: [N,3] -> [N,K]."""
    x = np.asarray(x, dtype=np.float64)
    w = weight_fn(x)
    out = np.zeros_like(x)
    for k in range(bones.shape[0]):
        out += w[:, k:k + 1] * (x @ bones[k, :3, :3].T + bones[k, :3, 3])
    return out


def deform_tensor(w_net: Mlp, z_id: Tensor, x: Tensor, bones: np.ndarray) -> Tensor:
    """Taped deformation (differentiable w.r.t. x and z_id)."""
    w = query_weights(w_net, z_id, x)
    parts = []
    for k in range(bones.shape[0]):
        rot = Tensor(bones[k, :3, :3].T.astype(x.data.dtype))
        trans = Tensor(bones[k, :3, 3].astype(x.data.dtype))
        posed_k = tape.add(tape.matmul(x, rot), trans)
        wk = tape.slice_cols(w, k, k + 1)
        parts.append(tape.mul(wk, posed_k))
    out = parts[0]
    for p in parts[1:]:
        out = tape.add(out, p)
    return out


# ---------------------------------------------------------------------------
# inverse: canonical correspondence by quasi-Newton root finding

def _blended_rotation(weight_fn, bones: np.ndarray, x: np.ndarray) -> np.ndarray:
    w = weight_fn(x)
    return np.einsum("nk,kij->nij", w, bones[:, :3, :3])


def _solve3(mats: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Batched 3x3 solve by Cramer's rule (much faster than lapack here).

    Near-singular systems return a zero step, which the caller treats as
    a stalled candidate.
    """
    a, b, c = mats[:, 0, 0], mats[:, 0, 1], mats[:, 0, 2]
    d, e, f = mats[:, 1, 0], mats[:, 1, 1], mats[:, 1, 2]
    g, h, i = mats[:, 2, 0], mats[:, 2, 1], mats[:, 2, 2]
    co00 = e * i - f * h
    co01 = c * h - b * i
    co02 = b * f - c * e
    co10 = f * g - d * i
    co11 = a * i - c * g
    co12 = c * d - a * f
    co20 = d * h - e * g
    co21 = b * g - a * h
    co22 = a * e - b * d
    det = a * co00 + b * co10 + c * co20
    bad = np.abs(det) < 1e-14
    inv_det = np.where(bad, 0.0, 1.0 / np.where(bad, 1.0, det))
    r0, r1, r2 = rhs[:, 0], rhs[:, 1], rhs[:, 2]
    return np.stack([
        (co00 * r0 + co01 * r1 + co02 * r2) * inv_det,
        (co10 * r0 + co11 * r1 + co12 * r2) * inv_det,
        (co20 * r0 + co21 * r1 + co22 * r2) * inv_det,
    ], axis=1)


def canonical_correspondence(weight_fn, bones: np.ndarray, x_prime: np.ndarray,
                             tol: float = 1e-5, max_iter: int = 30,
                             occupancy_fn=None, dedup_tol: float = 1e-4,
                             prune_weight: float = 0.1):
    """Find canonical points whose deformation matches x_prime [N,3].

    One candidate per bone is started at the rigid inverse B_k^{-1} x'
    (deduplicated at ``dedup_tol``); each candidate runs a rank-1
    quasi-Newton iteration with backtracking halving (max 5), so the
    accepted residual norm never increases. Among converged candidates
    the one with maximal ``occupancy_fn`` value wins (ties: lowest bone
    index). Points with no converged candidate are flagged as rootless.

    Returns (x_hat [N,3], ok [N] bool).
    """
    CALL_COUNTS["canonical_correspondence"] += 1
    x_prime = np.asarray(x_prime, dtype=np.float64)
    n = x_prime.shape[0]
    k = bones.shape[0]

    if np.abs(bones - np.eye(4)).max() < 1e-12:
        return x_prime.copy(), np.ones(n, dtype=bool)

    inv = np.linalg.inv(bones)
    cands = np.einsum("kij,nj->nki", inv[:, :3, :3], x_prime) + inv[None, :, :3, 3]

    # a rigid-inverse start through bone k only matters where bone k has
    # weight; weights at the query point are a cheap one-pass proxy for
    # that, and the dominant bone always keeps its candidate
    w_query = weight_fn(x_prime)
    keep = w_query >= prune_weight
    keep[np.arange(n), w_query.argmax(axis=1)] = True

    for b in range(1, k):
        for a in range(b):
            close = np.linalg.norm(cands[:, b] - cands[:, a], axis=1) < dedup_tol
            keep[:, b] &= ~(keep[:, a] & close)

    pt_idx, bone_idx = np.nonzero(keep)
    x = cands[pt_idx, bone_idx]
    target = x_prime[pt_idx]

    def residual(pts, tgt):
        return deform_points(weight_fn, bones, pts) - tgt

    # the rank-1 updates refine a per-candidate seed: its own bone rotation
    jac = np.ascontiguousarray(bones[bone_idx, :3, :3])
    r = residual(x, target)
    rnorm = np.linalg.norm(r, axis=1)
    active = rnorm >= tol

    for _ in range(max_iter):
        if not active.any():
            break
        ia = np.nonzero(active)[0]
        xa, ja, ra = x[ia], jac[ia], r[ia]
        rna = rnorm[ia]
        dx = _solve3(ja, -ra)

        step = np.ones(len(ia))
        xn = xa + dx
        rn = residual(xn, target[ia])
        rnn = np.linalg.norm(rn, axis=1)
        for _bt in range(5):
            worse = rnn > rna
            if not worse.any():
                break
            step[worse] *= 0.5
            xn[worse] = xa[worse] + step[worse, None] * dx[worse]
            rn[worse] = residual(xn[worse], target[ia][worse])
            rnn[worse] = np.linalg.norm(rn[worse], axis=1)

        stalled = (rnn > rna) | (np.linalg.norm(xn - xa, axis=1) < 1e-16)
        ok_step = ~stalled
        if ok_step.any():
            sel = ia[ok_step]
            dx_used = xn[ok_step] - x[sel]
            dr = rn[ok_step] - r[sel]
            denom = np.maximum((dx_used * dx_used).sum(axis=1), 1e-18)
            upd = (dr - np.einsum("mij,mj->mi", jac[sel], dx_used)) / denom[:, None]
            jac[sel] += np.einsum("mi,mj->mij", upd, dx_used)
            x[sel] = xn[ok_step]
            r[sel] = rn[ok_step]
            rnorm[sel] = rnn[ok_step]
        # stalled candidates make no further progress: drop them
        active[ia[stalled]] = False
        active &= rnorm >= tol

    converged = rnorm < tol
    x_hat = np.zeros_like(x_prime)
    ok = np.zeros(n, dtype=bool)
    if converged.any():
        conv_pts = pt_idx[converged]
        conv_x = x[converged]
        conv_bone = bone_idx[converged]
        # occupancy only breaks ties between multiple roots of one point
        score = np.zeros(len(conv_x))
        if occupancy_fn is not None and len(conv_x):
            counts = np.bincount(conv_pts, minlength=n)
            contested = counts[conv_pts] > 1
            if contested.any():
                score[contested] = np.asarray(occupancy_fn(conv_x[contested]),
                                              dtype=np.float64)
        # pick max score per point, ties resolved by lowest bone index
        order = np.lexsort((conv_bone, -score, conv_pts))
        firsts = np.ones(len(order), dtype=bool)
        sorted_pts = conv_pts[order]
        firsts[1:] = sorted_pts[1:] != sorted_pts[:-1]
        winners = order[firsts]
        ok[conv_pts[winners]] = True
        x_hat[conv_pts[winners]] = conv_x[winners]
    return x_hat, ok


class SkinningModel:
    """Learned weight net bound to a rig; the operation surface used by
    the renderer and the trainer."""

    def __init__(self, w_net: Mlp, rig: SkeletonRig):
        self.w_net = w_net
        self.rig = rig

    def weight_fn(self, z_id: np.ndarray):
        return make_weight_fn(self.w_net, z_id)

    def deform(self, z_id: np.ndarray, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        bones = forward_kinematics(self.rig, theta)
        return deform_points(self.weight_fn(z_id), bones, x)

    def correspond(self, z_id: np.ndarray, x_prime: np.ndarray, theta: np.ndarray,
                   tol: float = 1e-5, max_iter: int = 30, occupancy_fn=None):
        theta = validate_pose(self.rig, theta, limit=JOINT_LIMIT)
        bones = forward_kinematics(self.rig, theta)
        return canonical_correspondence(self.weight_fn(z_id), bones, x_prime,
                                        tol=tol, max_iter=max_iter,
                                        occupancy_fn=occupancy_fn)
