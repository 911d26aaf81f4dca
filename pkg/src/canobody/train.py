"""Two-stage learning.

Stage 1 (supervised): the geometry/texture nets, the skinning net and
per-scan latent codes are optimized jointly on labeled point scans
(autodecoding; each scan owns trainable codes). Occupancy targets train
with BCE at the canonical correspondences of the scan points, colors
with an L2 norm, plus a linear identity classifier on the identity code
and a weight-supervision term for the skinning net at the rig joints.

Stage 2 (self-supervised): the image encoder and the texture net fit
masked labeled images through the renderer: photometric L1 on hit
pixels, cross-entropy between the soft silhouette and the mask outside
the hit set, and triplet + cross-entropy identity losses on the encoded
identity code. Geometry stays frozen; gradients reach the codes through
the frozen nets but never through hit positions.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ppm, rng, tape
from .body import ImplicitBodyModel, LatentCodes
from .camera import Camera
from .checkpoint import load_checkpoint, save_checkpoint
from .config import MarchConfig, TrainConfig, config_from_dict, config_to_dict
from .encoder import ImageEncoder
from .nn import AdamState, Mlp, adam_step
from .render import march_rays, model_corr_fn, posed_bounds, render_image
from .skinning import (SkeletonRig, SkinningModel, canonical_correspondence,
                       forward_kinematics, make_weight_fn, query_weights,
                       query_weights_np, rig_weights)
from .synth import ScanSample, canonical_occupancy_fns, load_manifest, load_rigs, load_scan
from .tape import Tensor


# ---------------------------------------------------------------------------
# model bundle and checkpoints

class ModelBundle:
    """Implicit body model + skinning net + stage-1 identity classifier."""

    def __init__(self, cfg: TrainConfig, n_bones: int, n_classes: int,
                 init_seed: int | None = None):
        mk = (lambda tag: rng.stream(init_seed, "init", tag)) if init_seed is not None \
            else (lambda tag: None)
        mc = cfg.model
        self.cfg = cfg
        self.n_bones = n_bones
        self.n_classes = n_classes
        self.model = ImplicitBodyModel(mc, hidden_body=cfg.hidden_body,
                                       hidden_cloth=cfg.hidden_cloth,
                                       hidden_tex=cfg.hidden_tex,
                                       hidden_gen=cfg.hidden_gen,
                                       rng=mk("model"))
        self.w_net = Mlp([mc.dim_id + 3, cfg.hidden_skin, cfg.hidden_skin, n_bones],
                         hidden_act="softplus", out_act="none", rng=mk("skin"),
                         zero_init_last=True)
        self.classifier = Mlp([mc.dim_id, n_classes], out_act="none", rng=mk("cls3d"))

    def named_params(self) -> dict[str, Tensor]:
        out = dict(self.model.parameters())
        for name, p in self.w_net.parameters():
            out[f"skin/{name}"] = p
        for name, p in self.classifier.parameters():
            out[f"cls3d/{name}"] = p
        return out

    def freeze_geometry(self):
        """Stage-2 contract: body, cloth, generator, skinning stay fixed."""
        self.model.body_net.set_trainable(False)
        self.model.cloth_net.set_trainable(False)
        self.model.generator.set_trainable(False)
        self.w_net.set_trainable(False)

    def geometry_blob(self) -> bytes:
        parts = []
        for name in sorted(self.named_params()):
            if name.startswith(("body/", "cloth/", "gen/", "skin/")):
                parts.append(self.named_params()[name].data.tobytes())
        return b"".join(parts)

    def skinning_model(self, rig: SkeletonRig) -> SkinningModel:
        return SkinningModel(self.w_net, rig)


class CodeBook:
    """One trainable code triple per pre-training scan sample."""

    def __init__(self, n_samples: int, cfg: TrainConfig, seed: int | None = None):
        mc = cfg.model
        self.entries: list[dict[str, Tensor]] = []
        for i in range(n_samples):
            if seed is None:
                z = {k: np.zeros(d, dtype=np.float32)
                     for k, d in (("z_id", mc.dim_id), ("z_cloth", mc.dim_cloth),
                                  ("z_tex", mc.dim_tex))}
            else:
                g = rng.stream(seed, "codebook", i)
                z = {"z_id": g.normal(0, 0.01, mc.dim_id).astype(np.float32),
                     "z_cloth": g.normal(0, 0.01, mc.dim_cloth).astype(np.float32),
                     "z_tex": g.normal(0, 0.01, mc.dim_tex).astype(np.float32)}
            self.entries.append({k: Tensor(v, requires_grad=True) for k, v in z.items()})

    def __len__(self):
        return len(self.entries)

    def codes_np(self, idx: int) -> LatentCodes:
        e = self.entries[idx]
        return LatentCodes(z_id=e["z_id"].data, z_cloth=e["z_cloth"].data,
                           z_tex=e["z_tex"].data)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, e in enumerate(self.entries):
            for k, t in e.items():
                out[f"codebook/{i:04d}/{k}"] = t
        return out


def _pack_adam(adam: AdamState, tensors: dict, extra: dict):
    for name, m in adam.m.items():
        tensors[f"optim/m/{name}"] = m
        tensors[f"optim/v/{name}"] = adam.v[name]
    extra["adam_steps"] = dict(adam.steps)
    extra["adam_lr"] = adam.lr


def _unpack_adam(tensors: dict, extra: dict) -> AdamState:
    adam = AdamState(lr=extra.get("adam_lr", 1e-3))
    adam.steps = {k: int(v) for k, v in extra.get("adam_steps", {}).items()}
    for name in adam.steps:
        adam.m[name] = tensors[f"optim/m/{name}"].astype(np.float32).copy()
        adam.v[name] = tensors[f"optim/v/{name}"].astype(np.float32).copy()
    return adam


def save_bundle(path, bundle: ModelBundle, codebook: CodeBook | None = None,
                encoder: ImageEncoder | None = None, cls2: Mlp | None = None,
                adam: AdamState | None = None, step: int = 0, stage: int = 1):
    tensors = {name: p.data for name, p in bundle.named_params().items()}
    extra = {"config": config_to_dict(bundle.cfg), "n_bones": bundle.n_bones,
             "n_classes": bundle.n_classes, "stage": stage, "step": step}
    if codebook is not None:
        tensors.update({name: p.data for name, p in codebook.named_params().items()})
        extra["codebook_size"] = len(codebook)
    if encoder is not None:
        tensors.update({f"encoder/{n}": p.data for n, p in encoder.parameters().items()})
        extra["encoder"] = {"channels": list(encoder.channels),
                            "height": encoder.height, "width": encoder.width}
    if cls2 is not None:
        for n, p in cls2.parameters():
            tensors[f"cls2/{n}"] = p.data
        extra["n_classes2"] = cls2.out_dim
    if adam is not None:
        _pack_adam(adam, tensors, extra)
    save_checkpoint(path, tensors, extra)


def _fill(params: dict[str, Tensor], tensors: dict, prefix: str = ""):
    for name, p in params.items():
        key = prefix + name
        arr = tensors[key].astype(np.float32)
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint tensor {key} has shape {arr.shape}, "
                             f"want {p.data.shape}")
        p.data = arr.copy()


def load_bundle(path):
    """Returns (bundle, codebook, encoder, cls2, adam, extra)."""
    tensors, extra = load_checkpoint(path)
    cfg = config_from_dict(extra["config"])
    bundle = ModelBundle(cfg, n_bones=extra["n_bones"], n_classes=extra["n_classes"])
    _fill(bundle.named_params(), tensors)

    codebook = None
    if "codebook_size" in extra:
        codebook = CodeBook(extra["codebook_size"], cfg)
        _fill(codebook.named_params(), tensors)

    encoder = None
    if "encoder" in extra:
        e = extra["encoder"]
        encoder = ImageEncoder(cfg.model, channels=tuple(e["channels"]),
                               height=e["height"], width=e["width"])
        _fill({f"encoder/{n}": p for n, p in encoder.parameters().items()}, tensors)

    cls2 = None
    if "n_classes2" in extra:
        cls2 = Mlp([cfg.model.dim_id, extra["n_classes2"]], out_act="none")
        _fill({f"cls2/{n}": p for n, p in dict(cls2.parameters()).items()}, tensors)

    adam = _unpack_adam(tensors, extra) if "adam_steps" in extra else None
    return bundle, codebook, encoder, cls2, adam, extra


# ---------------------------------------------------------------------------
# datasets

@dataclass
class PretrainData:
    samples: list[ScanSample]
    meta: list[dict]                 # subject / outfit per sample
    rigs: dict[int, SkeletonRig]
    classes: list[int]               # class index per sample
    n_classes: int

    @classmethod
    def load(cls, data_dir) -> "PretrainData":
        manifest = load_manifest(data_dir)
        rigs = load_rigs(data_dir, manifest)
        base = Path(data_dir)
        samples, meta = [], []
        for rec in manifest["scans"]:
            samples.append(load_scan(base / rec["path"], label=rec["subject"]))
            meta.append(rec)
        if not samples:
            raise ValueError(f"{data_dir}: manifest lists no scans")
        subjects = sorted({m["subject"] for m in meta})
        cls_of = {s: i for i, s in enumerate(subjects)}
        classes = [cls_of[m["subject"]] for m in meta]
        return cls(samples=samples, meta=meta, rigs=rigs, classes=classes,
                   n_classes=len(subjects))


@dataclass
class ImageRecord:
    rec_id: int
    subject: int
    outfit: int
    pose_tag: str
    gallery: bool
    image: np.ndarray
    mask: np.ndarray
    theta: np.ndarray
    camera: Camera


@dataclass
class ImageData:
    records: list[ImageRecord]
    rigs: dict[int, SkeletonRig]
    classes: list[int]
    n_classes: int
    by_class: dict[int, list[int]] = field(default_factory=dict)

    @classmethod
    def load(cls, data_dir) -> "ImageData":
        manifest = load_manifest(data_dir)
        rigs = load_rigs(data_dir, manifest)
        base = Path(data_dir)
        records = []
        for rec in manifest["records"]:
            import json
            sidecar = json.loads((base / rec["meta"]).read_text())
            records.append(ImageRecord(
                rec_id=rec["id"], subject=rec["subject"], outfit=rec["outfit"],
                pose_tag=rec["pose_tag"], gallery=rec["gallery"],
                image=ppm.read_ppm(base / rec["image"]),
                mask=ppm.read_pgm(base / rec["mask"]),
                theta=np.asarray(sidecar["theta"], dtype=np.float64),
                camera=Camera.from_json_dict(sidecar["camera"])))
        subjects = sorted({r.subject for r in records})
        cls_of = {s: i for i, s in enumerate(subjects)}
        classes = [cls_of[r.subject] for r in records]
        by_class: dict[int, list[int]] = {}
        for i, c in enumerate(classes):
            by_class.setdefault(c, []).append(i)
        return cls(records=records, rigs=rigs, classes=classes,
                   n_classes=len(subjects), by_class=by_class)


# ---------------------------------------------------------------------------
# loss terms

def skinning_weight_loss(w_net: Mlp, z_id: Tensor, rig: SkeletonRig) -> Tensor:
    """Mean per-joint L2 gap between the weight net and the rig weights."""
    joints = rig.rest_joints.astype(np.float32)
    target = rig_weights(rig, joints).astype(np.float32)
    w = query_weights(w_net, z_id, Tensor(joints))
    gap = tape.ssum(tape.square(tape.sub(w, target)), axis=1)
    return tape.mean(tape.sqrt(tape.add(gap, 1e-12)))


def skinning_field_loss(w_net: Mlp, z_id: Tensor, rig: SkeletonRig,
                        g: np.random.Generator, n_probe: int = 32) -> Tensor:
    """Weight supervision at random canonical probes.

    A handful of joints under-constrains the field between bones on small
    rigs, which both warps the canonical frame and slows root finding;
    dense probes against the rig's analytic weights pin it down.
    """
    probes = g.uniform(-0.85, 0.85, size=(n_probe, 3)).astype(np.float32)
    target = rig_weights(rig, probes).astype(np.float32)
    w = query_weights(w_net, z_id, Tensor(probes))
    gap = tape.ssum(tape.square(tape.sub(w, target)), axis=1)
    return tape.mean(tape.sqrt(tape.add(gap, 1e-12)))


def triplet_loss(z: Tensor, labels: np.ndarray, margin: float) -> Tensor:
    """Batch-hard triplet loss on L2-normalized codes."""
    labels = np.asarray(labels)
    norm = tape.sqrt(tape.add(tape.ssum(tape.square(z), axis=1, keepdims=True), 1e-12))
    zn = tape.mul(z, tape.reciprocal(norm))

    vals = zn.data.astype(np.float64)
    d2 = ((vals[:, None, :] - vals[None, :, :]) ** 2).sum(axis=2)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)

    anchors, pos_idx, neg_idx = [], [], []
    for i in range(len(labels)):
        pos_mask = same[i] & ~eye[i]
        neg_mask = ~same[i]
        if not pos_mask.any() or not neg_mask.any():
            continue
        anchors.append(i)
        pos_idx.append(np.where(pos_mask, d2[i], -np.inf).argmax())
        neg_idx.append(np.where(neg_mask, d2[i], np.inf).argmin())
    if not anchors:
        warnings.warn("triplet loss: no valid (anchor, positive, negative) in batch")
        return Tensor(np.float32(0.0))

    a = tape.gather_rows(zn, np.asarray(anchors))
    p = tape.gather_rows(zn, np.asarray(pos_idx))
    n = tape.gather_rows(zn, np.asarray(neg_idx))
    d_pos = tape.sqrt(tape.add(tape.ssum(tape.square(tape.sub(a, p)), axis=1), 1e-12))
    d_neg = tape.sqrt(tape.add(tape.ssum(tape.square(tape.sub(a, n)), axis=1), 1e-12))
    return tape.mean(tape.relu(tape.add(tape.sub(d_pos, d_neg), margin)))


# ---------------------------------------------------------------------------
# stage 1

def pretrain_step(bundle: ModelBundle, codebook: CodeBook, data: PretrainData,
                  batch_idx: np.ndarray, cfg: TrainConfig, step: int,
                  adam: AdamState | None = None) -> dict:
    """One supervised autodecoding step over a batch of scan samples."""
    lw = cfg.loss_weights
    terms = {"id": [], "cloth": [], "tex": [], "cla": [], "skin": [], "skin_field": []}
    no_root = 0
    total_pts = 0
    sample_losses = []

    for idx in batch_idx:
        idx = int(idx)
        scan = data.samples[idx]
        rig = data.rigs[data.meta[idx]["subject"]]
        e = codebook.entries[idx]
        z_id, z_cloth, z_tex = e["z_id"], e["z_cloth"], e["z_tex"]

        g = rng.stream(cfg.seed, "pretrain", "points", step, idx)
        sel = g.choice(len(scan.points), size=min(cfg.points_per_sample, len(scan.points)),
                       replace=False)
        pts = scan.points[sel]
        o1_t = scan.o1[sel]
        o2_t = scan.o2[sel]
        col_t = scan.color[sel]
        total_pts += len(pts)

        bones = forward_kinematics(rig, scan.theta)
        vol_np = bundle.model.generate_volume_np(z_id.data)
        codes_np = codebook.codes_np(idx)

        def occ(p, _codes=codes_np, _vol=vol_np):
            return bundle.model.clothed_occupancy_np(_codes, p, volume=_vol)

        xhat, ok = canonical_correspondence(
            make_weight_fn(bundle.w_net, z_id.data), bones, pts,
            tol=cfg.broyden_tol, max_iter=cfg.broyden_max_iter, occupancy_fn=occ)
        no_root += int((~ok).sum())
        if not ok.any():
            continue

        xt = Tensor(xhat[ok].astype(np.float32))
        vol = bundle.model.generate_volume(z_id)
        o1, f = bundle.model.query_identity(z_id, xt, volume=vol)
        o2 = bundle.model.query_clothed(z_cloth, f, xt)
        l_id = tape.mean(tape.bce(o1, o1_t[ok, None].astype(np.float32)))
        l_cloth = tape.mean(tape.bce(o2, o2_t[ok, None].astype(np.float32)))

        inside = ok & (o2_t > 0.5)
        if inside.any():
            ct = bundle.model.query_texture(z_tex, z_cloth,
                                            Tensor(xhat[inside].astype(np.float32)))
            gap = tape.ssum(tape.square(tape.sub(ct, col_t[inside].astype(np.float32))),
                            axis=1)
            l_tex = tape.mean(tape.sqrt(tape.add(gap, 1e-12)))
        else:
            l_tex = Tensor(np.float32(0.0))

        logits = bundle.classifier.forward(tape.reshape(z_id, (1, cfg.model.dim_id)))
        l_cla = tape.cross_entropy_logits(logits, np.asarray([data.classes[idx]]))
        l_skin = skinning_weight_loss(bundle.w_net, z_id, rig)
        l_field = skinning_field_loss(bundle.w_net, z_id, rig,
                                      rng.stream(cfg.seed, "pretrain", "wprobe", step, idx))

        sample_total = tape.add(
            tape.add(tape.scale(l_id, lw["id"]), tape.scale(l_cloth, lw["cloth"])),
            tape.add(tape.add(tape.scale(l_tex, lw["tex"]), tape.scale(l_cla, lw["cla"])),
                     tape.add(tape.scale(l_skin, lw["skin"]),
                              tape.scale(l_field, lw["skin_field"]))))
        sample_losses.append(sample_total)
        for key, t in (("id", l_id), ("cloth", l_cloth), ("tex", l_tex),
                       ("cla", l_cla), ("skin", l_skin), ("skin_field", l_field)):
            terms[key].append(float(t.data))

    if not sample_losses:
        warnings.warn(f"pretrain step {step}: every point was rootless; step skipped")
        return {"skipped": True, "no_root_frac": 1.0}

    total = tape.scale(sample_losses[0], 1.0)
    for t in sample_losses[1:]:
        total = tape.add(total, t)
    total = tape.scale(total, 1.0 / len(sample_losses))
    tape.assert_finite(total, "pretrain loss")
    tape.backward(total)

    if adam is not None:
        params = bundle.named_params()
        params.update(codebook.named_params())
        adam_step(params, adam)

    out = {k: float(np.mean(v)) if v else 0.0 for k, v in terms.items()}
    out["total"] = float(total.data)
    out["no_root_frac"] = no_root / max(total_pts, 1)
    out["skipped"] = False
    return out


def clothed_iou(bundle: ModelBundle, codes: LatentCodes, subject, outfit_idx: int,
                grid_res: int = 32) -> float:
    """IoU of the decoded clothed set against the canonical oracle."""
    axis = np.linspace(-1.0, 1.0, grid_res)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    pred = bundle.model.clothed_occupancy_np(codes, pts) >= bundle.cfg.model.tau
    _, o2_fn, _ = canonical_occupancy_fns(subject, outfit_idx)
    truth = o2_fn(pts) >= 0.5
    union = (pred | truth).sum()
    return float((pred & truth).sum() / union) if union else 1.0


# ---------------------------------------------------------------------------
# stage 2

def _sample_pixels(g: np.random.Generator, mask: np.ndarray, n: int):
    """Half the budget inside the mask, half outside (row-major ids)."""
    flat = mask.reshape(-1) > 0.5
    inside = np.nonzero(flat)[0]
    outside = np.nonzero(~flat)[0]
    n_in = min(len(inside), n // 2)
    n_out = min(len(outside), n - n_in)
    picks = []
    if n_in:
        picks.append(g.choice(inside, size=n_in, replace=False))
    if n_out:
        picks.append(g.choice(outside, size=n_out, replace=False))
    return np.sort(np.concatenate(picks))


def _image_losses(bundle: ModelBundle, rec: ImageRecord, z_id: Tensor, z_cloth: Tensor,
                  z_tex: Tensor, rig: SkeletonRig, cfg: TrainConfig,
                  g: np.random.Generator):
    """Taped (L_rgb, L_sil) of one image at a sampled pixel subset."""
    mc = cfg.model
    codes_np = LatentCodes(z_id.data.copy(), z_cloth.data.copy(), z_tex.data.copy())
    vol_np = bundle.model.generate_volume_np(codes_np.z_id)

    def occ(p):
        return bundle.model.clothed_occupancy_np(codes_np, p, volume=vol_np)

    skin = bundle.skinning_model(rig)
    corr = model_corr_fn(skin, codes_np.z_id, rec.theta, occupancy_fn=occ,
                         tol=cfg.broyden_tol, max_iter=cfg.broyden_max_iter)

    pix = _sample_pixels(g, rec.mask, cfg.pixels_per_image)
    rows, cols = np.divmod(pix, rec.camera.width)
    origin, dirs = rec.camera.pixel_rays(cols + 0.5, rows + 0.5)
    march = MarchConfig(n_steps=cfg.train_march_steps,
                        refine_steps=cfg.march.refine_steps,
                        box_half_extent=cfg.march.box_half_extent,
                        bound_margin=cfg.march.bound_margin)
    bounds = posed_bounds(rig, rec.theta, margin=march.bound_margin,
                          clamp=march.box_half_extent)
    res = march_rays(occ, corr, origin[None, :], dirs, march, mc.tau, bounds=bounds)

    n_pix = len(pix)
    mask_vals = rec.mask.reshape(-1)[pix] > 0.5
    img_vals = rec.image.reshape(-1, 3)[pix]

    # photometric L1 over the hit set, normalized by all sampled pixels
    if res.hit.any():
        hit_idx = np.nonzero(res.hit)[0]
        colors = bundle.model.query_texture(z_tex, z_cloth,
                                            Tensor(res.xhat[hit_idx].astype(np.float32)))
        diff = tape.absolute(tape.sub(colors, img_vals[hit_idx].astype(np.float32)))
        l_rgb = tape.scale(tape.ssum(diff), 1.0 / n_pix)
    else:
        l_rgb = Tensor(np.float32(0.0))

    # silhouette cross-entropy over pixels outside the hit set or mask
    p_out = (~res.hit) | (~mask_vals)
    taped = p_out & res.best_ok
    const = p_out & ~res.best_ok
    l_sil_parts = []
    if taped.any():
        ti = np.nonzero(taped)[0]
        vol_t = bundle.model.generate_volume(z_id)
        xt = Tensor(res.best_xhat[ti].astype(np.float32))
        _, feat = bundle.model.query_identity(z_id, xt, volume=vol_t)
        m_hat = bundle.model.query_clothed(z_cloth, feat, xt)
        ce = tape.bce(m_hat, mask_vals[ti].astype(np.float32)[:, None])
        l_sil_parts.append(tape.ssum(ce))
    const_ce = 0.0
    if const.any():
        m = mask_vals[const].astype(np.float64)
        eps = 1e-7  # soft mask of an unresolved ray is an empty constant
        const_ce += float(-(m * np.log(eps) + (1.0 - m) * np.log(1.0 - eps)).sum())
    l_sil = Tensor(np.float32(const_ce))
    for part in l_sil_parts:
        l_sil = tape.add(l_sil, part)
    l_sil = tape.scale(l_sil, 1.0 / n_pix)
    return l_rgb, l_sil, res


def finetune_step(bundle: ModelBundle, enc: ImageEncoder, cls2: Mlp, data: ImageData,
                  rec_indices: list[int], cfg: TrainConfig, step: int,
                  adam: AdamState | None = None) -> dict:
    """One self-supervised step on a PK-sampled image batch."""
    lw = cfg.loss_weights
    z_rows = []
    labels = []
    l_rgb_vals, l_sil_vals = [], []
    img_losses = []

    for j, ridx in enumerate(rec_indices):
        rec = data.records[ridx]
        z_id, z_cloth, z_tex = enc.forward(Tensor(rec.image))
        g = rng.stream(cfg.seed, "finetune", "pix", step, rec.rec_id)
        l_rgb, l_sil, _ = _image_losses(bundle, rec, z_id, z_cloth, z_tex,
                                        data.rigs[rec.subject], cfg, g)
        img_losses.append(tape.add(tape.scale(l_rgb, lw["rgb"]),
                                   tape.scale(l_sil, lw["sil"])))
        l_rgb_vals.append(float(l_rgb.data))
        l_sil_vals.append(float(l_sil.data))
        z_rows.append(tape.reshape(z_id, (1, cfg.model.dim_id)))
        labels.append(data.classes[ridx])

    z_mat = tape.concat(z_rows, axis=0)
    labels = np.asarray(labels)
    l_trip = triplet_loss(z_mat, labels, cfg.triplet_margin)
    logits = cls2.forward(z_mat)
    l_ce = tape.cross_entropy_logits(logits, labels)

    total = tape.scale(img_losses[0], 1.0)
    for t in img_losses[1:]:
        total = tape.add(total, t)
    total = tape.scale(total, 1.0 / len(img_losses))
    total = tape.add(total, tape.add(tape.scale(l_trip, lw["triplet"]),
                                     tape.scale(l_ce, lw["cla"])))
    tape.assert_finite(total, "finetune loss")
    tape.backward(total)

    if adam is not None:
        params = {f"encoder/{n}": p for n, p in enc.parameters().items()}
        for n, p in bundle.model.tex_net.parameters():
            params[f"tex/{n}"] = p
        for n, p in cls2.parameters():
            params[f"cls2/{n}"] = p
        adam_step(params, adam)

    acc = float((logits.data.argmax(axis=1) == labels).mean())
    return {"rgb": float(np.mean(l_rgb_vals)), "sil": float(np.mean(l_sil_vals)),
            "triplet": float(l_trip.data), "cla": float(l_ce.data),
            "total": float(total.data), "cls_acc": acc, "skipped": False}


def pk_batch(data: ImageData, cfg: TrainConfig, step: int) -> list[int]:
    """P identities x K images, drawn deterministically per step."""
    g = rng.stream(cfg.seed, "finetune", "batch", step)
    classes = sorted(data.by_class)
    p = min(cfg.ids_per_batch, len(classes))
    chosen = g.choice(classes, size=p, replace=False)
    out = []
    for c in chosen:
        pool = data.by_class[int(c)]
        k = min(cfg.images_per_id, len(pool))
        out.extend(int(i) for i in g.choice(pool, size=k, replace=False))
    return out


def evaluate_fit(bundle: ModelBundle, enc: ImageEncoder, data: ImageData,
                 rec_indices: list[int], cfg: TrainConfig, n_steps: int = 32):
    """Full renders with encoder codes: mean photometric L1 on the hit set
    and hard silhouette IoU per record."""
    march = MarchConfig(n_steps=n_steps, refine_steps=cfg.march.refine_steps,
                        box_half_extent=cfg.march.box_half_extent,
                        bound_margin=cfg.march.bound_margin)
    l1s, ious = [], []
    for ridx in rec_indices:
        rec = data.records[ridx]
        zi, zc, zt = enc.forward_np(rec.image)
        codes = LatentCodes(zi, zc, zt)
        res = render_image(bundle.model, codes, rec.theta, rec.camera, march,
                           bundle.skinning_model(data.rigs[rec.subject]),
                           corr_tol=cfg.broyden_tol, corr_max_iter=cfg.broyden_max_iter)
        if res.hit.any():
            l1s.append(float(np.abs(res.rgb[res.hit] - rec.image[res.hit]).mean()))
        else:
            l1s.append(float(np.abs(rec.image).mean()))
        hard = res.mask_soft >= 0.5
        gt = rec.mask > 0.5
        union = (hard | gt).sum()
        ious.append(float((hard & gt).sum() / union) if union else 1.0)
    return float(np.mean(l1s)), float(np.mean(ious)), l1s, ious


# ---------------------------------------------------------------------------
# stage drivers

def _metrics_writer(path, columns):
    exists = Path(path).exists()
    fh = open(path, "a", newline="")
    writer = csv.writer(fh)
    if not exists:
        writer.writerow(columns)
    return fh, writer


def run_pretrain(data_dir, out_dir, cfg: TrainConfig, steps: int | None = None,
                 resume: str | None = None) -> Path:
    """Stage-1 driver: periodic checkpoints + CSV metrics; resumable."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = PretrainData.load(data_dir)
    steps = steps if steps is not None else cfg.pretrain_steps

    if resume:
        bundle, codebook, _, _, adam, extra = load_bundle(resume)
        if codebook is None or adam is None:
            raise ValueError(f"{resume}: not a resumable stage-1 checkpoint")
        start = extra["step"]
        cfg = bundle.cfg
    else:
        bundle = ModelBundle(cfg, n_bones=data.rigs[data.meta[0]["subject"]].n_bones,
                             n_classes=data.n_classes, init_seed=cfg.seed)
        codebook = CodeBook(len(data.samples), cfg, seed=cfg.seed)
        adam = AdamState(lr=cfg.lr_pretrain)
        start = 0

    columns = ["step", "total", "id", "cloth", "tex", "cla", "skin", "skin_field",
               "no_root_frac", "wall_time"]
    fh, writer = _metrics_writer(out_dir / "pretrain_log.csv", columns)
    t0 = time.time()
    try:
        for step in range(start, steps):
            g = rng.stream(cfg.seed, "pretrain", "batch", step)
            batch = g.choice(len(data.samples),
                             size=min(cfg.batch_samples, len(data.samples)), replace=False)
            stats = pretrain_step(bundle, codebook, data, batch, cfg, step, adam=adam)
            if stats.get("skipped"):
                continue
            if step % cfg.log_every == 0 or step == steps - 1:
                writer.writerow([step] + [f"{stats[c]:.6f}" for c in columns[1:-1]]
                                + [f"{time.time() - t0:.3f}"])
                fh.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_bundle(out_dir / f"stage1_step{step + 1:06d}.ckpt", bundle,
                            codebook=codebook, adam=adam, step=step + 1, stage=1)
    finally:
        fh.close()
    final = out_dir / "stage1.ckpt"
    save_bundle(final, bundle, codebook=codebook, adam=adam, step=steps, stage=1)
    return final


def run_finetune(data_dir, out_dir, cfg: TrainConfig, stage1_ckpt,
                 steps: int | None = None, resume: str | None = None) -> Path:
    """Stage-2 driver: encoder + texture training with geometry frozen."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not Path(stage1_ckpt).exists():
        raise FileNotFoundError(f"stage-1 checkpoint required, none at {stage1_ckpt}")
    data = ImageData.load(data_dir)
    steps = steps if steps is not None else cfg.finetune_steps

    if resume:
        bundle, _, enc, cls2, adam, extra = load_bundle(resume)
        if enc is None or adam is None:
            raise ValueError(f"{resume}: not a resumable stage-2 checkpoint")
        start = extra["step"]
        cfg = bundle.cfg
    else:
        bundle, _, _, _, _, _ = load_bundle(stage1_ckpt)
        cfg_model = bundle.cfg.model
        merged = config_to_dict(cfg)
        merged["model"] = config_to_dict(bundle.cfg)["model"]
        cfg = config_from_dict(merged)
        bundle.cfg = cfg
        h, w = data.records[0].image.shape[:2]
        enc = ImageEncoder(cfg_model, channels=cfg.encoder_channels, height=h, width=w,
                           rng=rng.stream(cfg.seed, "init", "encoder"))
        cls2 = Mlp([cfg_model.dim_id, data.n_classes], out_act="none",
                   rng=rng.stream(cfg.seed, "init", "cls2"))
        adam = AdamState(lr=cfg.lr_finetune)
        start = 0

    bundle.freeze_geometry()
    columns = ["step", "total", "rgb", "sil", "triplet", "cla", "cls_acc", "wall_time"]
    fh, writer = _metrics_writer(out_dir / "finetune_log.csv", columns)
    t0 = time.time()
    try:
        for step in range(start, steps):
            batch = pk_batch(data, cfg, step)
            stats = finetune_step(bundle, enc, cls2, data, batch, cfg, step, adam=adam)
            if step % cfg.log_every == 0 or step == steps - 1:
                writer.writerow([step] + [f"{stats[c]:.6f}" for c in columns[1:-1]]
                                + [f"{time.time() - t0:.3f}"])
                fh.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_bundle(out_dir / f"stage2_step{step + 1:06d}.ckpt", bundle,
                            encoder=enc, cls2=cls2, adam=adam, step=step + 1, stage=2)
    finally:
        fh.close()
    final = out_dir / "stage2.ckpt"
    save_bundle(final, bundle, encoder=enc, cls2=cls2, adam=adam, step=steps, stage=2)
    return final
