"""Dry run of the stage-2 critical path at acceptance scale (throwaway)."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from canobody import rng
from canobody.config import TrainConfig
from canobody.encoder import ImageEncoder
from canobody.reid import evaluate_features, extract_features
from canobody.synth import generate_image_set
from canobody.train import (ImageData, PretrainData, evaluate_fit, load_bundle,
                            run_finetune, run_pretrain)

world = "/tmp/world20"
t0 = time.time()
generate_image_set(world, n_subjects=20, n_outfits=2, n_poses=8, seed=23,
                   scan_points=20000)
print(f"synth: {time.time()-t0:.0f}s", flush=True)

cfg = TrainConfig(seed=23, points_per_sample=512, batch_samples=8)
cfg.checkpoint_every = 0
t0 = time.time()
ck1 = run_pretrain(world, "/tmp/s1big", cfg, steps=2500)
print(f"stage1 2500 steps: {time.time()-t0:.0f}s", flush=True)

cfg2 = TrainConfig(seed=101, pixels_per_image=256, ids_per_batch=4, images_per_id=2)
cfg2.checkpoint_every = 0
data = ImageData.load(world)
eval_set = [data.by_class[c][0] for c in sorted(data.by_class)]

bundle0, _, _, _, _, _ = load_bundle(ck1)
bundle0.freeze_geometry()
enc0 = ImageEncoder(cfg2.model, channels=cfg2.encoder_channels,
                    rng=rng.stream(101, "init", "encoder"))
t0 = time.time()
l1_before, iou_before, _, _ = evaluate_fit(bundle0, enc0, data, eval_set, cfg2)
print(f"baseline eval ({len(eval_set)} imgs): {time.time()-t0:.0f}s "
      f"L1={l1_before:.4f} IoU={iou_before:.3f}", flush=True)

t0 = time.time()
ck2 = run_finetune(world, "/tmp/s2big", cfg2, ck1, steps=400)
print(f"stage2 400 steps: {time.time()-t0:.0f}s", flush=True)

bundle, _, enc, _, _, _ = load_bundle(ck2)
t0 = time.time()
l1_after, iou_after, l1s, ious = evaluate_fit(bundle, enc, data, eval_set, cfg2)
print(f"after eval: {time.time()-t0:.0f}s L1={l1_after:.4f} IoU={iou_after:.3f} "
      f"drop={(1 - l1_after / l1_before):.0%}", flush=True)
print("per-record IoU:", [round(v, 2) for v in ious], flush=True)

for head in ("id", "tex"):
    feats = extract_features(enc, world, head=head)
    rep = evaluate_features(feats, protocol="cloth-change")
    print(f"cloth-change Rank1({head}) = {rep.cmc[0]:.3f} mAP={rep.map_score:.3f} "
          f"n={rep.n_queries}", flush=True)
