import numpy as np
import pytest

from canobody import rng, tape
from canobody.config import TrainConfig
from canobody.encoder import ImageEncoder
from canobody.nn import AdamState, Mlp
from canobody.skinning import SkeletonRig
from canobody.synth import generate_image_set
from canobody.tape import Tensor
from canobody.train import (CodeBook, ImageData, ModelBundle, PretrainData, finetune_step,
                            load_bundle, pk_batch, pretrain_step, run_pretrain,
                            skinning_weight_loss, triplet_loss)

DESK = dict(seed=13, points_per_sample=192, pixels_per_image=128, ids_per_batch=2,
            images_per_id=2, batch_samples=4)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    generate_image_set(d, n_subjects=2, n_outfits=2, n_poses=2, seed=13, scan_points=3000)
    return d


@pytest.fixture(scope="module")
def trained(world):
    """A briefly pre-trained bundle shared by the stage-1 checks."""
    cfg = TrainConfig(**DESK)
    data = PretrainData.load(world)
    bundle = ModelBundle(cfg, n_bones=3, n_classes=data.n_classes, init_seed=13)
    codebook = CodeBook(len(data.samples), cfg, seed=13)
    adam = AdamState(lr=cfg.lr_pretrain)
    history = []
    for step in range(200):
        g = rng.stream(cfg.seed, "pretrain", "batch", step)
        batch = g.choice(len(data.samples), size=4, replace=False)
        stats = pretrain_step(bundle, codebook, data, batch, cfg, step, adam=adam)
        history.append(stats["total"])
    return cfg, data, bundle, codebook, history


def test_skinning_weight_loss_values():
    rig = SkeletonRig(parents=[-1, 0], rest_joints=[[0, -0.3, 0], [0, 0.3, 0]],
                      radii=[0.1, 0.1])
    from canobody.skinning import rig_weights
    targets = rig_weights(rig, rig.rest_joints)

    # a net that reproduces the targets exactly -> zero loss
    class Exact:
        def forward(self, x):
            logits = np.log(targets + 1e-12).astype(np.float32)
            return Tensor(logits)

    loss = skinning_weight_loss(Exact(), Tensor(np.zeros(2, np.float32)), rig)
    assert float(loss.data) < 1e-4


def test_uniform_net_vs_one_hot_targets_k2():
    # spec arithmetic case: ||(0.5,0.5)-(1,0)||_2 = sqrt(0.5) per joint
    w = Tensor(np.full((2, 2), 0.5, dtype=np.float32))
    target = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    gap = tape.ssum(tape.square(tape.sub(w, target)), axis=1)
    per_joint = tape.sqrt(gap)
    np.testing.assert_allclose(per_joint.data, np.sqrt(0.5), atol=1e-6)


def test_triplet_degenerate_cases():
    labels = np.array([0, 0, 1, 1])
    same = Tensor(np.ones((4, 3), dtype=np.float32), requires_grad=True)
    assert float(triplet_loss(same, labels, 0.3).data) == pytest.approx(0.3, abs=1e-5)

    apart = np.array([[10, 0, 0], [10.1, 0, 0], [-10, 0, 0], [-10.2, 0, 0]],
                     dtype=np.float32)
    loss = triplet_loss(Tensor(apart, requires_grad=True), labels, 0.3)
    assert float(loss.data) == 0.0


def test_triplet_matches_bruteforce_oracle():
    codes = np.array([[0.9, 0.1], [0.7, 0.4], [-0.8, 0.2], [-0.6, -0.5]],
                     dtype=np.float32)
    labels = np.array([0, 0, 1, 1])
    m = 0.3

    # brute force: normalize, all pos/neg pairs, batch-hard
    z = codes / np.linalg.norm(codes, axis=1, keepdims=True)
    d = np.linalg.norm(z[:, None] - z[None, :], axis=2)
    expect = []
    for i in range(4):
        pos = [d[i, j] for j in range(4) if labels[j] == labels[i] and j != i]
        neg = [d[i, j] for j in range(4) if labels[j] != labels[i]]
        expect.append(max(0.0, m + max(pos) - min(neg)))
    expect = float(np.mean(expect))

    got = float(triplet_loss(Tensor(codes, requires_grad=True), labels, m).data)
    assert got == pytest.approx(expect, abs=1e-5)


def test_triplet_no_valid_pairs_warns_and_zeroes():
    with pytest.warns(UserWarning):
        loss = triplet_loss(Tensor(np.ones((2, 3), np.float32)), np.array([0, 1]), 0.3)
    assert float(loss.data) == 0.0


def test_pretrain_loss_decreases(trained):
    _, _, _, _, history = trained
    first = np.mean(history[:20])
    last = np.mean(history[-20:])
    assert last < 0.5 * first


def test_codebook_isolation(trained):
    cfg, data, bundle, codebook, _ = trained
    # losses of sample 1 are untouched by perturbing sample 0's codes
    def sample_loss(idx):
        stats = pretrain_step(bundle, codebook, data, np.array([idx]), cfg, step=9999,
                              adam=None)
        return stats["total"]

    base = sample_loss(1)
    codebook.entries[0]["z_id"].data += 0.5
    codebook.entries[0]["z_cloth"].data -= 0.5
    try:
        assert sample_loss(1) == pytest.approx(base, abs=1e-7)
        assert sample_loss(0) != pytest.approx(base, abs=1e-7)
    finally:
        codebook.entries[0]["z_id"].data -= 0.5
        codebook.entries[0]["z_cloth"].data += 0.5


def test_pretrain_classifier_accuracy(trained):
    cfg, data, bundle, codebook, _ = trained
    correct = 0
    for i in range(len(data.samples)):
        logits = bundle.classifier.forward_np(codebook.entries[i]["z_id"].data[None, :])
        correct += int(logits.argmax() == data.classes[i])
    assert correct / len(data.samples) > 0.95


def test_stage2_freeze_and_gradient_flow(world, trained):
    cfg, _, bundle, _, _ = trained
    data = ImageData.load(world)
    for p in bundle.named_params().values():
        p.grad = None  # earlier optimizer-less steps may have left gradients
    bundle.freeze_geometry()
    enc = ImageEncoder(cfg.model, channels=cfg.encoder_channels,
                       rng=rng.stream(13, "init", "encoder"))
    cls2 = Mlp([cfg.model.dim_id, data.n_classes], out_act="none",
               rng=rng.stream(13, "init", "cls2"))
    adam = AdamState(lr=cfg.lr_finetune)

    blob_before = bundle.geometry_blob()
    stats = finetune_step(bundle, enc, cls2, data, pk_batch(data, cfg, 0), cfg, 0,
                          adam=None)  # keep grads for the audit
    # geometry params received no gradients at all
    for name, p in bundle.named_params().items():
        if name.startswith(("body/", "cloth/", "gen/", "skin/")):
            assert p.grad is None, name
    enc_grads = [p.grad for p in enc.parameters().values()]
    assert any(g is not None and np.abs(g).max() > 0 for g in enc_grads)

    # with the optimizer active the geometry stays bit-identical
    for step in range(2):
        finetune_step(bundle, enc, cls2, data, pk_batch(data, cfg, step + 1), cfg,
                      step + 1, adam=adam)
    assert bundle.geometry_blob() == blob_before
    assert all(k >= 0 for k in stats.values() if isinstance(k, float))


def test_run_pretrain_resume_matches_uninterrupted(world, tmp_path):
    cfg = TrainConfig(**DESK)
    cfg.checkpoint_every = 5
    cfg.log_every = 1

    out_a = tmp_path / "a"
    ck_a = run_pretrain(world, out_a, cfg, steps=10)
    out_b = tmp_path / "b"
    run_pretrain(world, out_b, cfg, steps=5)
    # drop the final-only checkpoint, resume from the step-5 one
    ck_b = run_pretrain(world, out_b, cfg, steps=10,
                        resume=out_b / "stage1_step000005.ckpt")

    ta, _ = __import__("canobody.checkpoint", fromlist=["load_checkpoint"]).load_checkpoint(ck_a)
    tb, _ = __import__("canobody.checkpoint", fromlist=["load_checkpoint"]).load_checkpoint(ck_b)
    for name in ta:
        assert ta[name].tobytes() == tb[name].tobytes(), name


def test_metrics_log_has_all_columns(world, tmp_path):
    cfg = TrainConfig(**DESK)
    cfg.log_every = 2
    out = tmp_path / "logs"
    run_pretrain(world, out, cfg, steps=4)
    header = (out / "pretrain_log.csv").read_text().splitlines()[0].split(",")
    for col in ("step", "total", "id", "cloth", "tex", "cla", "skin", "wall_time"):
        assert col in header


def test_bundle_checkpoint_roundtrip(trained, tmp_path):
    cfg, data, bundle, codebook, _ = trained
    from canobody.train import save_bundle
    path = tmp_path / "b.ckpt"
    save_bundle(path, bundle, codebook=codebook, step=3, stage=1)
    back, cb, enc, cls2, adam, extra = load_bundle(path)
    assert enc is None and cls2 is None and adam is None
    assert extra["step"] == 3 and len(cb) == len(codebook)
    for name, p in bundle.named_params().items():
        assert np.array_equal(back.named_params()[name].data, p.data), name


def test_finetune_requires_stage1_checkpoint(world, tmp_path):
    from canobody.train import run_finetune
    cfg = TrainConfig(**DESK)
    with pytest.raises(FileNotFoundError):
        run_finetune(world, tmp_path / "out", cfg, tmp_path / "missing.ckpt", steps=1)
