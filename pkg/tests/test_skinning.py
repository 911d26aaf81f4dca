import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canobody import rng, tape
from canobody.gradcheck import check_gradients
from canobody.nn import Mlp
from canobody.skinning import (SkeletonRig, canonical_correspondence, deform_points,
                               deform_tensor, forward_kinematics, make_weight_fn,
                               query_weights_np, rig_weights, rodrigues, validate_pose)
from canobody.tape import Tensor


def chain_rig(k=3):
    joints = np.stack([np.zeros(k), np.linspace(-0.5, 0.5, k), np.zeros(k)], axis=1)
    return SkeletonRig(parents=np.arange(k) - 1, rest_joints=joints,
                       radii=np.full(k, 0.15))


def test_zero_pose_gives_identity_bones():
    rig = chain_rig()
    bones = forward_kinematics(rig, np.zeros((3, 3)))
    np.testing.assert_allclose(bones, np.tile(np.eye(4), (3, 1, 1)), atol=1e-12)


def test_single_bone_rotation_about_own_joint():
    rig = SkeletonRig(parents=[-1], rest_joints=[[0.2, -0.1, 0.4]], radii=[0.1])
    theta = np.array([[0.0, 0.0, np.pi / 2]])
    b = forward_kinematics(rig, theta)[0]
    j = rig.rest_joints[0]
    moved = b[:3, :3] @ (j + np.array([1.0, 0.0, 0.0])) + b[:3, 3]
    np.testing.assert_allclose(moved, j + np.array([0.0, 1.0, 0.0]), atol=1e-12)
    np.testing.assert_allclose(b[:3, :3] @ j + b[:3, 3], j, atol=1e-12)


def test_two_bone_chain_matches_hand_composition():
    rig = chain_rig(2)
    theta = np.zeros((2, 3))
    theta[0, 2] = 0.4
    theta[1, 0] = -0.7
    bones = forward_kinematics(rig, theta)

    # independent composition with plain matrix algebra
    def trans(v):
        m = np.eye(4)
        m[:3, 3] = v
        return m

    def rot4(aa):
        m = np.eye(4)
        m[:3, :3] = rodrigues(np.asarray(aa)[None])[0]
        return m

    j0, j1 = rig.rest_joints
    world0 = trans(j0) @ rot4(theta[0])
    world1 = world0 @ trans(j1 - j0) @ rot4(theta[1])
    np.testing.assert_allclose(bones[0], world0 @ trans(-j0), atol=1e-12)
    np.testing.assert_allclose(bones[1], world1 @ trans(-j1), atol=1e-12)


def test_rig_json_roundtrip(tmp_path):
    rig = chain_rig(4)
    path = tmp_path / "rig.json"
    rig.save(path)
    back = SkeletonRig.load(path)
    np.testing.assert_array_equal(back.parents, rig.parents)
    np.testing.assert_allclose(back.rest_joints, rig.rest_joints)
    np.testing.assert_allclose(back.radii, rig.radii)


def test_rig_rejects_cycles_and_bad_root():
    with pytest.raises(ValueError):
        SkeletonRig(parents=[1, 0], rest_joints=np.zeros((2, 3)), radii=np.ones(2))
    with pytest.raises(ValueError):
        SkeletonRig(parents=[-1, 2, 1], rest_joints=np.zeros((3, 3)), radii=np.ones(3))


def test_pose_validation():
    rig = chain_rig()
    with pytest.raises(ValueError):
        validate_pose(rig, np.zeros((2, 3)))
    too_big = np.zeros((3, 3))
    too_big[1, 0] = 3.5
    with pytest.raises(ValueError):
        validate_pose(rig, too_big)


def test_zero_weight_net_gives_uniform_weights():
    net = Mlp([6 + 3, 8, 4], hidden_act="softplus", out_act="none")
    w = query_weights_np(net, np.ones(6, dtype=np.float32),
                         np.random.default_rng(0).uniform(-1, 1, (10, 3)))
    np.testing.assert_allclose(w, 0.25, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_learned_weights_form_probability_vector(seed):
    g = rng.stream(seed, "wsimplex")
    net = Mlp([4 + 3, 8, 3], hidden_act="softplus", out_act="none", rng=g)
    w = query_weights_np(net, g.normal(size=4).astype(np.float32),
                         g.uniform(-1, 1, (6, 3)))
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_deform_zero_pose_is_identity():
    rig = chain_rig()
    bones = forward_kinematics(rig, np.zeros((3, 3)))
    x = rng.stream(0, "dz").uniform(-0.8, 0.8, (20, 3))
    out = deform_points(lambda p: rig_weights(rig, p), bones, x)
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_deform_single_bone_translation():
    bones = np.eye(4)[None].copy()
    bones[0, :3, 3] = [0.1, -0.2, 0.3]
    x = np.array([[0.0, 0.5, 0.0]])
    out = deform_points(lambda p: np.ones((len(p), 1)), bones, x)
    np.testing.assert_allclose(out, x + [0.1, -0.2, 0.3], atol=1e-12)


def test_deform_opposite_translations_cancel():
    bones = np.tile(np.eye(4), (2, 1, 1))
    bones[0, :3, 3] = [0.2, 0.0, 0.0]
    bones[1, :3, 3] = [-0.2, 0.0, 0.0]
    x = np.array([[0.3, 0.1, -0.4]])
    out = deform_points(lambda p: np.full((len(p), 2), 0.5), bones, x)
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_correspondence_identity_pose_short_circuit():
    rig = chain_rig()
    bones = np.tile(np.eye(4), (3, 1, 1))
    x = rng.stream(1, "ci").uniform(-1, 1, (30, 3))
    xh, ok = canonical_correspondence(lambda p: rig_weights(rig, p), bones, x)
    assert ok.all()
    np.testing.assert_array_equal(xh, x)


def test_correspondence_single_bone_translation():
    bones = np.eye(4)[None].copy()
    bones[0, :3, 3] = [0.05, 0.1, -0.07]
    x_prime = np.array([[0.3, 0.2, 0.1], [-0.4, 0.0, 0.2]])
    xh, ok = canonical_correspondence(lambda p: np.ones((len(p), 1)), bones, x_prime)
    assert ok.all()
    np.testing.assert_allclose(xh, x_prime - np.array([0.05, 0.1, -0.07]), atol=1e-6)


def test_roundtrip_on_random_poses():
    rig = chain_rig()
    g = rng.stream(2, "rt")
    wfn = lambda p: rig_weights(rig, p)
    good = total = 0
    for _ in range(5):
        axes = g.normal(size=(3, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        theta = axes * g.uniform(0, 0.8, size=(3, 1))
        bones = forward_kinematics(rig, theta)
        x = g.uniform(-0.8, 0.8, (400, 3))
        xp = deform_points(wfn, bones, x)
        xh, ok = canonical_correspondence(wfn, bones, xp)
        resid = np.linalg.norm(deform_points(wfn, bones, xh) - xp, axis=1)
        good += int((ok & (resid < 1e-4) & (np.linalg.norm(xh - x, axis=1) < 1e-3)).sum())
        total += 400
    assert good / total >= 0.99


def test_deform_tensor_gradients():
    g = rng.stream(3, "dgrad")
    rig = chain_rig()
    theta = np.zeros((3, 3))
    theta[1, 2] = 0.5
    bones = forward_kinematics(rig, theta)
    net = Mlp([5 + 3, 8, 3], hidden_act="softplus", out_act="none", rng=g)

    def loss(z_id, x):
        return tape.ssum(tape.square(deform_tensor(net, z_id, x, bones)))

    worst = check_gradients(loss, [g.normal(size=5), g.uniform(-0.5, 0.5, (4, 3))])
    assert worst < 1e-4


def test_taped_weights_match_fast_closure():
    g = rng.stream(6, "wfast")
    net = Mlp([5 + 3, 8, 8, 3], hidden_act="softplus", out_act="none", rng=g)
    z = g.normal(size=5).astype(np.float32)
    x = g.uniform(-1, 1, (15, 3))
    from canobody.skinning import query_weights
    with tape.no_grad():
        taped = query_weights(net, Tensor(z), Tensor(x.astype(np.float32))).data
    fast = make_weight_fn(net, z)(x)
    np.testing.assert_allclose(taped, fast, atol=2e-6)
