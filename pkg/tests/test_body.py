import numpy as np
import pytest

from canobody import rng, tape
from canobody.body import ImplicitBodyModel, LatentCodes
from canobody.config import ModelConfig
from canobody.gradcheck import check_gradients
from canobody.tape import Tensor

TINY = ModelConfig(dim_id=6, dim_cloth=4, dim_tex=4, dim_feat=3, vol_res=4, vol_channels=2)


def tiny_model(seed=0):
    return ImplicitBodyModel(TINY, hidden_body=8, hidden_cloth=8, hidden_tex=8,
                             hidden_gen=5, rng=rng.stream(seed, "tinybody"))


def test_generator_zero_params_gives_zero_volume():
    m = ImplicitBodyModel(TINY)
    vol = m.generate_volume_np(np.ones(TINY.dim_id, dtype=np.float32))
    assert not vol.any()


def test_volume_determinism_and_code_sensitivity():
    m = tiny_model()
    g = rng.stream(1, "codes")
    z1 = g.normal(size=TINY.dim_id).astype(np.float32)
    z2 = g.normal(size=TINY.dim_id).astype(np.float32)
    v1 = m.generate_volume_np(z1)
    assert np.array_equal(v1, m.generate_volume_np(z1))
    assert np.abs(v1 - m.generate_volume_np(z2)).max() > 0


def test_volume_dim_mismatch_raises():
    m = tiny_model()
    with pytest.raises(ValueError):
        m.generate_volume_np(np.zeros(3, dtype=np.float32))


def test_query_outputs_in_open_interval():
    m = tiny_model()
    g = rng.stream(2, "queries")
    z = LatentCodes(g.normal(size=TINY.dim_id).astype(np.float32),
                    g.normal(size=TINY.dim_cloth).astype(np.float32),
                    g.normal(size=TINY.dim_tex).astype(np.float32))
    z.validate(TINY)
    x = g.uniform(-1, 1, size=(50, 3))
    vol = m.generate_volume_np(z.z_id)
    o1, f = m.query_identity_np(vol, x)
    assert np.all((o1 > 0) & (o1 < 1)) and np.all(np.isfinite(f))
    o2 = m.query_clothed_np(z.z_cloth, f, x)
    assert np.all((o2 > 0) & (o2 < 1))
    c = m.query_texture_np(z.z_tex, z.z_cloth, x)
    assert c.shape == (50, 3) and np.all((c >= 0) & (c <= 1))


def test_identity_continuity_in_position():
    m = tiny_model()
    g = rng.stream(3, "cont")
    z = g.normal(size=TINY.dim_id).astype(np.float32)
    vol = m.generate_volume_np(z)
    x = g.uniform(-0.9, 0.9, size=(100, 3))
    o_a, _ = m.query_identity_np(vol, x)
    o_b, _ = m.query_identity_np(vol, x + 1e-5)
    assert np.abs(o_a - o_b).max() < 1e-3


def test_untrained_queries_are_constant_in_space_only_via_bias():
    # zero-parameter nets: occupancy equals sigmoid(bias) everywhere
    m = ImplicitBodyModel(TINY)
    vol = m.generate_volume_np(np.zeros(TINY.dim_id, dtype=np.float32))
    o1, f = m.query_identity_np(vol, np.array([[0.1, 0.2, -0.3], [0.9, -0.9, 0.0]]))
    assert o1[0] == pytest.approx(o1[1])
    assert f[0, 0] == pytest.approx(f[1, 0])


def test_gradients_of_all_query_paths():
    m = tiny_model()
    g = rng.stream(4, "grads")
    x0 = g.uniform(-0.7, 0.7, size=(4, 3))
    z_id0 = g.normal(size=TINY.dim_id)
    z_cloth0 = g.normal(size=TINY.dim_cloth)
    z_tex0 = g.normal(size=TINY.dim_tex)

    def o2_loss(z_id, z_cloth, x):
        vol = m.generate_volume(z_id)
        o1, f = m.query_identity(z_id, x, volume=vol)
        o2 = m.query_clothed(z_cloth, f, x)
        return tape.ssum(o2)

    worst = check_gradients(o2_loss, [z_id0, z_cloth0, x0])
    assert worst < 1e-4

    def tex_loss(z_tex, z_cloth, x):
        return tape.ssum(tape.square(m.query_texture(z_tex, z_cloth, x)))

    worst = check_gradients(tex_loss, [z_tex0, z_cloth0, x0])
    assert worst < 1e-4


def test_taped_and_numpy_paths_agree():
    m = tiny_model()
    g = rng.stream(5, "agree")
    z_id = g.normal(size=TINY.dim_id).astype(np.float32)
    z_cloth = g.normal(size=TINY.dim_cloth).astype(np.float32)
    x = g.uniform(-0.8, 0.8, size=(20, 3)).astype(np.float32)
    with tape.no_grad():
        vol_t = m.generate_volume(Tensor(z_id))
        o1_t, f_t = m.query_identity(Tensor(z_id), Tensor(x), volume=vol_t)
        o2_t = m.query_clothed(Tensor(z_cloth), f_t, Tensor(x))
    vol = m.generate_volume_np(z_id)
    o1, f = m.query_identity_np(vol, x)
    o2 = m.query_clothed_np(z_cloth, f, x)
    np.testing.assert_allclose(o1_t.data[:, 0], o1, atol=2e-6)
    np.testing.assert_allclose(o2_t.data[:, 0], o2, atol=2e-6)


def test_latent_code_validation():
    z = LatentCodes(np.zeros(3, dtype=np.float32), np.zeros(TINY.dim_cloth, np.float32),
                    np.zeros(TINY.dim_tex, np.float32))
    with pytest.raises(ValueError):
        z.validate(TINY)
    bad = LatentCodes(np.full(TINY.dim_id, np.nan, np.float32),
                      np.zeros(TINY.dim_cloth, np.float32),
                      np.zeros(TINY.dim_tex, np.float32))
    with pytest.raises(ValueError):
        bad.validate(TINY)


def test_model_config_guards():
    with pytest.raises(ValueError):
        ModelConfig(tau=1.5)
    with pytest.raises(ValueError):
        ModelConfig(dim_id=0)
    full = ModelConfig.full_scale()
    assert (full.dim_id, full.dim_cloth, full.dim_tex, full.dim_feat) == (4096, 512, 512, 256)
