import numpy as np
import pytest

from canobody.mesh import TriMesh, extract_mesh, is_watertight, read_obj, write_obj


def sphere_occ(radius=0.5, sharpness=40.0):
    def occ(pts):
        r = np.linalg.norm(pts, axis=1)
        return 1.0 / (1.0 + np.exp(-sharpness * (radius - r)))
    return occ


def test_sphere_level_set_radius():
    mesh = extract_mesh(sphere_occ(), tau=0.5, grid_res=48)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(radii - 0.5).mean() < 2.0 / 48
    mesh.validate()


def test_sphere_watertight():
    mesh = extract_mesh(sphere_occ(), tau=0.5, grid_res=32)
    assert is_watertight(mesh)


def test_constant_field_gives_empty_mesh():
    mesh = extract_mesh(lambda p: np.full(len(p), 0.9), tau=0.5, grid_res=8)
    assert mesh.is_empty()
    mesh = extract_mesh(lambda p: np.full(len(p), 0.1), tau=0.5, grid_res=8)
    assert mesh.is_empty()


def test_grid_res_guard():
    with pytest.raises(ValueError):
        extract_mesh(sphere_occ(), tau=0.5, grid_res=4)


def test_validate_rejects_bad_indices():
    mesh = TriMesh(vertices=np.zeros((2, 3)), triangles=np.array([[0, 1, 5]]))
    with pytest.raises(ValueError):
        mesh.validate()


def test_obj_roundtrip_and_format(tmp_path):
    mesh = extract_mesh(sphere_occ(), tau=0.5, grid_res=16)
    path = tmp_path / "m.obj"
    write_obj(path, mesh)
    lines = path.read_text().splitlines()
    v_lines = [l for l in lines if l.startswith("v ")]
    f_lines = [l for l in lines if l.startswith("f ")]
    assert len(v_lines) == len(mesh.vertices) and len(f_lines) == len(mesh.triangles)
    # six decimal places on each coordinate
    assert all(len(tok.split(".")[1]) == 6 for tok in v_lines[0].split()[1:])
    back = read_obj(path)
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
