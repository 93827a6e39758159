import numpy as np
import pytest

from tetta.core.exceptions import MeshParseError
from tetta.models.domain import MaterialSample
from tetta.services.fixtures import box_mesh
from tetta.services.mesh_io import format_mtl, load_mesh, parse_obj, save_mesh

TRIANGLE = """\
# triángulo
v 0 0 0
v 1 0 0
v 0 1 0
f 1 2 3
"""


def test_parse_minimal_triangle():
    mesh = parse_obj(TRIANGLE)
    assert mesh.num_vertices == 3 and mesh.num_faces == 1
    assert mesh.faces_np().tolist() == [[0, 1, 2]]
    assert mesh.attributes is None


def test_round_trip_with_attributes(tmp_path):
    mesh = box_mesh(divisions=2)
    rng = np.random.default_rng(0)
    packed = rng.uniform(0.0, 1.0, (mesh.num_vertices, 8))
    mesh = mesh.with_attributes(MaterialSample.from_array(packed))

    path = save_mesh(mesh, tmp_path / "box.obj")
    assert (tmp_path / "box.mtl").exists()
    loaded = load_mesh(path)
    assert np.array_equal(loaded.faces_np(), mesh.faces_np())
    assert np.allclose(loaded.vertices_np(), mesh.vertices_np(), atol=1e-8)
    assert np.allclose(loaded.attributes.to_array(), packed, atol=1e-8)


def test_negative_indices_and_texture_tokens():
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf -3/1 -2/1 -1/1\n"
    assert parse_obj(text).faces_np().tolist() == [[0, 1, 2]]


def test_quad_is_fan_triangulated():
    text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"
    assert parse_obj(text).faces_np().tolist() == [[0, 1, 2], [0, 2, 3]]


@pytest.mark.parametrize(
    "text,line",
    [
        ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n", 4),
        ("v 0 0 0\nv 1 0\n", 2),
        ("v 0 0 0\nv 1 0 0\nf 1 2\n", 3),
        ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n", 4),
        ("v a b c\n", 1),
    ],
)
def test_malformed_obj_reports_line(text, line):
    with pytest.raises(MeshParseError) as info:
        parse_obj(text, "malla.obj")
    assert info.value.line == line
    assert f"malla.obj:{line}" in str(info.value)


def test_partial_pbr_rows_are_rejected():
    text = TRIANGLE + "#pbr 1 0.5 0.5 0.5 0.5 0 0 0 1\n"
    with pytest.raises(MeshParseError):
        parse_obj(text)


def test_load_mesh_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mesh(tmp_path / "falta.obj")
    ply = tmp_path / "malla.ply"
    ply.write_text("ply\n")
    with pytest.raises(MeshParseError):
        load_mesh(ply)


def test_mtl_defaults_without_attributes():
    mtl = format_mtl(parse_obj(TRIANGLE))
    assert "Kd 0.5 0.5 0.5" in mtl
    assert "Pm 0" in mtl
