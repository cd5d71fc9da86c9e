import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resflow.errors import DegenerateInput, EmptyCloud, IoError, ParseError
from resflow.geometry import (PointCloud, RigidTransform, icp_with_history, kabsch, load_pointcloud,
                              nearest_neighbors, normalize, rigid_icp, save_pointcloud)


def rot_z(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])


# --- PointCloud -------------------------------------------------------------

def test_pointcloud_rejects_duplicates():
    with pytest.raises(DegenerateInput):
        PointCloud([[0, 0, 0], [0, 0, 0]])


def test_pointcloud_rejects_empty_and_nonfinite():
    with pytest.raises(EmptyCloud):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(DegenerateInput):
        PointCloud([[0, 0, np.nan]])


def test_pointcloud_face_and_label_checks():
    with pytest.raises(ParseError):
        PointCloud(np.eye(3), faces=[[0, 1, 3]])
    with pytest.raises(ValueError):
        PointCloud(np.eye(3), labels=[0, 1])


# --- I/O --------------------------------------------------------------------

def test_load_obj(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    c = load_pointcloud(p)
    assert c.n == 3
    assert c.faces.tolist() == [[0, 1, 2]]


def test_load_obj_slash_and_quad(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n")
    c = load_pointcloud(p)
    assert c.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_load_xyz(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 0 0")
    c = load_pointcloud(p)
    assert c.points.tolist() == [[0, 0, 0], [1, 0, 0]]
    assert c.faces is None


def test_obj_face_out_of_range(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(ParseError):
        load_pointcloud(p)


@pytest.mark.parametrize("text", ["v 0 0\n", "v a b c\n", "v 0 0 0\nf 1 x 2\n"])
def test_obj_malformed(tmp_path, text):
    p = tmp_path / "bad.obj"
    p.write_text(text)
    with pytest.raises(ParseError):
        load_pointcloud(p)


def test_empty_file(tmp_path):
    p = tmp_path / "e.xyz"
    p.write_text("\n")
    with pytest.raises(EmptyCloud):
        load_pointcloud(p)


def test_duplicates_rejected_or_merged(tmp_path):
    p = tmp_path / "dup.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 0 0\nv 0 1 0\nf 1 2 4\nf 3 2 4\nf 1 3 2\n")
    with pytest.raises(DegenerateInput):
        load_pointcloud(p)
    c = load_pointcloud(p, dedup=True)
    assert c.points.tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    # third face collapses (1 and 3 are the same vertex)
    assert c.faces.tolist() == [[0, 1, 2], [0, 1, 2]]


def test_ply_ascii_and_binary(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nproperty float nx\nelement face 1\n"
                 "property list uchar int vertex_indices\nend_header\n"
                 "0 0 0 9\n1 0 0 9\n0 1 0 9\n3 0 1 2\n")
    c = load_pointcloud(p)
    assert c.n == 3 and c.faces.tolist() == [[0, 1, 2]]
    b = tmp_path / "b.ply"
    b.write_text("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(ParseError):
        load_pointcloud(b)


def test_unknown_format(tmp_path):
    with pytest.raises(ParseError):
        load_pointcloud(tmp_path / "x.stl")


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_pointcloud(tmp_path / "nope.obj")


@pytest.mark.parametrize("fmt", ["obj", "ply", "xyz"])
def test_round_trip(tmp_path, fmt, rng):
    pts = rng.normal(size=(20, 3)) * 123.456
    faces = np.array([[0, 1, 2], [3, 4, 5], [19, 18, 17]])
    c = PointCloud(pts, faces if fmt != "xyz" else None)
    path = tmp_path / f"c.{fmt}"
    save_pointcloud(c, path)
    back = load_pointcloud(path)
    np.testing.assert_allclose(back.points, pts, rtol=1e-6)
    assert np.array_equal(back.points, pts)  # 17 significant digits round-trip exactly
    if fmt != "xyz":
        assert back.faces.tolist() == faces.tolist()


def test_save_two_points(tmp_path):
    c = PointCloud([[0, 0, 0], [1, 0, 0]])
    save_pointcloud(c, tmp_path / "two.xyz")
    assert np.array_equal(load_pointcloud(tmp_path / "two.xyz").points, c.points)


def test_save_unwritable(tmp_path):
    c = PointCloud([[0, 0, 0], [1, 0, 0]])
    with pytest.raises(IoError):
        save_pointcloud(c, tmp_path / "missing_dir" / "x.obj")


# --- normalization ----------------------------------------------------------

def test_normalize_fixed_point():
    pts = np.array([[-1, -1, -1], [1, 1, 1]], dtype=float) / (2 * math.sqrt(3))
    c = PointCloud(pts)
    s, t, rec = normalize(c, c)
    np.testing.assert_allclose(s.points, pts, atol=1e-12)
    np.testing.assert_allclose(t.points, pts, atol=1e-12)


def test_normalize_centers():
    base = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    s, t, rec = normalize(PointCloud(base + 5), PointCloud(base + 5))
    np.testing.assert_allclose(np.vstack([s.points, t.points]).mean(axis=0), 0, atol=1e-15)


def test_normalize_cube():
    cube = np.array([[x, y, z] for x in (0, 2) for y in (0, 2) for z in (0, 2)], dtype=float)
    s, _, rec = normalize(PointCloud(cube), PointCloud(cube))
    assert rec.scale == pytest.approx(2 * math.sqrt(3))
    side = s.points.max(axis=0) - s.points.min(axis=0)
    np.testing.assert_allclose(side, 1 / math.sqrt(3), rtol=1e-12)


def test_normalize_degenerate():
    c = PointCloud([[1, 1, 1]])
    with pytest.raises(DegenerateInput):
        normalize(c, c)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_normalize_inverse_identity(seed, scale, shift):
    r = np.random.default_rng(seed)
    a = PointCloud(r.normal(size=(10, 3)) * scale + shift)
    b = PointCloud(r.normal(size=(7, 3)) * scale - shift)
    s, t, rec = normalize(a, b)
    tol = 1e-9 * max(1.0, abs(shift) + scale)
    np.testing.assert_allclose(rec.invert(s.points), a.points, atol=tol)
    np.testing.assert_allclose(rec.invert(t.points), b.points, atol=tol)


# --- nearest neighbours, Kabsch, ICP ----------------------------------------

def test_nearest_neighbors_ties_lowest_index():
    y = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    idx, d = nearest_neighbors(np.zeros((1, 3)), y)
    assert idx[0] == 0 and d[0] == 1.0


def test_kabsch_reflection_guard(rng):
    a = rng.normal(size=(10, 3))
    mirror = a * np.array([1, 1, -1])
    T = kabsch(a, mirror)
    assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-12)


def test_kabsch_degenerate():
    a = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    with pytest.raises(DegenerateInput):
        kabsch(a, a)


def well_separated(rng, n=12):
    # grid spacing 10, so a shift of |(1,2,3)| < 5 keeps nearest matches correct
    g = np.array([[x, y, z] for x in range(3) for y in range(2) for z in range(2)], dtype=float) * 10
    return g[:n] + rng.uniform(-0.5, 0.5, size=(n, 3))


def test_icp_identity(rng):
    a = well_separated(rng)
    T = rigid_icp(a, a)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.translation, 0, atol=1e-12)


def test_icp_translation(rng):
    a = well_separated(rng)
    T, errs = icp_with_history(a, a + [1, 2, 3])
    np.testing.assert_allclose(T.translation, [1, 2, 3], atol=1e-12)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
    assert errs[1] < 1e-20  # exact after the first Kabsch step


def test_icp_rotation(rng):
    a = well_separated(rng) - 10
    R = rot_z(10)
    T = rigid_icp(a, a @ R.T)
    np.testing.assert_allclose(T.rotation, R, atol=1e-6)


def test_icp_collinear():
    a = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2.0]])
    with pytest.raises(DegenerateInput):
        rigid_icp(a, a + 0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 40), st.floats(0, 0.5))
def test_icp_monotone_and_rigid(seed, deg, shift):
    r = np.random.default_rng(seed)
    a = r.normal(size=(40, 3))
    b = (a + r.normal(scale=0.05, size=a.shape)) @ rot_z(deg).T + shift
    T, errs = icp_with_history(a, b, max_iters=30)
    assert all(e2 <= e1 * (1 + 1e-12) + 1e-15 for e1, e2 in zip(errs, errs[1:]))
    R = T.rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_rigid_transform_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1, 1, -1.0]), np.zeros(3))
    T = RigidTransform(rot_z(30), [1, 2, 3])
    x = np.array([[0.3, -0.2, 5.0]])
    np.testing.assert_allclose(T.inverse().apply(T.apply(x)), x, atol=1e-14)
