import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from plyfile import PlyData, PlyElement

from ndtscene import io
from ndtscene.errors import FormatError, VersionMismatchError
from ndtscene.nn.params import ParamStore


def _ascii_ply(rows, props=("x", "y", "z"), types=None):
    types = types or ["float"] * len(props)
    header = ["ply", "format ascii 1.0", f"element vertex {len(rows)}"]
    header += [f"property {t} {p}" for t, p in zip(types, props)]
    header.append("end_header")
    body = [" ".join(str(v) for v in r) for r in rows]
    return "\n".join(header + body) + "\n"


def _plyfile_write(path, positions, colors=None, text=False):
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    data = np.empty(len(positions), dtype=fields)
    for a, name in enumerate("xyz"):
        data[name] = positions[:, a]
    if colors is not None:
        for a, name in enumerate(("red", "green", "blue")):
            data[name] = colors[:, a]
    PlyData([PlyElement.describe(data, "vertex")], text=text, byte_order="<").write(str(path))


# ---------------------------------------------------------------- PLY

def test_single_vertex_ascii(tmp_path):
    path = tmp_path / "one.ply"
    path.write_text(_ascii_ply([(1.0, 2.0, 3.0)]))
    cloud = io.load_point_cloud(path)
    assert cloud.count == 1
    np.testing.assert_array_equal(cloud.positions, [[1.0, 2.0, 3.0]])
    assert cloud.colors is None


def test_uint8_colors_scaled(tmp_path):
    path = tmp_path / "red.ply"
    path.write_text(_ascii_ply([(0, 0, 0, 255, 0, 0)], ("x", "y", "z", "red", "green", "blue"),
                               ["float"] * 3 + ["uchar"] * 3))
    np.testing.assert_array_equal(io.load_point_cloud(path).colors, [[1.0, 0.0, 0.0]])


@pytest.mark.parametrize("text", [True, False])
def test_unit_cube_written_by_independent_writer(tmp_path, text):
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    path = tmp_path / "cube.ply"
    _plyfile_write(path, corners, text=text)
    cloud = io.load_point_cloud(path)
    assert cloud.count == 8
    np.testing.assert_array_equal(cloud.positions.min(axis=0), [0, 0, 0])
    np.testing.assert_array_equal(cloud.positions.max(axis=0), [1, 1, 1])
    np.testing.assert_array_equal(cloud.positions, corners)


@pytest.mark.parametrize("binary", [True, False])
def test_our_writer_read_by_independent_reader(tmp_path, binary):
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(50, 3))
    col = rng.integers(0, 256, (50, 3)) / 255.0
    path = tmp_path / "c.ply"
    io.write_point_cloud(io.PointCloud(pos, col), path, binary=binary)
    v = PlyData.read(str(path))["vertex"]
    np.testing.assert_array_equal(np.stack([v["x"], v["y"], v["z"]], axis=1), pos)
    np.testing.assert_array_equal(np.stack([v["red"], v["green"], v["blue"]], axis=1),
                                  np.round(col * 255))


def test_skips_elements_before_vertex(tmp_path):
    text = ("ply\nformat ascii 1.0\nelement camera 1\nproperty float a\n"
            "element vertex 2\nproperty double x\nproperty double y\nproperty double z\n"
            "end_header\n7\n1 2 3\n4 5 6\n")
    path = tmp_path / "x.ply"
    path.write_text(text)
    np.testing.assert_array_equal(io.load_point_cloud(path).positions, [[1, 2, 3], [4, 5, 6]])


@pytest.mark.parametrize("text, message", [
    (_ascii_ply([(1, 2)], ("x", "y")), "z"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n", "header"),
    (_ascii_ply([]), "point"),
    ("not a ply\n", "ply"),
])
def test_bad_ply_rejected(tmp_path, text, message):
    path = tmp_path / "bad.ply"
    path.write_text(text)
    with pytest.raises(FormatError, match=message):
        io.load_point_cloud(path)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)), st.booleans())
def test_ply_round_trip_is_order_preserving(tmp_path_factory, pos, binary):
    path = tmp_path_factory.mktemp("ply") / "p.ply"
    io.write_point_cloud(io.PointCloud(pos), path, binary=binary)
    np.testing.assert_array_equal(io.load_point_cloud(path).positions, pos)


# ---------------------------------------------------------------- rigs

def _rig_entry(ext, image="img.npy", w=4, h=3, fx=1.0):
    return {"intrinsics": {"fx": fx, "fy": fx, "cx": 0.0, "cy": 0.0},
            "extrinsics": np.asarray(ext).reshape(-1).tolist(), "width": w, "height": h,
            "image": image}


def test_identity_rig(tmp_path):
    np.save(tmp_path / "img.npy", np.zeros((3, 4, 3)))
    (tmp_path / "rig.json").write_text(json.dumps([_rig_entry(np.eye(4))]))
    (view,) = io.load_camera_rig(tmp_path / "rig.json")
    assert (view.fx, view.fy, view.cx, view.cy) == (1.0, 1.0, 0.0, 0.0)
    np.testing.assert_array_equal(view.extrinsics, np.eye(4))


def test_scaled_rotation_rejected(tmp_path):
    np.save(tmp_path / "img.npy", np.zeros((3, 4, 3)))
    ext = np.eye(4)
    ext[:3, :3] *= 2
    (tmp_path / "rig.json").write_text(json.dumps([_rig_entry(ext)]))
    with pytest.raises(FormatError, match="non-orthonormal rotation"):
        io.load_camera_rig(tmp_path / "rig.json")


def test_two_view_rig_keeps_order(tmp_path):
    np.save(tmp_path / "a.npy", np.zeros((3, 4, 3)))
    np.save(tmp_path / "b.npy", np.ones((3, 4, 3)))
    ext = np.eye(4)
    ext[:3, 3] = [1, 2, 3]
    (tmp_path / "rig.json").write_text(json.dumps([_rig_entry(np.eye(4), "a.npy"),
                                                   _rig_entry(ext, "b.npy")]))
    views = io.load_camera_rig(tmp_path / "rig.json")
    assert len(views) == 2
    assert views[0].image.max() == 0 and views[1].image.min() == 1
    np.testing.assert_array_equal(views[1].translation, [1, 2, 3])


def test_image_size_mismatch(tmp_path):
    np.save(tmp_path / "img.npy", np.zeros((5, 4, 3)))
    (tmp_path / "rig.json").write_text(json.dumps([_rig_entry(np.eye(4))]))
    with pytest.raises(FormatError, match="declares"):
        io.load_camera_rig(tmp_path / "rig.json")


def test_rig_round_trip_with_feature_blobs(tmp_path):
    rng = np.random.default_rng(1)
    view = io.CameraView(50.0, 60.0, 2.0, 1.5, np.eye(4), 4, 3, rng.random((3, 4, 5)),
                         rng.random((3, 4)) + 1)
    io.save_camera_rig([view], tmp_path / "rig.json")
    (back,) = io.load_camera_rig(tmp_path / "rig.json")
    np.testing.assert_array_equal(back.image, view.image.astype(np.float32))
    np.testing.assert_array_equal(back.depth, view.depth.astype(np.float32))
    assert back.channels == 5


def test_feature_map_blob(tmp_path):
    arr = np.random.default_rng(2).normal(size=(3, 2, 7)).astype(np.float32)
    io.write_feature_map(arr, tmp_path / "f.ndfm")
    raw = (tmp_path / "f.ndfm").read_bytes()
    assert struct.unpack_from("<III4s", raw) == (3, 2, 7, b"NDFM")
    assert len(raw) == 16 + arr.nbytes
    np.testing.assert_array_equal(io.read_feature_map(tmp_path / "f.ndfm"), arr)


# ---------------------------------------------------------------- tokens

def test_binary_tokens_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    bundle = io.TokenBundle(rng.normal(size=(850, 64)), rng.normal(size=64), {"query_count": 850})
    io.write_tokens(bundle, tmp_path / "a.ndtk")
    back = io.read_tokens(tmp_path / "a.ndtk")
    np.testing.assert_array_equal(back.scene_tokens, bundle.scene_tokens)
    np.testing.assert_array_equal(back.guidance_token, bundle.guidance_token)
    io.write_tokens(back, tmp_path / "b.ndtk")
    assert (tmp_path / "a.ndtk").read_bytes() == (tmp_path / "b.ndtk").read_bytes()
    raw = (tmp_path / "a.ndtk").read_bytes()
    assert raw[:4] == b"NDTK" and struct.unpack_from("<III", raw, 4) == (1, 850, 64)


def test_absent_guidance_token(tmp_path):
    io.write_tokens(io.TokenBundle(np.ones((2, 3))), tmp_path / "t.ndtk")
    assert io.read_tokens(tmp_path / "t.ndtk").guidance_token is None


def test_version_mismatch(tmp_path):
    io.write_tokens(io.TokenBundle(np.ones((2, 3))), tmp_path / "t.ndtk")
    raw = bytearray((tmp_path / "t.ndtk").read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    (tmp_path / "t.ndtk").write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        io.read_tokens(tmp_path / "t.ndtk")


def test_truncated_tokens(tmp_path):
    io.write_tokens(io.TokenBundle(np.ones((2, 3))), tmp_path / "t.ndtk")
    raw = (tmp_path / "t.ndtk").read_bytes()
    (tmp_path / "t.ndtk").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        io.read_tokens(tmp_path / "t.ndtk")


def test_json_tokens_within_tolerance(tmp_path):
    rng = np.random.default_rng(4)
    bundle = io.TokenBundle(rng.normal(size=(5, 4)), rng.normal(size=4), {"a": 1})
    io.write_tokens(bundle, tmp_path / "t.json")
    back = io.read_tokens(tmp_path / "t.json")
    assert np.abs(back.scene_tokens - bundle.scene_tokens).max() <= 1e-12
    assert np.abs(back.guidance_token - bundle.guidance_token).max() <= 1e-12
    assert back.metadata["a"] == 1


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 20), st.integers(1, 16)),
              elements=st.floats(-1e6, 1e6, width=32)), st.booleans())
def test_token_round_trip_property(tmp_path_factory, scene, with_guide):
    path = tmp_path_factory.mktemp("tok") / "t.ndtk"
    guide = scene[0] * 0.5 if with_guide else None
    io.write_tokens(io.TokenBundle(scene, guide), path)
    back = io.read_tokens(path)
    assert back.scene_tokens.tobytes() == scene.tobytes()
    assert (back.guidance_token is None) == (not with_guide)


# ---------------------------------------------------------------- masks

def test_mask_format(tmp_path):
    io.write_point_mask([1, 0, 1], tmp_path / "m.txt")
    assert (tmp_path / "m.txt").read_text() == "1\n0\n1\n"
    io.write_point_mask(np.zeros(5, int), tmp_path / "z.txt")
    assert (tmp_path / "z.txt").read_text().splitlines() == ["0"] * 5
    np.testing.assert_array_equal(io.read_point_mask(tmp_path / "m.txt"), [1, 0, 1])


def test_mask_length_mismatch(tmp_path):
    with pytest.raises(ValueError, match="points"):
        io.write_point_mask([1, 0], tmp_path / "m.txt", point_count=3)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    store = ParamStore({"a.weight": rng.normal(size=(3, 4)), "a.bias": rng.normal(size=4),
                        "b": rng.normal(size=(2, 2, 2))}, seed=11)
    store.save(tmp_path / "w.ndtp")
    back = ParamStore.load(tmp_path / "w.ndtp")
    assert back.seed == 11 and set(back) == set(store)
    for k in store:
        assert back[k].tobytes() == store[k].tobytes()
    back.save(tmp_path / "w2.ndtp")
    assert (tmp_path / "w.ndtp").read_bytes() == (tmp_path / "w2.ndtp").read_bytes()


def test_point_cloud_validation():
    with pytest.raises(ValueError, match="finite"):
        io.PointCloud(np.array([[0, 0, np.nan]]))
    with pytest.raises(ValueError, match="colors"):
        io.PointCloud(np.zeros((1, 3)), np.array([[2.0, 0, 0]]))
