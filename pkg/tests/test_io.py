import json

import numpy as np
import pytest

from fogsplat import io
from fogsplat.fog import FogParams
from fogsplat.io import DataError
from fogsplat.optim import TrainConfig, TrainState
from conftest import random_cloud, small_camera


def test_png_round_trip(tmp_path, rng):
    img = rng.uniform(0, 1, (9, 11, 3))
    io.write_image(tmp_path / "a.png", img)
    back = io.read_image(tmp_path / "a.png")
    assert back.shape == img.shape and np.max(np.abs(back - img)) <= 1 / 510 + 1e-12
    for v in (0.0, 1.0):
        io.write_image(tmp_path / "c.png", np.full((4, 4, 3), v))
        np.testing.assert_array_equal(io.read_image(tmp_path / "c.png"), v)


def test_unreadable_png(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(DataError, match="x.png"):
        io.read_image(tmp_path / "x.png")


def test_pfm_round_trip_exact(tmp_path, rng):
    d = rng.uniform(0, 10, (7, 5)).astype(np.float32).astype(float)
    io.write_pfm(tmp_path / "d.pfm", d)
    np.testing.assert_array_equal(io.read_pfm(tmp_path / "d.pfm"), d)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n5 7\n-1.0\n")


def test_pfm_big_endian_and_row_order(tmp_path):
    d = np.arange(6, dtype=">f4").reshape(2, 3)
    (tmp_path / "b.pfm").write_bytes(b"Pf\n3 2\n1.0\n" + d[::-1].tobytes())
    np.testing.assert_array_equal(io.read_pfm(tmp_path / "b.pfm"), d.astype(float))


@pytest.mark.parametrize("payload, offset", [
    (b"PX\n3 2\n-1.0\n", 0),
    (b"Pf\nabc 2\n-1.0\n", 3),
    (b"Pf\n3 zz\n-1.0\n", 5),
    (b"Pf\n3 2\nscale\n", 7),
])
def test_pfm_malformed_header_reports_offset(tmp_path, payload, offset):
    (tmp_path / "m.pfm").write_bytes(payload + bytes(24))
    with pytest.raises(DataError, match=f"at byte {offset}"):
        io.read_pfm(tmp_path / "m.pfm")


def test_pfm_truncated(tmp_path):
    (tmp_path / "t.pfm").write_bytes(b"Pf\n3 2\n-1.0\n" + bytes(8))
    with pytest.raises(DataError, match="truncated"):
        io.read_pfm(tmp_path / "t.pfm")
    (tmp_path / "h.pfm").write_bytes(b"Pf\n3")
    with pytest.raises(DataError, match="truncated PFM header"):
        io.read_pfm(tmp_path / "h.pfm")


def test_ply_ascii_and_binary(tmp_path, rng):
    xyz = rng.normal(size=(4, 3))
    rgb = rng.integers(0, 256, (4, 3)).astype(np.uint8)
    io.write_points(tmp_path / "p.ply", xyz, rgb / 255.0)
    p, c = io.read_points(tmp_path / "p.ply")
    np.testing.assert_array_equal(p, xyz)
    np.testing.assert_allclose(c, rgb / 255.0, atol=1e-12)
    lines = ["ply", "format ascii 1.0", "element vertex 2", "property float x", "property float y",
             "property float z", "end_header", "1 2 3", "4 5 6"]
    (tmp_path / "a.ply").write_text("\n".join(lines) + "\n")
    cols, _ = io.read_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(cols["z"], [3, 6])


def _fixture_scene(root, size=(6, 4), n_cams=1):
    cams = [small_camera(8, eye=(0.1 * i, 0, -4)) for i in range(n_cams)]
    entries = []
    for i, c in enumerate(cams):
        d = c.to_dict()
        d.update(width=size[0], height=size[1], cx=size[0] / 2, cy=size[1] / 2, name=f"cam{i}")
        entries.append(d)
    (root / "images").mkdir(parents=True)
    (root / "cameras.json").write_text(json.dumps({"cameras": entries}))
    for e in entries:
        io.write_image(root / "images" / f"{e['name']}.png", np.full((size[1], size[0], 3), 0.5))
    io.write_points(root / "points.ply", np.eye(3), np.full((3, 3), 0.25))
    return entries


def test_load_minimal_scene(tmp_path):
    _fixture_scene(tmp_path)
    b = io.load_scene(tmp_path)
    assert len(b) == 1 and b.images[0].shape == (4, 6, 3) and len(b.points) == 3
    assert b.depths == [None] and b.clear_images == [None]
    again = io.load_scene(tmp_path)
    np.testing.assert_array_equal(again.images[0], b.images[0])
    np.testing.assert_array_equal(again.points, b.points)


def test_scene_sorted_by_name(tmp_path):
    entries = _fixture_scene(tmp_path, n_cams=3)
    (tmp_path / "cameras.json").write_text(json.dumps(entries[::-1]))
    assert [c.name for c in io.load_scene(tmp_path).cameras] == ["cam0", "cam1", "cam2"]


def test_size_mismatch_names_both(tmp_path):
    _fixture_scene(tmp_path)
    io.write_image(tmp_path / "images" / "cam0.png", np.zeros((5, 6, 3)))
    with pytest.raises(DataError) as info:
        io.load_scene(tmp_path)
    assert "cam0.png" in str(info.value) and "cameras.json" in str(info.value)


def test_non_orthonormal_rotation(tmp_path):
    entries = _fixture_scene(tmp_path)
    entries[0]["R"] = (np.eye(3) * 1.01).ravel().tolist()
    (tmp_path / "cameras.json").write_text(json.dumps(entries))
    with pytest.raises(DataError, match="camera 0"):
        io.load_scene(tmp_path)


@pytest.mark.parametrize("mutate, needle", [
    (lambda r: (r / "points.ply").unlink(), "points.ply"),
    (lambda r: (r / "images" / "cam0.png").unlink(), "cam0"),
    (lambda r: (r / "cameras.json").write_text("{"), "cameras.json"),
    (lambda r: (r / "cameras.json").write_text('[{"fx": 1}]'), "missing field"),
])
def test_missing_or_malformed_files(tmp_path, mutate, needle):
    _fixture_scene(tmp_path)
    mutate(tmp_path)
    with pytest.raises(DataError, match=needle):
        io.load_scene(tmp_path)


def _checkpoint(tmp_path, rng):
    cloud = random_cloud(rng, 7, sh_degree=1)
    fog = FogParams(rng.normal(size=3), rng.normal(size=3), False)
    cfg = TrainConfig(iterations=9)
    st = TrainState.create(cloud, fog, cfg)
    st.iteration = 5
    path = io.save_checkpoint(cloud, fog, st, tmp_path / "ck.ply", cameras=[small_camera()])
    return cloud, fog, cfg, path


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    cloud, fog, cfg, path = _checkpoint(tmp_path, rng)
    ck = io.load_checkpoint(path)
    for k, v in cloud.params().items():
        np.testing.assert_array_equal(getattr(ck.cloud, k), v)
    np.testing.assert_array_equal(ck.fog.beta_weight, fog.beta_weight)
    np.testing.assert_array_equal(ck.fog.atmos_latent, fog.atmos_latent)
    assert ck.fog.use_sigmoid is False and ck.iteration == 5
    assert TrainConfig.from_dict(ck.config) == cfg
    assert ck.cameras[0].to_dict() == small_camera().to_dict()
    meta = io.peek_checkpoint(path)
    assert meta["num_gaussians"] == 7 and meta["sh_degree"] == 1
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_without_fog(tmp_path, rng):
    cloud = random_cloud(rng, 3)
    path = io.save_checkpoint(cloud, None, None, tmp_path / "nf.ply")
    assert io.load_checkpoint(path).fog is None


def test_checkpoint_truncated(tmp_path, rng):
    _, _, _, path = _checkpoint(tmp_path, rng)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(DataError, match="truncated"):
        io.load_checkpoint(path)


def test_checkpoint_version_bump(tmp_path, rng):
    _, _, _, path = _checkpoint(tmp_path, rng)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text())
    meta["version"] = io.CHECKPOINT_VERSION + 1
    side.write_text(json.dumps(meta))
    with pytest.raises(DataError) as info:
        io.load_checkpoint(path)
    msg = str(info.value)
    assert f"version {io.CHECKPOINT_VERSION + 1}" in msg and f"version {io.CHECKPOINT_VERSION}" in msg


def test_checkpoint_count_mismatch(tmp_path, rng):
    _, _, _, path = _checkpoint(tmp_path, rng)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text())
    meta["num_gaussians"] = 8
    side.write_text(json.dumps(meta))
    with pytest.raises(DataError, match="8"):
        io.load_checkpoint(path)
