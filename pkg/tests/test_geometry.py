import math

import numpy as np
import pytest

from rimcodec import geometry as G
from rimcodec.errors import DimensionMismatch, ZeroRange


def test_unproject_axis_cases():
    assert np.allclose(G.unproject(1, 0, 0), [1, 0, 0])
    assert np.allclose(G.unproject(2, np.pi / 2, 0), [0, 2, 0], atol=1e-15)


def test_unproject_matches_scalar_oracle():
    # direct evaluation with math.* as the independent oracle
    r, th, al = 5.0, np.pi / 4, np.pi / 6
    oracle = (
        r * math.cos(al) * math.cos(th),
        r * math.cos(al) * math.sin(th),
        r * math.sin(al),
    )
    assert np.allclose(G.unproject(r, th, al), oracle, rtol=0, atol=1e-12)
    assert np.allclose(G.unproject(r, th, al), [3.06186, 3.06186, 2.5], atol=5e-6)


def test_project_axis_and_pole():
    assert G.project(np.array([1.0, 0, 0])) == (1.0, 0.0, 0.0)
    r, th, al = G.project(np.array([0.0, 0, 3.0]))
    assert r == 3.0 and th == 0.0 and al == pytest.approx(np.pi / 2)


def test_project_inverse_of_eq1_oracle():
    p = G.unproject(5.0, np.pi / 4, np.pi / 6)
    r, th, al = G.project(p)
    assert (r, th, al) == pytest.approx((5.0, np.pi / 4, np.pi / 6), rel=1e-12)


def test_project_zero_range():
    with pytest.raises(ZeroRange):
        G.project(np.zeros(3))


def test_project_unproject_roundtrip_property():
    rng = np.random.default_rng(7)
    n = 20000
    r = rng.uniform(0.01, 75.0, n)
    th = rng.uniform(-np.pi, np.pi, n)
    al = rng.uniform(-np.pi / 2 + 1e-6, np.pi / 2 - 1e-6, n)
    pts = G.unproject(r, th, al)
    r2, th2, al2 = G.project(pts)
    assert np.max(np.abs(r2 - r) / r) < 1e-9
    assert np.max(np.abs(G.wrap_angle(th2 - th))) < 1e-9
    assert np.max(np.abs(al2 - al)) < 1e-9


def test_to_global_cases():
    identity = G.Pose.identity()
    assert np.allclose(G.to_global([1, 2, 3], identity), [1, 2, 3])
    rz = G.Pose(np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]]), np.zeros(3))
    assert np.allclose(G.to_global([1, 0, 0], rz), [0, 1, 0], atol=1e-15)
    shift = G.Pose(np.eye(3), np.array([10.0, 0, 0]))
    assert np.allclose(G.to_global([1, 0, 0], shift), [11, 0, 0])


def test_to_sensor_inverts_to_global():
    rng = np.random.default_rng(3)
    q = rng.normal(size=4)
    pose = G.Pose(G.quaternion_to_rotation(q), rng.normal(size=3))
    pts = rng.normal(size=(50, 3))
    assert np.allclose(G.to_sensor(G.to_global(pts, pose), pose), pts, atol=1e-12)


def test_pose_validation():
    with pytest.raises(ValueError):
        G.Pose(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        G.Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # det -1


def _grid_calib(h, w):
    return G.LidarCalibration(
        np.linspace(-0.3, 0.1, h), np.linspace(-0.5, 0.5, w, endpoint=False)
    )


def test_image_to_point_cloud_cases():
    calib = G.LidarCalibration([0.0, 0.1], [0.0, 0.2])
    track = G.PoseTrack.identity(2)
    empty = G.RangeImage(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))
    assert G.image_to_point_cloud(empty, calib, track).shape == (0, 3)

    one = G.RangeImage(np.array([[1.0]]), np.array([[True]]))
    c1 = G.LidarCalibration([0.0], [0.0])
    assert np.allclose(G.image_to_point_cloud(one, c1, G.PoseTrack.identity(1)), [[1, 0, 0]])

    # 2x2: per-pixel composition oracle
    img = G.RangeImage(np.array([[2.0, 3.0], [4.0, 5.0]]), np.ones((2, 2), dtype=bool))
    rot = G.quaternion_to_rotation([0.9, 0.1, 0.2, 0.1])
    track2 = G.PoseTrack(np.stack([np.eye(3), rot]), np.array([[0.0, 0, 0], [1.0, 2, 3]]))
    pts = G.image_to_point_cloud(img, calib, track2)
    n = 0
    for i in range(2):
        for j in range(2):
            local = G.unproject(img.ranges[i, j], calib.azimuths[j], calib.elevations[i])
            expect = G.to_global(local, track2.pose(j))
            assert np.allclose(pts[n], expect, atol=1e-12)
            n += 1


def test_image_to_point_cloud_dim_mismatch():
    img = G.RangeImage(np.zeros((2, 3)), np.ones((2, 3), dtype=bool))
    with pytest.raises(DimensionMismatch):
        G.image_to_point_cloud(img, _grid_calib(2, 4), G.PoseTrack.identity(4))


def test_inverse_projection_reconstructs_quantized_image():
    """Cloud -> per-column inverse -> re-quantize == original quantized image."""
    rng = np.random.default_rng(11)
    h, w = 6, 24
    calib = _grid_calib(h, w)
    yaw = np.linspace(0, 0.02, w)
    rot = np.stack([G.quaternion_to_rotation([np.cos(y / 2), 0, 0, np.sin(y / 2)]) for y in yaw])
    trans = np.column_stack([np.linspace(0, 0.5, w), np.zeros(w), np.full(w, 2.0)])
    track = G.PoseTrack(rot, trans)
    ranges = rng.uniform(1.0, 70.0, (h, w))
    valid = rng.random((h, w)) < 0.9
    img = G.quantize(G.RangeImage(ranges, valid), G.QuantizationSpec(0.1))
    pts = G.image_to_point_cloud(img, calib, track)
    ii, jj = np.nonzero(img.valid)
    recon = np.zeros((h, w))
    for n in range(len(pts)):
        i, j = ii[n], jj[n]
        r, th, al = G.project(G.to_sensor(pts[n], track.pose(j)))
        assert abs(G.wrap_angle(th - calib.azimuths[j])) < 1e-9
        assert abs(al - calib.elevations[i]) < 1e-9
        recon[i, j] = r
    requant = G.quantize(G.RangeImage(recon, img.valid), G.QuantizationSpec(0.1))
    assert np.array_equal(requant.ranges, img.ranges)


def test_quantize_examples():
    spec = G.QuantizationSpec(0.1)
    img = G.RangeImage(np.array([[10.07, 10.05, 0.0]]), np.array([[True, True, True]]))
    q = G.quantize(img, spec)
    assert q.ranges[0, 0] == pytest.approx(10.1, abs=1e-12)
    assert q.ranges[0, 1] == pytest.approx(10.1, abs=1e-12)  # half rounds away from zero
    assert q.ranges[0, 2] == 0.0


def test_quantize_idempotent_and_bounded():
    rng = np.random.default_rng(5)
    img = G.RangeImage(rng.uniform(0, 75, (16, 16)), rng.random((16, 16)) < 0.8)
    for prec in (0.02, 0.1, 0.2):
        spec = G.QuantizationSpec(prec)
        q1 = G.quantize(img, spec)
        q2 = G.quantize(q1, spec)
        assert np.array_equal(q1.ranges, q2.ranges)
        assert np.max(np.abs(q1.ranges[img.valid] - img.ranges[img.valid])) <= prec / 2 + 1e-12
        k = G.quantize_steps(q1.ranges[img.valid], prec)
        assert np.allclose(k * prec, q1.ranges[img.valid])


def test_quantize_mean_displacement_quarter_precision():
    rng = np.random.default_rng(0)
    r = rng.uniform(0, 75, 1_000_000)
    prec = 0.1
    q = np.floor(r / prec + 0.5) * prec
    mean_disp = np.mean(np.abs(q - r))
    assert abs(mean_disp - prec / 4) < 0.05 * (prec / 4)


def test_quantization_spec_bounds():
    with pytest.raises(ValueError):
        G.QuantizationSpec(0.0)
    with pytest.raises(ValueError):
        G.QuantizationSpec(0.6)


def test_range_image_invariants():
    img = G.RangeImage(np.array([[1.0, 9.9]]), np.array([[False, True]]))
    assert img.ranges[0, 0] == 0.0  # invalid pixels store exactly 0
    with pytest.raises(ValueError):
        G.RangeImage(np.array([[80.0]]), np.array([[True]]))  # beyond max_range
    with pytest.raises(ValueError):
        img.ranges[0, 1] = 3.0  # immutable


def test_calibration_validation():
    with pytest.raises(ValueError):
        G.LidarCalibration([0.1, 0.1], [0.0, 0.1])
    with pytest.raises(ValueError):
        G.LidarCalibration([0.0, 0.1], [0.0, 0.2, 0.1])
    # wrap through pi is monotonic modulo 2*pi
    G.LidarCalibration([0.0, 0.1], [np.pi - 0.1, np.pi, -np.pi + 0.1])


def test_rimg_container_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    ranges = rng.uniform(0, 75, (5, 9))
    valid = rng.random((5, 9)) < 0.7
    img = G.RangeImage(ranges, valid, precision=0.0, max_range=75.0)
    path = tmp_path / "a.rimg"
    G.write_range_image(path, img)
    back = G.read_range_image(path)
    assert back.height == 5 and back.width == 9
    assert np.array_equal(back.valid, img.valid)
    # ranges survive as float32
    expect = np.where(valid, ranges.astype(np.float32).astype(np.float64), 0.0)
    assert np.array_equal(back.ranges, expect)
    assert back.precision == 0.0 and back.max_range == 75.0


def test_rimg_quantized_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(2)
    img = G.RangeImage(rng.uniform(0, 75, (4, 7)), rng.random((4, 7)) < 0.9)
    q = G.quantize(img, G.QuantizationSpec(0.0001))
    path = tmp_path / "q.rimg"
    G.write_range_image(path, q)
    back = G.read_range_image(path)
    # float32 storage still identifies every grid step at the finest precision
    k0 = G.quantize_steps(q.ranges[q.valid], 0.0001)
    k1 = G.quantize_steps(back.ranges[back.valid], 0.0001)
    assert np.array_equal(k0, k1)


def test_sidecar_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    calib = _grid_calib(4, 6)
    qs = rng.normal(size=(6, 4))
    rots = np.stack([G.quaternion_to_rotation(q) for q in qs])
    track = G.PoseTrack(rots, rng.normal(size=(6, 3)))
    path = tmp_path / "sidecar.json"
    G.write_sidecar(path, calib, [track, track])
    calib2, tracks2 = G.read_sidecar(path)
    assert np.allclose(calib2.elevations, calib.elevations)
    assert np.allclose(calib2.azimuths, calib.azimuths)
    assert calib2.max_range == calib.max_range
    assert len(tracks2) == 2
    assert np.allclose(tracks2[0].rotations, track.rotations, atol=1e-12)
    assert np.allclose(tracks2[0].translations, track.translations, atol=1e-15)


def test_quaternion_roundtrip():
    rng = np.random.default_rng(9)
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        r = G.quaternion_to_rotation(q)
        q2 = G.rotation_to_quaternion(r)
        r2 = G.quaternion_to_rotation(q2)
        assert np.allclose(r, r2, atol=1e-12)


def test_read_crops_beyond_max_range(tmp_path):
    # craft a file whose stored range exceeds max_range
    img = G.RangeImage(np.array([[10.0, 74.0]]), np.array([[True, True]]), max_range=75.0)
    path = tmp_path / "crop.rimg"
    G.write_range_image(path, img)
    data = bytearray(path.read_bytes())
    # overwrite first range with 80.0 (beyond 75): header is 4+1+2+2+8+4 = 21 bytes
    data[21:25] = np.array([80.0], dtype="<f4").tobytes()
    path.write_bytes(bytes(data))
    back = G.read_range_image(path)
    assert not back.valid[0, 0] and back.valid[0, 1]
