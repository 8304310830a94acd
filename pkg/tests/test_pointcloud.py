import math
import struct

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from dadt.pointcloud import (FrameFormatError, Point, PointCloud, decode_frame, encode_frame,
                             load_frame, spherical, to_spherical, write_frame)

coord = st.floats(-1e4, 1e4, allow_nan=False)


def test_axis_point():
    assert to_spherical(Point(1, 0, 0)) == (1.0, 0.0, 0.0)


def test_vertical_singularity():
    s = to_spherical(Point(0, 0, 1))
    assert s.r == 1.0 and s.phi == pytest.approx(math.pi / 2) and s.theta == 0.0
    assert to_spherical(Point(0, 0, -2)).phi == pytest.approx(-math.pi / 2)


def test_origin_is_zero():
    assert to_spherical(Point(0, 0, 0)) == (0.0, 0.0, 0.0)


def test_three_four_five():
    s = to_spherical(Point(3, 4, 0))
    assert s.r == pytest.approx(5.0, rel=1e-15)
    assert s.phi == 0.0
    assert s.theta == pytest.approx(0.927295, abs=1e-6)


@given(coord, coord, coord)
def test_spherical_identities(x, y, z):
    s = to_spherical(Point(x, y, z))
    assert all(math.isfinite(v) for v in s)
    assert s.r >= 0
    assert -math.pi / 2 <= s.phi <= math.pi / 2
    assert -math.pi / 2 <= s.theta <= math.pi / 2
    rho2 = x * x + y * y
    if rho2 > 0:
        r2 = rho2 + z * z
        assert abs(s.r ** 2 - r2) <= 1e-12 * r2
        t = z / math.sqrt(rho2)
        # tan(atan(t)) alone carries ~eps*|t| relative error near the vertical
        assume(abs(t) <= 1e6)
        assert abs(math.tan(s.phi) - t) <= 1e-9 * abs(t)


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(0)
    xyz = rng.normal(size=(500, 3)) * 20
    xyz[:3] = [[0, 0, 0], [0, 0, 5], [0, 0, -1]]
    r, phi, theta = spherical(xyz)
    for i, p in enumerate(xyz):
        s = to_spherical(Point(*p))
        assert r[i] == pytest.approx(s.r, rel=1e-15, abs=0)
        assert phi[i] == pytest.approx(s.phi, rel=1e-14, abs=1e-15)
        assert theta[i] == pytest.approx(s.theta, rel=1e-14, abs=1e-15)


def test_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0, 0]]), np.array([0.5]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), np.array([1.5]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.zeros(2), beam_labels=[0])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), np.zeros(1), beam_labels=[-1])


def test_cloud_is_immutable():
    c = PointCloud.from_points([(1, 2, 3, 0.5)])
    with pytest.raises(ValueError):
        c.xyz[0, 0] = 7


def test_empty_file(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert len(load_frame(p)) == 0


def test_32_bytes_is_two_points(tmp_path):
    p = tmp_path / "two.bin"
    p.write_bytes(struct.pack("<8f", 1, 2, 3, 0.1, 4, 5, 6, 0.2))
    c = load_frame(p)
    assert len(c) == 2
    assert c.frame_id == "two"
    assert c.xyz[1].tolist() == [4.0, 5.0, 6.0]


def test_empty_cloud_writes_zero_bytes(tmp_path):
    p = tmp_path / "z.bin"
    write_frame(PointCloud.empty(), p)
    assert p.read_bytes() == b""


def test_single_point_round_trip(tmp_path):
    p = tmp_path / "one.bin"
    write_frame(PointCloud.from_points([(1, 2, 3, 0.5)]), p)
    raw = p.read_bytes()
    assert len(raw) == 16
    assert struct.unpack("<4f", raw) == (1.0, 2.0, 3.0, 0.5)
    assert load_frame(p).points() == [Point(1.0, 2.0, 3.0, 0.5)]


def test_random_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    data = np.empty((10_000, 4), dtype="<f4")
    data[:, :3] = rng.normal(size=(10_000, 3)) * 50
    data[:, 3] = rng.random(10_000)
    p = tmp_path / "r.bin"
    p.write_bytes(data.tobytes())
    c = load_frame(p)
    out = tmp_path / "w.bin"
    write_frame(c, out)
    assert out.read_bytes() == data.tobytes()
    again = load_frame(out)
    assert np.array_equal(again.xyz, c.xyz) and np.array_equal(again.intensity, c.intensity)


def test_malformed_length(tmp_path):
    with pytest.raises(FrameFormatError, match="multiple of 16"):
        decode_frame(b"\0" * 20)


def test_non_finite_record_index():
    raw = struct.pack("<8f", 1, 2, 3, 0.1, 4, float("inf"), 6, 0.2)
    with pytest.raises(FrameFormatError, match="record 1"):
        decode_frame(raw)


def test_intensity_range_record_index():
    raw = struct.pack("<12f", 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2.0)
    with pytest.raises(FrameFormatError, match="record 2"):
        decode_frame(raw)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_frame(tmp_path / "absent.bin")


def test_encode_is_deterministic():
    c = PointCloud.from_points([(1.25, -2, 3, 0.5), (0, 0, 0, 0)])
    assert encode_frame(c) == encode_frame(c)
