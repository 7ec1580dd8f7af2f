import math

import numpy as np
import pytest

from voxlo.geometry import Pose3, Rot3, Twist
from voxlo.pipelines import filter_deskew
from voxlo.simulate import (
    Box,
    HorizontalPlane,
    MotionSegment,
    SensorModel,
    World,
    generate_world,
    integrate_profile,
    ray_cast,
    scan_directions,
    simulate_scan,
    simulate_sequence,
    square_loop_profile,
    step_pose,
)


class TestGenerateWorld:
    def test_deterministic_from_seed(self):
        a = generate_world(7, extent=50.0)
        b = generate_world(7, extent=50.0)
        assert a.to_dict() == b.to_dict()
        c = generate_world(8, extent=50.0)
        assert a.to_dict() != c.to_dict()

    def test_bare_ground_plane(self):
        w = generate_world(1, extent=50.0, surface_count=0, scatter_density=0.0)
        assert len(w.boxes) == 0
        assert len(w.scatter) == 0
        assert w.planes == [HorizontalPlane(0.0)]

    def test_default_scan_has_many_returns(self):
        w = generate_world(3)
        scan = simulate_scan(w, Pose3(trans=[0, 0, 1.5]), Twist.zero(), SensorModel())
        assert len(scan) > 1000

    def test_roundtrip_dict(self):
        w = generate_world(5, extent=30.0, surface_count=3)
        again = World.from_dict(w.to_dict())
        assert again.to_dict() == w.to_dict()


class TestRayCast:
    def test_ground_plane_analytic(self):
        w = World(0, [HorizontalPlane(0.0)], [], np.zeros((0, 3)))
        dirs = np.array([[0.0, 0.0, -1.0], [math.cos(0.3) , 0.0, -math.sin(0.3)], [0, 0, 1.0]])
        r = ray_cast(w, [0, 0, 2.0], dirs, 100.0)
        assert r[0] == pytest.approx(2.0, abs=1e-12)
        assert r[1] == pytest.approx(2.0 / math.sin(0.3), abs=1e-9)
        assert np.isinf(r[2])

    def test_box_slab(self):
        w = World(0, [], [Box((1.0, -1.0, -1.0), (2.0, 1.0, 1.0))], np.zeros((0, 3)))
        r = ray_cast(w, [0, 0, 0], np.array([[1.0, 0, 0], [-1.0, 0, 0]]), 100.0)
        assert r[0] == pytest.approx(1.0, abs=1e-12)
        assert np.isinf(r[1])

    def test_sphere(self):
        w = World(0, [], [], np.array([[5.0, 0.0, 0.0]]), scatter_radius=0.5)
        r = ray_cast(w, [0, 0, 0], np.array([[1.0, 0, 0]]), 100.0)
        assert r[0] == pytest.approx(4.5, abs=1e-12)

    def test_max_range_cut(self):
        w = World(0, [HorizontalPlane(0.0)], [], np.zeros((0, 3)))
        r = ray_cast(w, [0, 0, 10.0], np.array([[0.0, 0, -1.0]]), 5.0)
        assert np.isinf(r[0])


class TestSimulateScan:
    def test_static_above_plane_matches_analytic_intersection(self):
        w = World(0, [HorizontalPlane(0.0)], [], np.zeros((0, 3)))
        sensor = SensorModel(rings=8, points_per_ring=90, fov_deg=(-45.0, -5.0), max_range=50.0)
        scan = simulate_scan(w, Pose3(trans=[0, 0, 1.0]), Twist.zero(), sensor)
        dirs, times, rings = scan_directions(sensor)
        se = dirs[:, 2]
        hit = se < -1.0 / 50.0  # range <= 50
        expected = dirs[hit] * (1.0 / -se[hit])[:, None]
        assert len(scan) == hit.sum()
        assert np.max(np.linalg.norm(scan.xyz - expected, axis=1)) < 1e-9

    def test_zero_twist_equals_naive_projection(self):
        w = generate_world(2, extent=40.0, surface_count=5, scatter_density=0.0)
        sensor = SensorModel(rings=4, points_per_ring=180)
        pose = Pose3(Rot3.exp([0.0, 0.02, 0.4]), [1.0, 2.0, 1.2])
        a = simulate_scan(w, pose, Twist.zero(), sensor)
        dirs, times, _ = scan_directions(sensor)
        ranges = ray_cast(w, pose.trans, pose.rot.apply(dirs), sensor.max_range)
        hit = np.isfinite(ranges)
        naive = dirs[hit] * ranges[hit][:, None]
        assert np.allclose(a.xyz, naive, atol=1e-12)

    def test_deskew_inversion_oracle(self):
        w = generate_world(4, extent=60.0, surface_count=10, scatter_density=0.005)
        sensor = SensorModel(rings=6, points_per_ring=120)
        pose = Pose3(Rot3.exp([0.0, 0.0, 0.7]), [3.0, -2.0, 1.4])
        rng = np.random.default_rng(11)
        for _ in range(20):
            v = rng.uniform(-1, 1, size=3)
            v *= rng.uniform(0, 20.0) / max(np.linalg.norm(v), 1e-12)
            wvec = rng.uniform(-1, 1, size=3)
            wvec *= rng.uniform(0, 2.0) / max(np.linalg.norm(wvec), 1e-12)
            twist = Twist(v=v, w=wvec)
            skewed = simulate_scan(w, pose, twist, sensor)
            static = simulate_scan(w, pose, Twist.zero(), sensor)
            fixed = filter_deskew(skewed, Pose3.identity(), twist)
            assert len(fixed) == len(static)
            assert np.max(np.linalg.norm(fixed.xyz - static.xyz, axis=1)) < 1e-9

    def test_noise_deterministic_from_seed(self):
        w = generate_world(6, extent=40.0)
        sensor = SensorModel(rings=4, points_per_ring=90, range_noise_std=0.02)
        pose = Pose3(trans=[0, 0, 1.5])
        a = simulate_scan(w, pose, Twist.zero(), sensor, rng=123)
        b = simulate_scan(w, pose, Twist.zero(), sensor, rng=123)
        assert np.array_equal(a.xyz, b.xyz)

    def test_time_channel_mid_scan_zero(self):
        sensor = SensorModel(rings=2, points_per_ring=100, scan_period=0.08)
        w = generate_world(1, extent=40.0)
        scan = simulate_scan(w, Pose3(trans=[0, 0, 1.5]), Twist.zero(), sensor)
        assert scan.time.min() >= -0.04
        assert scan.time.max() <= 0.04


class TestMotion:
    def test_step_pose_translation(self):
        p = step_pose(Pose3.identity(), Twist(v=[1, 0, 0]), 0.5)
        assert np.allclose(p.trans, [0.5, 0, 0])

    def test_integrate_square_loop_closes(self):
        segments = square_loop_profile(side=40.0, speed=5.0, turn_time=2.0)
        stamps, poses, twists = integrate_profile(Pose3(trans=[0, 0, 1.5]), segments, 0.1)
        assert np.allclose(poses[-1].trans, poses[0].trans, atol=1e-6)
        assert poses[-1].rot.angle_to(poses[0].rot) < 1e-9

    def test_sequence_shapes(self):
        w = generate_world(9, extent=40.0, surface_count=4)
        sensor = SensorModel(rings=3, points_per_ring=60)
        stamps, scans, poses, twists = simulate_sequence(
            w, Pose3(trans=[0, 0, 1.5]), [MotionSegment(1.0, Twist(v=[2, 0, 0]))], sensor, seed=5
        )
        assert len(stamps) == len(scans) == len(poses) == len(twists) == 11
        assert np.all(np.diff(stamps) > 0)
