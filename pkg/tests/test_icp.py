import numpy as np
import pytest

from lidarloc.cloud import GyroSample, LidarFrame, voxel_downsample
from lidarloc.geometry import Pose, exp_map, log_map
from lidarloc.gp import TrajectoryKnot, interpolate_poses
from lidarloc.icp import (
    IcpConfig, IcpOdometry, InsufficientOverlapError, LocalMap, _retract, associate,
    gyro_residuals, icp_odometry_step, planar_features, point_residuals, undistort,
    update_local_map,
)
from lidarloc.simulator import (
    SensorSpec, WorldSpec, build_trajectory, corridor_boxes, ground_plane, render_scan,
    simulate_gyro,
)

T_VS = Pose(np.eye(3), [0.0, 0.0, 1.5])
TWIST = np.r_[8.0, 0, 0, 0, 0, 0.1]


def constant_knots(twist, t0=0.0, t1=0.1, start=Pose.identity()):
    return (TrajectoryKnot(start, twist, t0), TrajectoryKnot(start @ exp_map((t1 - t0) * twist), twist, t1))


def dense_scene(twist=TWIST, duration=3.0, rows=64, cols=800):
    gt = build_trajectory([(duration, twist)])
    world = WorldSpec(planes=[ground_plane(0.0)], boxes=corridor_boxes(gt, spacing=6, offset=8, seed=1))
    sensor = SensorSpec(rows=rows, cols=cols, max_range=50, T_vs=T_VS)
    return gt, world, sensor


def exact_config(**kw):
    kw.setdefault("k_neighbors", 10)
    kw.setdefault("planarity_threshold", 0.999999)
    kw.setdefault("plane_epsilon", 1e-6)
    kw.setdefault("R_gyro", 1e-6 * np.eye(3))
    return IcpConfig(T_vs=T_VS, **kw)


def truth_knots(gt, t0, t1):
    return (TrajectoryKnot(gt.pose(t0), gt.twist(t0), t0), TrajectoryKnot(gt.pose(t1), gt.twist(t1), t1))


def truth_map(gt, world, sensor, cfg, frames):
    m = LocalMap(span=cfg.map_span)
    for r in frames:
        t0 = r * 0.1
        f = render_scan(world, gt, t0, t0 + 0.1, sensor, seed=0)
        und = planar_features(undistort(voxel_downsample(f, cfg.voxel_size), truth_knots(gt, t0, t0 + 0.1),
                                        cfg.T_vs), cfg)
        m = update_local_map(m, und, gt.pose(t0 + 0.1) @ cfg.T_vs)
    return m


# ---------------------------------------------------------------------------
# association and local map

def test_associate_coincident_and_far():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-10, 10, size=(50, 3))
    m = LocalMap.from_points(pts, np.tile([0, 0, 1.0], (50, 1)))
    p, n = associate(pts[7], m, 0.5)
    assert np.array_equal(p, pts[7]) and np.allclose(n, [0, 0, 1])
    assert associate([100.0, 0, 0], m, 1.0) is None


def test_associate_matches_linear_scan():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-10, 10, size=(500, 3))
    m = LocalMap.from_points(pts, rng.normal(size=(500, 3)))
    q = rng.uniform(-11, 11, size=(1000, 3))
    idx, _ = m.query(q, 1.5)
    d = np.linalg.norm(q[:, None, :] - pts[None], axis=2)
    ref = np.where(d.min(axis=1) <= 1.5, d.argmin(axis=1), -1)
    assert np.array_equal(idx, ref)


def test_local_map_normals_unit():
    rng = np.random.default_rng(2)
    m = LocalMap.from_points(rng.normal(size=(20, 3)), rng.normal(size=(20, 3)) * 5)
    assert np.allclose(np.linalg.norm(m.normals, axis=1), 1.0)


def frame_with_normals(n, seed, t0=0.0):
    rng = np.random.default_rng(seed)
    return LidarFrame(rng.normal(size=(n, 3)), np.full(n, t0 + 0.1), np.zeros(n), t0, t0 + 0.1,
                      normals=rng.normal(size=(n, 3)))


def test_update_local_map_insert_and_evict():
    pose = exp_map([1.0, 2.0, 3.0, 0.1, -0.2, 0.3])
    f = frame_with_normals(30, 0)
    m = update_local_map(LocalMap(span=3), f, pose)
    assert np.allclose(m.points, pose.apply(f.positions))
    frames = [frame_with_normals(10 + i, i) for i in range(4)]
    m = LocalMap(span=3)
    for fr in frames:
        m = update_local_map(m, fr, Pose.identity())
    assert m.block_sizes == [11, 12, 13]
    assert len(m) == 11 + 12 + 13
    assert not np.isin(frames[0].positions[:, 0], m.points[:, 0]).any()


def test_update_local_map_needs_normals():
    f = LidarFrame(np.zeros((3, 3)), np.full(3, 0.1), np.zeros(3), 0.0, 0.1)
    with pytest.raises(ValueError):
        update_local_map(LocalMap(), f, Pose.identity())


# ---------------------------------------------------------------------------
# undistortion

def test_undistort_zero_twist_unchanged():
    rng = np.random.default_rng(3)
    f = LidarFrame(rng.normal(size=(40, 3)) * 10, np.linspace(0, 0.1, 40), np.zeros(40), 0.0, 0.1)
    out = undistort(f, constant_knots(np.zeros(6)), T_VS)
    assert np.allclose(out.positions, f.positions, atol=1e-12)
    assert np.all(out.timestamps == 0.1)


def test_undistort_forward_closed_form():
    pts = np.array([[20.0, 1.0, 0.0], [20.0, 1.0, 0.0]])
    f = LidarFrame(pts, [0.0, 0.1], np.zeros(2), 0.0, 0.1)
    out = undistort(f, constant_knots(np.r_[10.0, 0, 0, 0, 0, 0]))
    assert np.allclose(out.positions[0] - out.positions[1], [-1.0, 0, 0], atol=1e-12)


def test_undistort_simulated_scan_matches_instantaneous():
    gt, world, sensor = dense_scene(rows=16, cols=200)
    f = render_scan(world, gt, 0.3, 0.4, sensor, seed=0)
    out = undistort(f, truth_knots(gt, 0.3, 0.4), T_VS)
    # reference: every hit expressed in the sensor frame at frame end
    R, t = gt.poses(f.timestamps)
    world_pts = np.einsum("nij,nj->ni", R, T_VS.apply(f.positions)) + t
    ref = (gt.pose(0.4) @ T_VS).inverse().apply(world_pts)
    rms = np.sqrt(np.mean(np.sum((out.positions - ref) ** 2, axis=1)))
    assert rms < 1e-3
    raw = np.sqrt(np.mean(np.sum((f.positions - ref) ** 2, axis=1)))
    assert raw > 0.1


# ---------------------------------------------------------------------------
# Jacobians

def random_state(rng):
    w1 = rng.normal(scale=[5, 1, 0.5, 0.2, 0.2, 0.5])
    p1 = exp_map(rng.normal(scale=[3, 3, 1, 0.3, 0.3, 1.0]))
    w2 = w1 + rng.normal(scale=0.2, size=6)
    p2 = p1 @ exp_map(0.05 * (w1 + w2) + rng.normal(scale=0.01, size=6))
    return TrajectoryKnot(p1, w1, 2.0), TrajectoryKnot(p2, w2, 2.1)


def finite_difference(fun, knots, h=1e-6):
    cols = []
    for k in range(24):
        d = np.zeros(24)
        d[k] = h
        cols.append((fun(_retract(knots, d)) - fun(_retract(knots, -d))).ravel() / (2 * h))
    return np.stack(cols, axis=1)


def relative_error(J, num):
    return np.linalg.norm(J - num) / max(np.linalg.norm(num), 1e-12)


def test_point_jacobian_matches_finite_difference():
    rng = np.random.default_rng(10)
    cfg = IcpConfig(T_vs=exp_map([0.3, -0.1, 1.5, 0.02, -0.03, 0.1]))
    worst = 0.0
    for _ in range(100):
        knots = random_state(rng)
        n = 6
        f = LidarFrame(rng.uniform(-20, 20, size=(n, 3)), rng.uniform(2.0, 2.1, size=n), np.zeros(n), 2.0, 2.1)
        tgt = np.zeros((n, 3))
        _, J = point_residuals(knots, f, tgt, cfg)
        num = finite_difference(lambda k: point_residuals(k, f, tgt, cfg, jacobians=False)[0], knots)
        worst = max(worst, relative_error(J.reshape(-1, 24), num))
    assert worst < 1e-5


def test_gyro_jacobian_matches_finite_difference():
    rng = np.random.default_rng(11)
    cfg = IcpConfig(T_vs=exp_map([0.3, -0.1, 1.5, 0.02, -0.03, 0.1]))
    worst = 0.0
    for _ in range(100):
        knots = random_state(rng)
        gyro = [GyroSample(t, rng.normal(size=3)) for t in np.sort(rng.uniform(2.0, 2.1, size=5))]
        _, J = gyro_residuals(knots, gyro, cfg)
        num = finite_difference(lambda k: gyro_residuals(k, gyro, cfg, jacobians=False)[0], knots)
        worst = max(worst, relative_error(J.reshape(-1, 24), num))
    assert worst < 1e-5


# ---------------------------------------------------------------------------
# Gauss-Newton

def planar_world_frame(knots, n_per_plane=150, seed=0):
    """Points on five non-parallel planes, observed along ``knots``; returns frame and map."""
    rng = np.random.default_rng(seed)
    normals = np.array([[0, 0, 1.0], [0, 1, 0], [1, 0, 0.2], [0.3, -1, 0.1], [-1, 0.2, 0.3]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = [0.0, -6.0, -25.0, -7.0, 20.0]
    pts, nrm = [], []
    for n, d in zip(normals, offsets):
        basis = np.linalg.svd(n[None])[2][1:]
        p = -d * n + rng.uniform(-8, 8, size=(n_per_plane, 2)) @ basis
        pts.append(p)
        nrm.append(np.tile(n, (n_per_plane, 1)))
    pts, nrm = np.concatenate(pts), np.concatenate(nrm)
    t0, t1 = knots[0].stamp, knots[1].stamp
    ts = rng.uniform(t0, t1, size=len(pts))

    R, t = interpolate_poses(knots, ts)
    q_v = np.einsum("nji,nj->ni", R, pts - t)
    q = T_VS.inverse().apply(q_v)
    n_s = T_VS.inverse().rotate(np.einsum("nji,nj->ni", R, nrm))
    frame = LidarFrame(q, ts, np.zeros(len(q)), t0, t1, normals=n_s)
    return frame, LocalMap.from_points(pts, nrm)


def exact_gyro(twist, t0, t1, n=10):
    rate = T_VS.inverse().rotate(twist[3:][None])[0]
    return [GyroSample(t, rate) for t in np.linspace(t0, t1, n)]


def test_zero_residual_fixed_point():
    knots = constant_knots(TWIST)
    frame, m = planar_world_frame(knots)
    res = icp_odometry_step(frame, m, exact_gyro(TWIST, 0, 0.1), knots, exact_config())
    assert res.iterations == 1 and res.converged
    E = (knots[0].pose.inverse() @ knots[1].pose).inverse() @ res.relative
    assert np.linalg.norm(log_map(E)) < 1e-9


def test_recovers_offset_initial_guess():
    gt, world, sensor = dense_scene()
    cfg = exact_config()
    m = truth_map(gt, world, sensor, cfg, range(3))
    t0, t1 = 0.3, 0.4
    f = render_scan(world, gt, t0, t1, sensor, seed=0)
    feats = planar_features(voxel_downsample(f, cfg.voxel_size), cfg)
    truth = truth_knots(gt, t0, t1)
    offset = exp_map(np.r_[0.5, 0, 0, 0, 0, np.deg2rad(2.0)])
    guess = (truth[0], TrajectoryKnot(truth[1].pose @ offset, truth[1].twist, t1))
    res = icp_odometry_step(feats, m, simulate_gyro(gt, sensor, t0, t1, seed=0), guess, cfg)
    E = (truth[0].pose.inverse() @ truth[1].pose).inverse() @ res.relative
    assert np.linalg.norm(E.t) < 1e-4
    assert np.rad2deg(E.angle()) < 1e-3
    # accepted iterations never increase the cost on noiseless data
    assert all(b <= a * (1 + 1e-9) + 1e-9 for a, b in zip(res.costs, res.costs[1:]))


def test_insufficient_overlap():
    knots = constant_knots(TWIST)
    frame, m = planar_world_frame(knots)
    far = LocalMap.from_points(m.points + 1000.0, m.normals)
    with pytest.raises(InsufficientOverlapError):
        icp_odometry_step(frame, far, [], knots, exact_config())


def test_single_plane_yaw_needs_gyro():
    knots = constant_knots(TWIST)
    frame, m = planar_world_frame(knots, seed=4)
    ground = np.flatnonzero(np.abs(m.normals[:, 2] - 1.0) < 1e-12)
    m1 = LocalMap.from_points(m.points[ground], m.normals[ground])
    f1 = frame.select(ground)
    gyro = exact_gyro(TWIST, 0, 0.1)
    without = icp_odometry_step(f1, m1, gyro, knots, exact_config(use_gyro=False))
    with_gyro = icp_odometry_step(f1, m1, gyro, knots, exact_config(use_gyro=True))
    # yaw of the newer knot: wide without the gyro, pinned with it
    var_without = without.covariance[17, 17]
    var_with = with_gyro.covariance[17, 17]
    assert var_without > 10 * var_with
    E = (knots[0].pose.inverse() @ knots[1].pose).inverse() @ with_gyro.relative
    assert abs(log_map(E)[5]) < 1e-6


# ---------------------------------------------------------------------------
# frame-by-frame odometry

def run_odometry(cfg, frames=4, noise=False):
    gt, world, sensor = dense_scene(rows=16, cols=200)
    if noise:
        sensor = SensorSpec(rows=16, cols=200, max_range=50, T_vs=T_VS, range_noise=0.02, gyro_noise=0.005)
    odo = IcpOdometry(cfg, TWIST, 0.0)
    steps = []
    for r in range(frames):
        t0 = 0.1 * r
        steps.append(odo.step(render_scan(world, gt, t0, t0 + 0.1, sensor, seed=0),
                              simulate_gyro(gt, sensor, t0, t0 + 0.1, seed=0)))
    return steps


def test_first_step_initialises_without_solving():
    steps = run_odometry(IcpConfig(T_vs=T_VS, k_neighbors=10), frames=2)
    assert steps[0].status == "init" and steps[0].iterations == 0
    assert steps[1].status in ("ok", "stalled") and steps[1].ok


def test_dense_noiseless_odometry_exact():
    gt, world, sensor = dense_scene()
    odo = IcpOdometry(exact_config(), TWIST, 0.0)
    for r in range(4):
        t0 = 0.1 * r
        step = odo.step(render_scan(world, gt, t0, t0 + 0.1, sensor, seed=0),
                        simulate_gyro(gt, sensor, t0, t0 + 0.1, seed=0))
        E = (gt.pose(t0).inverse() @ gt.pose(t0 + 0.1)).inverse() @ step.relative
        assert np.linalg.norm(E.t) < 1e-4
        assert np.rad2deg(E.angle()) < 1e-3


def test_deterministic_across_workers():
    a = run_odometry(IcpConfig(T_vs=T_VS, k_neighbors=10, workers=1), noise=True)
    b = run_odometry(IcpConfig(T_vs=T_VS, k_neighbors=10, workers=4), noise=True)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.relative.matrix(), sb.relative.matrix())
        assert np.array_equal(sa.frame.positions, sb.frame.positions)


def test_config_validation():
    with pytest.raises(ValueError):
        IcpConfig(max_iterations=0)
    with pytest.raises(ValueError):
        IcpConfig(Qc=-np.eye(6))
    with pytest.raises(ValueError):
        IcpConfig(loc_prior_cov=np.zeros(6))
