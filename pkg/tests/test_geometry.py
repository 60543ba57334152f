import numpy as np
import pytest
from scipy.linalg import expm

from lidarloc import geometry as g


def random_twists(n, seed, max_angle=np.pi - 0.1):
    rng = np.random.default_rng(seed)
    rho = rng.uniform(-5, 5, size=(n, 3))
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0, max_angle, size=n)
    return np.hstack([rho, axis * angle[:, None]])


def random_pose(rng):
    return g.exp_map(np.concatenate([rng.uniform(-3, 3, 3), rng.normal(size=3)]))


def test_exp_identity():
    P = g.exp_map(np.zeros(6))
    assert np.allclose(P.matrix(), np.eye(4), atol=0)


def test_exp_quarter_turn_about_z():
    P = g.exp_map([0, 0, 0, 0, 0, np.pi / 2])
    expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    assert np.allclose(P.R, expected, atol=1e-15)
    assert np.allclose(P.t, 0)


def test_log_identity_and_quarter_turn():
    assert np.allclose(g.log_map(g.Pose()), 0)
    R = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    assert np.allclose(g.log_map(g.Pose(R, np.zeros(3))), [0, 0, 0, 0, 0, np.pi / 2], atol=1e-15)


def test_exp_matches_matrix_exponential():
    for xi in random_twists(200, seed=1):
        assert np.allclose(g.exp_map(xi).matrix(), expm(g.wedge(xi)), atol=1e-10)


def test_exp_log_round_trip_1000():
    xis = random_twists(1000, seed=2)
    worst = max(np.max(np.abs(g.log_map(g.exp_map(xi)) - xi)) for xi in xis)
    assert worst < 1e-9


@pytest.mark.parametrize("angle", [0.0, 1e-12, 1e-9, 1e-7, 1e-5, 1e-3, 0.5])
def test_round_trip_small_angles(angle):
    xi = np.array([1.0, -2.0, 0.5, angle, -0.3 * angle, 0.2 * angle])
    assert np.allclose(g.log_map(g.exp_map(xi)), xi, atol=1e-12)


def test_rotation_angle_equals_norm():
    for xi in random_twists(50, seed=3):
        assert abs(g.exp_map(xi).angle() - np.linalg.norm(xi[3:])) < 1e-9


def test_log_domain_error_near_pi():
    P = g.exp_map([0, 0, 0, 0, 0, np.pi - 1e-8])
    with pytest.raises(g.LogDomainError):
        g.log_map(P)


def test_inverse_and_associativity():
    rng = np.random.default_rng(4)
    for _ in range(100):
        A, B, C = (random_pose(rng) for _ in range(3))
        assert np.max(np.abs((A @ A.inverse()).matrix() - np.eye(4))) < 1e-9
        assert np.max(np.abs(((A @ B) @ C).matrix() - (A @ (B @ C)).matrix())) < 1e-12


def test_long_composition_chain_stays_orthonormal():
    rng = np.random.default_rng(5)
    P = g.Pose()
    steps = [g.exp_map(0.01 * rng.normal(size=6)) for _ in range(100)]
    for i in range(10_000):
        P = P @ steps[i % 100]
    assert np.max(np.abs(P.R @ P.R.T - np.eye(3))) < 1e-9
    assert abs(np.linalg.det(P.R) - 1.0) < 1e-9


def test_adjoint_identity():
    assert np.array_equal(g.adjoint(g.Pose()), np.eye(6))


def test_adjoint_pure_translation_closed_form():
    t = np.array([1.0, 2.0, -0.5])
    w = np.array([0.3, -0.1, 0.7])
    out = g.adjoint(g.Pose(np.eye(3), t)) @ np.concatenate([np.zeros(3), w])
    assert np.allclose(out[:3], np.cross(t, w))
    assert np.allclose(out[3:], w)


def test_adjoint_conjugation_finite_difference():
    rng = np.random.default_rng(6)
    eps = 1e-8
    for _ in range(50):
        P = random_pose(rng)
        w = rng.normal(size=6)
        fd = g.log_map(P @ g.exp_map(eps * w) @ P.inverse()) / eps
        assert np.max(np.abs(fd - g.adjoint(P) @ w)) < 1e-6


def test_adjoint_is_homomorphism():
    rng = np.random.default_rng(7)
    for _ in range(100):
        A, B = random_pose(rng), random_pose(rng)
        assert np.max(np.abs(g.adjoint(A @ B) - g.adjoint(A) @ g.adjoint(B))) < 1e-9


def _jr_oracle(xi):
    # J_r = int_0^1 exp(-s ad(xi)) ds, read off a block matrix exponential
    M = np.zeros((12, 12))
    M[:6, :6] = -g.curly(xi)
    M[:6, 6:] = np.eye(6)
    return expm(M)[:6, 6:]


def test_right_jacobian_against_block_expm():
    xis = np.vstack([random_twists(50, seed=8), 1e-5 * random_twists(10, seed=9)])
    batch = g.se3_right_jacobian_batch(xis)
    for xi, Jb in zip(xis, batch):
        J = _jr_oracle(xi)
        assert np.allclose(g.se3_right_jacobian(xi), J, atol=1e-10)
        assert np.allclose(Jb, J, atol=1e-10)
        assert np.allclose(g.se3_right_jacobian_inv(xi) @ J, np.eye(6), atol=1e-9)


def test_right_jacobian_perturbation_identity():
    # exp(xi + d) ~ exp(xi) exp(J_r(xi) d)
    rng = np.random.default_rng(10)
    for xi in random_twists(20, seed=11, max_angle=2.5):
        d = 1e-6 * rng.normal(size=6)
        lhs = g.exp_map(xi + d)
        rhs = g.exp_map(xi) @ g.exp_map(g.se3_right_jacobian(xi) @ d)
        assert np.max(np.abs(lhs.matrix() - rhs.matrix())) < 1e-11


@pytest.mark.parametrize("scale", [1.0, 1e-2, 1e-5, 0.0])
def test_so3_right_jacobian_dot_finite_difference(scale):
    rng = np.random.default_rng(12)
    for _ in range(20):
        phi = scale * rng.normal(size=3)
        w = rng.normal(size=3)
        analytic = g.so3_right_jacobian_dot(phi, w)
        h = 1e-6
        fd = np.zeros((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd[:, k] = (g.so3_left_jacobian(-(phi + e)) @ w - g.so3_left_jacobian(-(phi - e)) @ w) / (2 * h)
        assert np.allclose(analytic, fd, atol=1e-8)


def test_row12_round_trip():
    rng = np.random.default_rng(13)
    P = random_pose(rng)
    Q = g.Pose.from_row12(P.row12())
    assert np.array_equal(P.matrix(), Q.matrix())
