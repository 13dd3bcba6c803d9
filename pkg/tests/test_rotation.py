import logging

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from oracles import central_diff, rel_error
from tokd.distill import kd_loss_per_sample
from tokd.errors import ConfigError, StateError
from tokd.rotation import (RotationPair, build_record, manifold_update, orthogonality_error, per_sample_grads,
                           rotate, rotate_backward, rotation_loss)
from tokd.student import build_projector


def test_rotate_identity_and_closed_form():
    z = np.random.default_rng(0).standard_normal((3, 5))
    assert np.array_equal(rotate(z, np.eye(3)), z)
    r90 = np.array([[0.0, -1.0], [1.0, 0.0]])
    assert np.allclose(rotate(np.array([[1.0, 0.0, 5.0]]), r90), [[0.0, 1.0, 5.0]], atol=1e-15)


def test_rotate_full_dimension_is_isometry():
    R = special_ortho_group.rvs(6, random_state=1)
    z = np.random.default_rng(1).standard_normal((4, 6))
    assert np.max(np.abs(np.linalg.norm(rotate(z, R), axis=1) - np.linalg.norm(z, axis=1))) < 1e-9


def test_rotate_dimension_error():
    with pytest.raises(ConfigError):
        rotate(np.zeros((2, 3)), np.eye(4))


def test_rotate_backward_is_adjoint():
    rng = np.random.default_rng(2)
    R = special_ortho_group.rvs(4, random_state=2)
    z, dm = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
    assert abs(np.sum(rotate(z, R) * dm) - np.sum(z * rotate_backward(dm, R))) < 1e-12


def test_record_average_is_exact():
    rng = np.random.default_rng(3)
    pair = RotationPair(5, special_ortho_group.rvs(5, random_state=3), special_ortho_group.rvs(5, random_state=4))
    rec = build_record(rng.standard_normal((4, 5)), rng.standard_normal((4, 5)), pair)
    assert np.array_equal(rec.g, 0.5 * (rec.v_r + rec.v_f))
    assert np.array_equal(rec.v_r, rec.raw_r @ pair.R_r)


def _projector_pair(rng, shape=(4, 3, 3), out=3):
    return build_projector(shape, out, 2, rng), build_projector(shape, out, 3, rng)


def test_per_sample_grads_zero_when_converged():
    rng = np.random.default_rng(4)
    pr, pf = _projector_pair(rng)
    m = rng.standard_normal((3, 4, 3, 3))
    pr.forward(m)
    pf.forward(m)
    zeros = np.zeros((3, 3, 3, 3))
    rec = per_sample_grads(pr, pf, zeros, zeros, RotationPair(8))
    assert not rec.g.any() and not rec.v_r.any() and not rec.v_f.any()


def test_per_sample_grads_needs_forward():
    rng = np.random.default_rng(5)
    pr, pf = _projector_pair(rng)
    with pytest.raises(StateError):
        per_sample_grads(pr, pf, np.zeros((1, 3, 3, 3)), np.zeros((1, 3, 3, 3)), RotationPair(4))


def test_per_sample_grads_batch_of_one_matches_batch_backward():
    # per-sample grads hold BN statistics fixed; for one sample that is the
    # same computation as a frozen-statistics backward of the batch loss
    rng = np.random.default_rng(6)
    pr, pf = _projector_pair(rng)
    m = rng.standard_normal((1, 4, 3, 3))
    targets = rng.standard_normal((2, 1, 3, 3, 3))
    d_F = []
    for proj, t in zip((pr, pf), targets):
        F = proj.forward(m)
        d_F.append(kd_loss_per_sample(F, t)[1])
    pair = RotationPair(36)
    rec = per_sample_grads(pr, pf, d_F[0], d_F[1], pair)
    for proj, dF, raw in ((pr, d_F[0], rec.raw_r), (pf, d_F[1], rec.raw_f)):
        proj.forward(m)
        dm, _ = proj.backward(dF, frozen_stats=True)
        assert np.max(np.abs(dm.reshape(1, -1) - raw)) < 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_per_sample_grads_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pr, pf = _projector_pair(rng)
    n, d = 4, 20
    m = rng.standard_normal((n, 4, 3, 3))
    targets = rng.standard_normal((2, n, 3, 3, 3))
    d_F = []
    for proj, t in zip((pr, pf), targets):
        d_F.append(kd_loss_per_sample(proj.forward(m), t)[1])
    pair = RotationPair(d)
    rec = per_sample_grads(pr, pf, d_F[0], d_F[1], pair)
    for proj, t, raw in ((pr, targets[0], rec.raw_r), (pf, targets[1], rec.raw_f)):
        for i in range(n):
            mi = m[i:i + 1].copy()

            def loss():
                return kd_loss_per_sample(proj.forward(mi, "frozen"), t[i:i + 1])[0][0]

            fd = central_diff(loss, mi).reshape(-1)[:d]
            assert rel_error(raw[i], fd) < 1e-4


def test_rotation_loss_alignment_extremes():
    rng = np.random.default_rng(7)
    R = special_ortho_group.rvs(4, random_state=7)
    raw = rng.standard_normal((3, 4))
    loss, _ = rotation_loss(raw, 2.0 * raw @ R, R)
    assert abs(loss + 3) < 1e-12
    # build targets orthogonal to each R^T raw_n
    u = raw @ R
    g = rng.standard_normal((3, 4))
    g -= np.sum(g * u, axis=1, keepdims=True) / np.sum(u * u, axis=1, keepdims=True) * u
    loss, _ = rotation_loss(raw, g, R)
    assert abs(loss) < 1e-12


def test_rotation_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    for trial in range(20):
        d, n = int(rng.integers(4, 17)), int(rng.integers(2, 9))
        R = special_ortho_group.rvs(d, random_state=trial)
        raw, g = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        _, grad = rotation_loss(raw, g, R)
        fd = central_diff(lambda: rotation_loss(raw, g, R)[0], R, h=1e-6)
        assert rel_error(grad, fd) < 1e-5


def test_rotation_loss_skips_zero_vectors(caplog):
    rng = np.random.default_rng(9)
    raw, g = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    raw[1] = 0
    with caplog.at_level(logging.WARNING):
        loss, grad = rotation_loss(raw, g, np.eye(4))
    assert "skipped" in caplog.text
    full, _ = rotation_loss(raw[[0, 2]], g[[0, 2]], np.eye(4))
    assert loss == full and np.all(np.isfinite(grad))


def test_manifold_update_zero_gradient():
    R = special_ortho_group.rvs(5, random_state=10)
    assert np.array_equal(manifold_update(R, np.zeros((5, 5)), 0.1), R)


def test_manifold_update_long_run_stays_on_so_d():
    rng = np.random.default_rng(11)
    R = np.eye(8)
    worst = 0.0
    for _ in range(10_000):
        R = manifold_update(R, rng.standard_normal((8, 8)), 1e-2)
        worst = max(worst, orthogonality_error(R))
    assert worst < 1e-6
    assert abs(np.linalg.det(R) - 1) < 1e-6


def test_manifold_update_2d_small_angle():
    theta = 1e-3
    R = np.eye(2)
    # A = (G - G^T)/2 at R = I; choose G so that -lr*A is the generator of a rotation by theta
    G = np.array([[0.0, 1.0], [-1.0, 0.0]]) * theta
    out = manifold_update(R, G, 1.0)
    expect = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    assert np.max(np.abs(out - expect)) < 10 * theta ** 3


def test_manifold_update_descends():
    rng = np.random.default_rng(12)
    for trial in range(20):
        d = 6
        R = special_ortho_group.rvs(d, random_state=100 + trial)
        raw, g = rng.standard_normal((5, d)), rng.standard_normal((5, d))
        before, grad = rotation_loss(raw, g, R)
        after, _ = rotation_loss(raw, g, manifold_update(R, grad, 1e-4))
        assert after <= before + 1e-15


def test_updated_rotation_preserves_norms():
    rng = np.random.default_rng(13)
    R = np.eye(6)
    for _ in range(500):
        R = manifold_update(R, rng.standard_normal((6, 6)), 5e-2)
    z = rng.standard_normal((10, 9))
    out = rotate(z, R)
    assert np.max(np.abs(np.linalg.norm(out[:, :6], axis=1) - np.linalg.norm(z[:, :6], axis=1))) < 1e-9
    assert np.array_equal(out[:, 6:], z[:, 6:])


def test_rotation_pair_validation_and_state():
    with pytest.raises(ConfigError):
        RotationPair(0)
    with pytest.raises(ConfigError):
        RotationPair(3, R_r=np.eye(2))
    pair = RotationPair(3)
    z = np.ones((1, 4))
    pair.apply(z, "rgb")
    assert pair.applications == 1
    other = RotationPair(3)
    other.load_state_dict({"R_r": 2 * np.eye(3), "R_f": np.eye(3)})
    assert other.state_dict()["R_r"][0, 0] == 2
