import numpy as np
import pytest
from hypothesis import given, strategies as st

from handocc.kinematics import (
    CANONICAL_BONE_LENGTHS,
    EDGES,
    FINGER_FRAMES,
    PARENTS,
    TOPOLOGY,
    HandPose,
    InvalidPoseError,
    Skeleton,
    densify,
    fit_pose,
    fit_poses,
    flip_pose,
    flip_x,
    forward_kinematics,
    forward_kinematics_batch,
    mpjpe,
    random_pose,
    rest_pose,
)
from handocc.geometry import rotvec_to_matrix

seeds = st.integers(0, 2**31 - 1)


def test_topology_is_a_tree_rooted_at_wrist():
    assert len(PARENTS) == 21 and len(EDGES) == 20
    assert PARENTS[0] == -1 and all(0 <= p < i for i, p in enumerate(PARENTS) if i)
    assert [c[0] for c in TOPOLOGY.finger_chains] == [1, 5, 9, 13, 17]
    assert all(PARENTS[c[0]] == 0 for c in TOPOLOGY.finger_chains)


def test_rest_pose_fingers_are_straight_along_their_frames():
    s = forward_kinematics(rest_pose())
    assert np.allclose(s.joints[0], 0)
    for f, chain in enumerate(TOPOLOGY.finger_chains):
        d = FINGER_FRAMES[f][:, 1]
        for j in chain:
            v = s.joints[j] - s.joints[0]
            assert np.allclose(v / np.linalg.norm(v), d, atol=1e-12)


def test_doubling_lengths_doubles_distances_from_wrist():
    p = random_pose(np.random.default_rng(0), translation_sigma=0)
    q = p.copy()
    q.bone_lengths = 2 * p.bone_lengths
    a, b = forward_kinematics(p).joints, forward_kinematics(q).joints
    assert np.allclose(np.linalg.norm(b - b[0], axis=1), 2 * np.linalg.norm(a - a[0], axis=1))


def _chain_oracle(angles, lengths, frame):
    """4x4 homogeneous composition of one finger chain, in the hand frame."""
    def rx(t):
        c, s = np.cos(t), np.sin(t)
        return np.array([[1, 0, 0, 0], [0, c, -s, 0], [0, s, c, 0], [0, 0, 0, 1.0]])

    def rz(t):
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])

    def ty(L):
        T = np.eye(4)
        T[1, 3] = L
        return T

    T = np.eye(4)
    T[:3, :3] = frame
    T = T @ ty(lengths[0])
    out = [T[:3, 3].copy()]
    T = T @ rz(angles[1]) @ rx(angles[0]) @ ty(lengths[1])
    out.append(T[:3, 3].copy())
    T = T @ rx(angles[2]) @ ty(lengths[2])
    out.append(T[:3, 3].copy())
    T = T @ rx(angles[3]) @ ty(lengths[3])
    out.append(T[:3, 3].copy())
    return np.array(out)


def test_index_root_flexion_matches_homogeneous_chain_oracle():
    p = rest_pose()
    p.joint_angles[4] = np.pi / 2
    s = forward_kinematics(p)
    expect = _chain_oracle(p.joint_angles[4:8], p.bone_lengths[4:8], FINGER_FRAMES[1])
    assert np.allclose(s.joints[5:9], expect, atol=1e-12)
    # distal index bones are perpendicular to the metacarpal after a quarter turn
    meta = s.joints[5] - s.joints[0]
    prox = s.joints[6] - s.joints[5]
    assert abs(meta @ prox) < 1e-9


@given(seeds)
def test_fk_matches_oracle_for_every_finger(seed):
    rng = np.random.default_rng(seed)
    p = random_pose(rng, rotate=False, translation_sigma=0)
    s = forward_kinematics(p)
    for f, chain in enumerate(TOPOLOGY.finger_chains):
        sl = slice(4 * f, 4 * f + 4)
        assert np.allclose(s.joints[list(chain)], _chain_oracle(p.joint_angles[sl], p.bone_lengths[sl], FINGER_FRAMES[f]))


@given(seeds, st.sampled_from(["left", "right"]))
def test_bone_lengths_preserved(seed, side):
    p = random_pose(np.random.default_rng(seed), side)
    s = forward_kinematics(p)
    assert np.allclose(s.bone_lengths(), p.bone_lengths, rtol=1e-9, atol=0)
    assert np.allclose(s.joints[0], p.global_translation)


@given(seeds)
def test_global_rotation_acts_rigidly(seed):
    rng = np.random.default_rng(seed)
    p = random_pose(rng, translation_sigma=0, rotate=False)
    rv = rng.normal(size=3)
    q = p.copy()
    q.global_rotation = rv
    a, b = forward_kinematics(p).joints, forward_kinematics(q).joints
    assert np.allclose(b, a @ rotvec_to_matrix(rv).T, atol=1e-9)


@given(seeds)
def test_mpjpe_invariant_under_common_rigid_transform(seed):
    rng = np.random.default_rng(seed)
    a = forward_kinematics(random_pose(rng)).joints
    b = forward_kinematics(random_pose(rng)).joints
    R = rotvec_to_matrix(rng.normal(size=3))
    t = rng.normal(size=3) * 100
    assert np.isclose(mpjpe(a, b), mpjpe(a @ R.T + t, b @ R.T + t))


def test_batch_fk_matches_single():
    rng = np.random.default_rng(3)
    poses = [random_pose(rng, side) for side in ["left", "right"] * 5]
    J = forward_kinematics_batch(poses)
    for p, j in zip(poses, J):
        assert np.allclose(forward_kinematics(p).joints, j, atol=1e-12)


def test_invalid_poses_are_rejected():
    p = rest_pose()
    p.bone_lengths[3] = 0.0
    with pytest.raises(InvalidPoseError, match="thumb"):
        forward_kinematics(p)
    q = rest_pose()
    q.joint_angles[0] = np.nan
    with pytest.raises(InvalidPoseError):
        forward_kinematics(q)


def test_flip_x_definition_and_involution():
    s = forward_kinematics(random_pose(np.random.default_rng(5)))
    f = flip_x(s)
    assert np.array_equal(f.joints[:, 0], -s.joints[:, 0])
    assert np.array_equal(f.joints[:, 1:], s.joints[:, 1:])
    assert f.side == "left"
    ff = flip_x(f)
    assert np.array_equal(ff.joints, s.joints) and ff.side == s.side
    assert mpjpe(s, s) == mpjpe(f, f) == 0.0


@given(seeds, st.sampled_from(["left", "right"]))
def test_flip_pose_commutes_with_fk(seed, side):
    p = random_pose(np.random.default_rng(seed), side)
    assert np.allclose(forward_kinematics(flip_pose(p)).joints, flip_x(forward_kinematics(p)).joints, atol=1e-9)


@given(st.integers(0, 12), seeds)
def test_densify_counts_and_collinearity(k, seed):
    s = forward_kinematics(random_pose(np.random.default_rng(seed)))
    d = densify(s, k)
    assert len(d) == 21 + 20 * k
    assert np.array_equal(d.points[:21], s.joints)
    extra = d.points[21:].reshape(20, k, 3)
    for e, (i, j) in enumerate(EDGES):
        a, b = s.joints[i], s.joints[j]
        for n, p in enumerate(extra[e], 1):
            assert abs(np.linalg.norm(p - a) + np.linalg.norm(p - b) - np.linalg.norm(a - b)) < 1e-9
            assert np.allclose(p, a + n / (k + 1) * (b - a))


def test_densify_canonical_and_negative():
    s = forward_kinematics(rest_pose())
    assert len(densify(s, 5)) == 121
    assert np.array_equal(densify(s, 0).points, s.joints)
    with pytest.raises(ValueError):
        densify(s, -1)


def test_mpjpe_examples():
    rng = np.random.default_rng(9)
    a = forward_kinematics(random_pose(rng))
    assert mpjpe(a, a) == 0
    b = Skeleton(a.joints + [3.0, 0, 0], "right")
    assert np.isclose(mpjpe(a, b), 3.0)
    c = forward_kinematics(random_pose(rng))
    brute = sum(np.sqrt(sum((a.joints[i, k] - c.joints[i, k]) ** 2 for k in range(3))) for i in range(21)) / 21
    assert np.isclose(mpjpe(a, c), brute)
    with pytest.raises(ValueError):
        mpjpe(a.joints, a.joints[:20])


def test_skeleton_json_validation():
    with pytest.raises(ValueError, match="expected 21 joints"):
        Skeleton.from_dict({"side": "right", "joints": [[0, 0, 0]] * 20})
    s = Skeleton.from_dict(forward_kinematics(rest_pose("left")).to_dict())
    assert s.side == "left"
    p = HandPose.from_dict(rest_pose().to_dict())
    assert np.array_equal(p.bone_lengths, CANONICAL_BONE_LENGTHS)


def test_fit_rest_recovers_zero_angles():
    pose, res = fit_pose(forward_kinematics(rest_pose()))
    assert res < 1e-6
    assert np.abs(pose.joint_angles).max() < 1e-3


@pytest.mark.parametrize("side", ["left", "right"])
def test_fit_round_trip(side):
    rng = np.random.default_rng(11)
    targets = [forward_kinematics(random_pose(rng, side)) for _ in range(20)]
    for (pose, res), t in zip(fit_poses(targets), targets):
        assert pose.side == side
        assert res < 0.5
        assert np.isclose(res, mpjpe(forward_kinematics(pose), t))


def test_fit_is_deterministic():
    t = forward_kinematics(random_pose(np.random.default_rng(2)))
    a, ra = fit_pose(t, seed=4)
    b, rb = fit_pose(t, seed=4)
    assert ra == rb and np.array_equal(a.joint_angles, b.joint_angles)


def test_fit_infeasible_target_reports_residual():
    s = forward_kinematics(random_pose(np.random.default_rng(1)))
    j = s.joints.copy()
    # push the index tip 50 mm out of its flexion plane
    j[8] += 50 * FINGER_FRAMES[1][:, 0] @ np.eye(3)
    pose, res = fit_pose(Skeleton(j, "right"))
    assert res > 0 and np.isfinite(res)
    assert np.isclose(res, mpjpe(forward_kinematics(pose), Skeleton(j, "right")))


def test_fit_degenerate_target_does_not_crash():
    s = forward_kinematics(rest_pose())
    j = s.joints.copy()
    j[6] = j[5]  # zero-length bone
    pose, res = fit_pose(Skeleton(j, "right"))
    assert np.isfinite(res)
