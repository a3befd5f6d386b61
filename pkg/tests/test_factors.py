import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynba.ba.factors import (DIM, ImuFactor, NegativeDepthDuringLinearization, PriorFactor, candidate_sigma,
                              huber, huber_weight, imu_residual, relative_camera_pose, state_difference,
                              visual_residual)
from dynba.ba.states import FrameState, LandmarkState
from dynba.classifier import epipolar_precision
from dynba.geometry import CameraIntrinsics, Pose, Rotation, so3_exp
from dynba.imu_preint import GRAVITY, ExtrinsicCalib, ImuNoiseParams, arrays_to_samples, preintegrate

from oracles import numerical_jacobian

INTR = CameraIntrinsics()
H = 1e-6


def jac_close(J, Jn, rel=1e-5, floor=1e-8):
    err = np.abs(J - Jn)
    return bool(np.all(err <= rel * np.abs(Jn).max() + floor)), float(err.max())


def random_state(rng, fid, t=0.0):
    return FrameState(fid, t, rng.normal(size=3), so3_exp(rng.normal(size=3)), rng.normal(size=3),
                      rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01)


def random_extr(rng):
    return ExtrinsicCalib(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 0.1)


def visual_config(rng):
    """Anchor/observer frames and a landmark in front of both cameras."""
    extr = random_extr(rng)
    while True:
        fa = random_state(rng, 0)
        Twa = Pose(fa.R, fa.p) * extr.pose
        depth = rng.uniform(2, 20)
        xa = rng.uniform(-0.6, 0.6, 2)
        Pw = Twa.apply(depth * np.array([xa[0], xa[1], 1.0]))
        # observer: camera displaced and slightly rotated
        Twj = Twa * Pose(so3_exp(rng.normal(size=3) * 0.1), rng.normal(size=3) * 0.5)
        Tbj = Twj * extr.pose.inverse()
        fj = FrameState(1, 0.1, Tbj.t, Tbj.rotation, rng.normal(size=3), rng.normal(size=3) * 0.05,
                        rng.normal(size=3) * 0.01)
        Pc = Twj.inverse().apply(Pw)
        if Pc[2] < 1.0:
            continue
        lm = LandmarkState(7)
        lm.add_observation(0, xa + rng.normal(size=2) * 1e-3, INTR.K[:2, :2] @ xa + INTR.K[:2, 2])
        xj = Pc[:2] / Pc[2] + rng.normal(size=2) * 5e-3
        lm.add_observation(1, xj, INTR.K[:2, :2] @ xj + INTR.K[:2, 2])
        lm.inv_depth = 1.0 / depth * rng.uniform(0.9, 1.1)
        return lm, {0: fa, 1: fj}, extr


def pose_retract(state, d):
    return FrameState(state.frame_id, state.timestamp, state.p + d[:3], state.R * Rotation.exp(d[3:6]),
                      state.v, state.ba, state.bg)


# -- huber ----------------------------------------------------------------------

def test_huber_values():
    assert huber(0.25) == 0.25
    assert huber(1.0) == 1.0
    assert huber(4.0) == 3.0
    assert huber(1.0 - 1e-12) == pytest.approx(1.0)


@given(st.floats(0, 1e6))
def test_huber_continuous_and_weight_is_derivative(s):
    h = 1e-6 * max(1.0, s)
    if s > h:
        num = (huber(s + h) - huber(s - h)) / (2 * h)
        assert float(huber_weight(s)) == pytest.approx(num, rel=1e-4, abs=1e-6)
    assert huber(s) <= s + 1e-12


def test_huber_c1_at_breakpoint():
    eps = 1e-7
    left = (huber(1.0) - huber(1.0 - eps)) / eps
    right = (huber(1.0 + eps) - huber(1.0)) / eps
    assert left == pytest.approx(right, rel=1e-5)


# -- visual residual ----------------------------------------------------------------

def test_visual_residual_zero_at_truth():
    rng = np.random.default_rng(0)
    for _ in range(20):
        lm, states, extr = visual_config(rng)
        fa, fj = states[0], states[1]
        Twa = Pose(fa.R, fa.p) * extr.pose
        Twj = Pose(fj.R, fj.p) * extr.pose
        depth = 1.0 / lm.inv_depth
        xa = lm.obs[0]
        Pc = Twj.inverse().apply(Twa.apply(depth * np.array([xa[0], xa[1], 1.0])))
        lm.obs[1] = Pc[:2] / Pc[2]
        r, *_ = visual_residual(lm, 1, states, extr, INTR)
        assert np.abs(r).max() < 1e-10


def test_visual_residual_behind_camera():
    rng = np.random.default_rng(1)
    lm, states, extr = visual_config(rng)
    lm.inv_depth = -0.5
    with pytest.raises(NegativeDepthDuringLinearization):
        visual_residual(lm, 1, states, extr, INTR)
    with pytest.raises(ValueError):
        visual_residual(lm, 0, states, extr, INTR)


def test_visual_jacobians_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(100):
        lm, states, extr = visual_config(rng)
        r0, Ja, Jj, Jl = visual_residual(lm, 1, states, extr, INTR, whiten=False)

        def f_anchor(d):
            return visual_residual(lm, 1, {0: pose_retract(states[0], d), 1: states[1]}, extr, INTR,
                                   whiten=False)[0]

        def f_obs(d):
            return visual_residual(lm, 1, {0: states[0], 1: pose_retract(states[1], d)}, extr, INTR,
                                   whiten=False)[0]

        def f_lam(d):
            lam = lm.inv_depth
            lm.inv_depth = lam + d[0]
            try:
                return visual_residual(lm, 1, states, extr, INTR, whiten=False)[0]
            finally:
                lm.inv_depth = lam

        for J, f, n in ((Ja, f_anchor, 6), (Jj, f_obs, 6), (Jl.reshape(2, 1), f_lam, 1)):
            ok, err = jac_close(J, numerical_jacobian(f, np.zeros(n), H))
            assert ok, err


def test_visual_residual_lambda_first_order():
    rng = np.random.default_rng(3)
    lm, states, extr = visual_config(rng)
    r0, _, _, Jl = visual_residual(lm, 1, states, extr, INTR, whiten=False)
    dl = 1e-5 * lm.inv_depth
    lm.inv_depth += dl
    r1 = visual_residual(lm, 1, states, extr, INTR, whiten=False)[0]
    assert np.linalg.norm(r1 - r0 - Jl * dl) <= 1e-6 * np.linalg.norm(r1 - r0)


def test_whitening_scales_with_candidate_sigma():
    rng = np.random.default_rng(4)
    lm, states, extr = visual_config(rng)
    raw = visual_residual(lm, 1, states, extr, INTR, whiten=False)[0]
    prev = math.inf
    for s in (1.0, 2.0, 4.0, 16.0):
        r = visual_residual(lm, 1, states, extr, INTR, sigma_px=1.0, sigma_r=s)[0]
        np.testing.assert_allclose(r, raw * INTR.fx / math.sqrt(s))
        sq = float(r @ r)
        assert sq < prev
        prev = sq


# -- candidate sigma ----------------------------------------------------------------

def _candidate_geometry(rng, shift_px=0.0, motion=None):
    extr = ExtrinsicCalib()
    fa = FrameState(0, 0.0, [0, 0, 0], Rotation())
    fj = FrameState(1, 0.1, [0.4, 0.05, 0.1], so3_exp([0.01, -0.02, 0.015]))
    Pw = np.array([rng.uniform(-2, 2), rng.uniform(-1.5, 1.5), rng.uniform(5, 15)])
    if motion is not None:
        Pw_j = Pw + motion
    else:
        Pw_j = Pw
    lm = LandmarkState(3)
    ua = INTR.K @ (Pw / Pw[2])
    Pc = Pose(fj.R, fj.p).inverse().apply(Pw_j)
    uj = INTR.K @ (Pc / Pc[2])
    rel = relative_camera_pose(fa, fj, extr)
    line = epipolar_precision(ua[:2], uj[:2], rel, INTR)
    n = np.array([line.a, line.b]) / math.hypot(line.a, line.b)
    uj2 = uj[:2] + shift_px * n
    lm.add_observation(0, (ua[:2] - INTR.K[:2, 2]) / INTR.fx, ua[:2])
    lm.add_observation(1, (uj2 - INTR.K[:2, 2]) / INTR.fx, uj2)
    return lm, {0: fa, 1: fj}, extr


def test_candidate_sigma_floor():
    rng = np.random.default_rng(5)
    lm, states, extr = _candidate_geometry(rng)
    assert candidate_sigma(lm, 1, states, INTR, extr) == 1.0


def test_candidate_sigma_closed_form():
    rng = np.random.default_rng(6)
    lm, states, extr = _candidate_geometry(rng, shift_px=2.0)
    # 2 px off the epipolar line -> 4 px^2
    assert candidate_sigma(lm, 1, states, INTR, extr) == pytest.approx(4.0, rel=1e-9)


def test_candidate_sigma_degenerate_translation():
    rng = np.random.default_rng(7)
    lm, states, extr = _candidate_geometry(rng, shift_px=5.0)
    states[1] = FrameState(1, 0.1, states[0].p, states[1].R)
    assert candidate_sigma(lm, 1, states, INTR, extr) == 1.0


def test_candidate_sigma_grows_with_motion():
    rng = np.random.default_rng(8)
    for _ in range(20):
        seed = rng.integers(1 << 30)
        v = np.array([0.0, 0.3, 0.0])
        lm1, st1, ex = _candidate_geometry(np.random.default_rng(seed), motion=v)
        lm2, st2, _ = _candidate_geometry(np.random.default_rng(seed), motion=2 * v)
        s1 = candidate_sigma(lm1, 1, st1, INTR, ex)
        s2 = candidate_sigma(lm2, 1, st2, INTR, ex)
        if s1 > 1.0:
            assert s2 >= 2 * s1


# -- IMU residual --------------------------------------------------------------------

def imu_config(rng, noise=ImuNoiseParams(1e-3, 1e-2, 1e-4, 1e-3)):
    n = 21
    t = np.linspace(0, 0.1, n)
    g = rng.normal(size=(n, 3)) * 0.5
    a = rng.normal(size=(n, 3)) - GRAVITY
    pre = preintegrate(arrays_to_samples(t, g, a), noise, rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01)
    si = random_state(rng, 0, 0.0)
    p_j, R_j, v_j = pre.predict(si.p, si.R.matrix(), si.v, si.ba, si.bg)
    sj = FrameState(1, 0.1, p_j + rng.normal(size=3) * 0.01, Rotation.from_matrix(R_j) * so3_exp(rng.normal(size=3) * 0.01),
                    v_j + rng.normal(size=3) * 0.01, si.ba + rng.normal(size=3) * 1e-3, si.bg + rng.normal(size=3) * 1e-4)
    return pre, si, sj


def test_imu_residual_zero_at_truth():
    rng = np.random.default_rng(9)
    for _ in range(10):
        pre, si, _ = imu_config(rng)
        p_j, R_j, v_j = pre.predict(si.p, si.R.matrix(), si.v, si.ba, si.bg)
        sj = FrameState(1, 0.1, p_j, Rotation.from_matrix(R_j), v_j, si.ba, si.bg)
        r = ImuFactor(pre, 0, 1).residual(si, sj, whiten=False)
        assert np.abs(r).max() < 1e-8


def test_imu_jacobians_finite_differences():
    rng = np.random.default_rng(10)
    for _ in range(100):
        pre, si, sj = imu_config(rng)
        fac = ImuFactor(pre, 0, 1)
        _, Ji, Jj = fac.residual(si, sj, whiten=False, jacobians=True)
        Jin = numerical_jacobian(lambda d: fac.residual(si.retract(d), sj, whiten=False), np.zeros(DIM), H)
        Jjn = numerical_jacobian(lambda d: fac.residual(si, sj.retract(d), whiten=False), np.zeros(DIM), H)
        for J, Jn in ((Ji, Jin), (Jj, Jjn)):
            ok, err = jac_close(J, Jn)
            assert ok, err


def test_imu_whitened_jacobians_consistent():
    rng = np.random.default_rng(11)
    pre, si, sj = imu_config(rng)
    r, Ji, Jj = imu_residual(pre, si, sj)
    fac = ImuFactor(pre, 0, 1)
    r_raw, Ji_raw, Jj_raw = fac.residual(si, sj, whiten=False, jacobians=True)
    np.testing.assert_allclose(r, fac.sqrt_info @ r_raw)
    np.testing.assert_allclose(Ji, fac.sqrt_info @ Ji_raw)


def test_imu_bias_perturbation_first_order():
    rng = np.random.default_rng(12)
    pre, si, sj = imu_config(rng, ImuNoiseParams())
    fac = ImuFactor(pre, 0, 1)
    r0, Ji, _ = fac.residual(si, sj, whiten=False, jacobians=True)
    for _ in range(10):
        dbg = rng.uniform(-0.01, 0.01, 3)
        d = np.zeros(DIM)
        d[12:15] = dbg
        r1 = fac.residual(si.retract(d), sj, whiten=False)
        pred = r0 + Ji @ d
        assert np.linalg.norm((r1 - pred)[:9]) <= 1e-4 * max(1.0, np.linalg.norm((r1 - r0)[:9]))


# -- prior ---------------------------------------------------------------------

def test_state_difference_inverts_retract():
    rng = np.random.default_rng(13)
    for _ in range(50):
        s = random_state(rng, 0)
        d = rng.normal(size=DIM) * 0.3
        np.testing.assert_allclose(state_difference(s.retract(d), s), d, atol=1e-10)


def test_prior_jacobians_finite_differences():
    rng = np.random.default_rng(14)
    for _ in range(100):
        lin = [random_state(rng, 0), random_state(rng, 1)]
        J = rng.normal(size=(20, 30))
        r = rng.normal(size=20)
        prior = PriorFactor([0, 1], lin, J, r)
        cur = {0: lin[0].retract(rng.normal(size=DIM) * 0.1), 1: lin[1].retract(rng.normal(size=DIM) * 0.1)}
        _, Ja = prior.residual(cur, jacobians=True)

        def f(d):
            return prior.residual({0: cur[0].retract(d[:DIM]), 1: cur[1].retract(d[DIM:])})

        ok, err = jac_close(Ja, numerical_jacobian(f, np.zeros(2 * DIM), H))
        assert ok, err


def test_prior_anchor_zero_at_linearization_point():
    rng = np.random.default_rng(15)
    s = random_state(rng, 4)
    prior = PriorFactor.anchor(s, np.full(DIM, 0.1))
    np.testing.assert_allclose(prior.residual({4: s}), 0.0)
    d = np.zeros(DIM)
    d[0] = 0.1
    assert prior.residual({4: s.retract(d)})[0] == pytest.approx(1.0)
