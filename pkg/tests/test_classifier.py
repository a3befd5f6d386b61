import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import stats

from dynba.classifier import (CV_TARGET, ClassifierConfig, DegenerateLine, DegenerateTranslation,
                              EpipolarLine, InsufficientTracks, LandmarkLabel, TrackScore, ZeroTranslation,
                              classify_pair, credibility_factor, eliminate, eliminate_arrays,
                              epipolar_precision, mark_candidates, min_projection_error, preprocess_frame_pair, removal_update,
                              score_arrays, score_tracks)
from dynba.geometry import CameraIntrinsics, Pose, Rotation, so3_exp
from dynba.imu_preint import GRAVITY, ExtrinsicCalib, ImuNoiseParams, arrays_to_samples, preintegrate

from oracles import grid_min_projection, lagrange_min_projection, population_stats

INTR = CameraIntrinsics()


def static_scene(rng, n, t_norm=0.3, noise=0.0):
    """Tracks of static points between two frames; returns ids, pk, pk1, rel pose, points."""
    rel = Pose(so3_exp(rng.normal(size=3) * 0.02), rng.normal(size=3))
    rel = Pose(rel.rotation, rel.t / np.linalg.norm(rel.t) * t_norm)
    pts, pk, pk1 = [], [], []
    while len(pts) < n:
        P = np.array([rng.uniform(-8, 8), rng.uniform(-6, 6), rng.uniform(3, 30)])
        P1 = rel.inverse().apply(P)
        if P1[2] < 1:
            continue
        u0 = INTR.K @ (P / P[2])
        u1 = INTR.K @ (P1 / P1[2])
        if not (INTR.in_image(u0[:2]) and INTR.in_image(u1[:2])):
            continue
        pts.append(P)
        pk.append(u0[:2])
        pk1.append(u1[:2])
    pk = np.array(pk) + rng.normal(size=(n, 2)) * noise
    pk1 = np.array(pk1) + rng.normal(size=(n, 2)) * noise
    return np.arange(n), pk, pk1, rel, np.array(pts)


# -- epipolar precision ----------------------------------------------------------

def test_noise_free_static_precision_is_zero(rng):
    ids, pk, pk1, rel, _ = static_scene(rng, 50)
    for a, b in zip(pk, pk1):
        assert abs(epipolar_precision(a, b, rel, INTR).e) < 1e-10


def test_displacement_along_normal(rng):
    ids, pk, pk1, rel, _ = static_scene(rng, 20)
    for a, b in zip(pk, pk1):
        line = epipolar_precision(a, b, rel, INTR)
        nrm = math.hypot(line.a, line.b)
        moved = b + 2.0 * np.array([line.a, line.b]) / nrm
        line2 = epipolar_precision(a, moved, rel, INTR)
        assert line2.e == pytest.approx(2.0 * nrm, rel=1e-9, abs=1e-12)
        # e = [a, b, c] . [u, v, 1]
        assert line2.e == pytest.approx(line2.a * moved[0] + line2.b * moved[1] + line2.c, rel=1e-12, abs=1e-15)


def test_degenerate_translation():
    with pytest.raises(DegenerateTranslation):
        epipolar_precision([300, 200], [310, 200], Pose(so3_exp([0, 0.1, 0]), [0, 0, 0]), INTR)


# -- minimum projection error --------------------------------------------------------

def test_min_projection_zero():
    assert min_projection_error(EpipolarLine(1.0, 2.0, 0.0, 0.0)) == 0.0


def test_min_projection_hand_case():
    line = EpipolarLine(3.0, 4.0, 0.0, 10.0)
    assert min_projection_error(line) == 4.0
    assert lagrange_min_projection(3, 4, 10) == pytest.approx(4.0, rel=1e-12)
    g, step = grid_min_projection(3, 4, 10)
    assert abs(g - 4.0) <= 4 * step * 2


def test_min_projection_degenerate_line():
    with pytest.raises(DegenerateLine):
        min_projection_error(EpipolarLine(0.0, 0.0, 1.0, 1.0))


coef = st.floats(-100, 100, allow_nan=False).filter(lambda x: abs(x) > 1e-3)


@given(coef, coef, st.floats(-100, 100, allow_nan=False))
def test_min_projection_matches_oracles(a, b, e):
    d = min_projection_error(EpipolarLine(a, b, 0.0, e))
    lag = lagrange_min_projection(a, b, e)
    assert d == pytest.approx(lag, rel=1e-9, abs=1e-12)
    g, step = grid_min_projection(a, b, e)
    # the grid minimum overestimates by at most one step of the optimum slope
    assert d <= g + 1e-12
    assert g - d <= 2 * math.sqrt(d) * step * math.hypot(1, max(abs(a), abs(b)) / min(abs(a), abs(b))) + step ** 2 * 10


# -- credibility factor -------------------------------------------------------------

def test_credibility_examples():
    assert credibility_factor(0.0, 0.5) == 1.0
    assert credibility_factor(0.01, 0.2) == pytest.approx(2.25)
    assert credibility_factor(0.01, 1e9) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ZeroTranslation):
        credibility_factor(0.01, 0.0)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_credibility_monotone(v1, v2, t1, t2):
    lo, hi = sorted((v1, v2))
    assert credibility_factor(lo, t1) <= credibility_factor(hi, t1)
    ts, tl = sorted((t1, t2))
    assert credibility_factor(v1, ts) >= credibility_factor(v1, tl)
    assert credibility_factor(v1, t1) >= 1.0


# -- scoring ------------------------------------------------------------------

def test_noise_free_scores_vanish(rng):
    ids, pk, pk1, rel, _ = static_scene(rng, 100)
    scores = score_tracks(list(zip(pk, pk1, ids)), rel, INTR, 0.0)
    assert max(s.d_s for s in scores) < 1e-9
    for s in scores:
        assert s.sigma >= 1 and s.d_raw >= 0
        assert s.d_s == pytest.approx(s.d_raw / s.sigma, rel=1e-12, abs=1e-300)


def test_transverse_mover_dominates(rng):
    ids, pk, pk1, rel, _ = static_scene(rng, 60, noise=0.5)
    pos_var = 0.0004
    line = epipolar_precision(pk[7], pk1[7] - 0.0, rel, INTR)
    nrm = math.hypot(line.a, line.b)
    pk1 = pk1.copy()
    pk1[7] = pk1[7] + 10.0 * np.array([line.a, line.b]) / nrm - line.e / nrm * np.array([line.a, line.b]) / nrm
    batch = score_arrays(ids, pk, pk1, rel, INTR, pos_var)
    sigma = credibility_factor(pos_var, np.linalg.norm(rel.t))
    assert batch.d_s[7] == pytest.approx(100.0 / sigma, rel=1e-9)
    assert np.argmax(batch.d_s) == 7


def test_score_tracks_requires_input():
    with pytest.raises(ValueError):
        score_tracks([], Pose(Rotation(), [1, 0, 0]), INTR, 0.0)


def test_chi_square_sampling(rng):
    # per-pixel sigma 1/sqrt(2) in each frame gives unit variance on the
    # frame-to-frame displacement, so d_s should follow chi2(1)
    d = []
    for _ in range(25):
        ids, pk, pk1, rel, _ = static_scene(rng, 100, t_norm=0.5, noise=1 / math.sqrt(2))
        d.append(score_arrays(ids, pk, pk1, rel, INTR, 0.0).d_s)
    d = np.concatenate(d)
    assert len(d) >= 2000
    assert abs(d.mean() - 1.0) < 0.1
    assert abs(population_stats(d)[2] - CV_TARGET) < 0.15
    assert stats.kstest(d, stats.chi2(1).cdf).statistic < 0.05


# -- elimination ----------------------------------------------------------------

def scores_from(values):
    return [TrackScore(i, float(v), 1.0, float(v)) for i, v in enumerate(values)]


def test_eliminate_single_outlier():
    removed, trace = eliminate(scores_from([0.1, 0.2, 0.3, 50]))
    assert removed == [3]
    assert trace[0].cv == pytest.approx(population_stats([0.1, 0.2, 0.3, 50])[2], rel=1e-12)
    assert trace[0].cv == pytest.approx(1.705, abs=1e-3)
    assert trace[-1].cv == pytest.approx(0.408, abs=1e-3)


def test_eliminate_gate_blocks_small_values():
    removed, trace = eliminate(scores_from([0.01, 0.02, 0.05, 3.9, 4.0]))
    assert removed == []
    assert len(trace) == 1


def test_removal_recursion_hand_case():
    mu, var, _ = population_stats([1, 2, 9])
    assert (mu, var) == (pytest.approx(4.0), pytest.approx(38 / 3))
    mu2, var2 = removal_update(3, mu, var, 9.0)
    assert mu2 == pytest.approx(1.5, rel=1e-12)
    assert var2 == pytest.approx(0.25, rel=1e-12)


def test_eliminate_trace_starts_with_full_set():
    d = [1, 2, 9, 400]
    removed, trace = eliminate(scores_from(d))
    mu, var, cv = population_stats(d)
    assert trace[0].n == 4 and trace[0].mu == pytest.approx(mu) and trace[0].var == pytest.approx(var)
    assert removed == [3]
    assert trace[1].mu == pytest.approx(4.0) and trace[1].var == pytest.approx(38 / 3)


def test_eliminate_insufficient_tracks():
    with pytest.raises(InsufficientTracks):
        eliminate(scores_from([1, 2, 100]))
    with pytest.raises(ValueError):
        eliminate(scores_from([1, 2, 3, 100]), lambda_dy=0.0)


positive = st.floats(1e-3, 1e3, allow_nan=False)
d_lists = st.lists(positive, min_size=4, max_size=60)


LD_EPS = float(np.finfo(np.longdouble).eps)


@given(d_lists)
def test_elimination_trace_matches_direct_statistics(d):
    ids = np.arange(len(d))
    removed, trace = eliminate_arrays(ids, d)
    remaining = list(d)
    by_id = dict(zip(ids, d))
    var0 = trace[0].var
    for k, stt in enumerate(trace):
        mu, var, cv = population_stats(remaining)
        assert stt.n == len(remaining)
        assert stt.mu == pytest.approx(mu, rel=1e-9)
        # removing a dominant value cancels digits; the recursion cannot do
        # better than the rounding of the initial variance
        assert abs(stt.var - var) <= 1e-9 * var + 64 * LD_EPS * var0 + 1e-300
        if k < len(removed):
            remaining.remove(by_id[removed[k]])


@given(d_lists)
def test_elimination_cv_strictly_decreasing_and_descending_order(d):
    ids = np.arange(len(d))
    removed, trace = eliminate_arrays(ids, d)
    cvs = [s.cv for s in trace]
    assert all(b < a for a, b in zip(cvs, cvs[1:]))
    assert cvs[-1] <= cvs[0]
    vals = [d[i] for i in removed]
    assert vals == sorted(vals, reverse=True)
    # removed values are the top of the ranking and all exceed the gate
    if removed.size:
        assert min(vals) >= max([d[i] for i in ids if i not in set(removed)] or [0])
        assert all(v > 4.0 for v in vals)
    # stop rule: either CV reached the target, the next value is gated, or CV would not drop
    rest = sorted([d[i] for i in ids if i not in set(removed)], reverse=True)
    if len(rest) > 2 and cvs[-1] > CV_TARGET and rest[0] > 4.0:
        assert population_stats(rest[1:])[2] >= cvs[-1] - 1e-12


@given(d_lists, st.randoms(use_true_random=False))
def test_elimination_permutation_invariant(d, rnd):
    ids = np.arange(len(d))
    removed, _ = eliminate_arrays(ids, d)
    perm = list(range(len(d)))
    rnd.shuffle(perm)
    removed_p, _ = eliminate_arrays(ids[perm], np.asarray(d)[perm])
    assert list(removed_p) == list(removed)


@given(d_lists, st.floats(0.01, 100))
def test_elimination_scale_invariant_with_scaled_gate(d, c):
    ids = np.arange(len(d))
    removed, _ = eliminate_arrays(ids, d, lambda_dy=4.0)
    scaled, _ = eliminate_arrays(ids, np.asarray(d) * c, lambda_dy=4.0 * c)
    assume(all(abs(v * c - 4.0 * c) > 1e-9 * c for v in d))
    assert set(scaled) == set(removed)


def test_elimination_recursion_random_sequences():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        x = rng.chisquare(1, rng.integers(5, 40)) * rng.choice([1, 30], p=[0.8, 0.2])
        xl = x.astype(np.longdouble)
        mu, var = xl.mean(), xl.var()
        rest = list(x)
        while len(rest) > 4:
            v = rest.pop(rng.integers(len(rest)))
            mu, var = removal_update(len(rest) + 1, mu, var, v)
            dmu, dvar, _ = population_stats(rest)
            assert mu == pytest.approx(dmu, rel=1e-9)
            assert var == pytest.approx(dvar, rel=1e-9, abs=1e-9 * dmu * dmu)


# -- candidates -------------------------------------------------------------------

def test_mark_candidates_threshold():
    labels = mark_candidates([TrackScore(1, 1.2, 1.0, 1.2), TrackScore(2, 0.0, 1.0, 0.0),
                              TrackScore(3, 1.0, 1.0, 1.0), TrackScore(4, 1.2, 2.0, 0.6)])
    assert labels[1] is LandmarkLabel.DYNAMIC_CANDIDATE
    assert labels[2] is LandmarkLabel.STATIC
    assert labels[3] is LandmarkLabel.STATIC
    # the candidate gate uses the unscaled error
    assert labels[4] is LandmarkLabel.DYNAMIC_CANDIDATE


def test_label_is_dynamic():
    assert not LandmarkLabel.STATIC.is_dynamic
    assert all(l.is_dynamic for l in LandmarkLabel if l is not LandmarkLabel.STATIC)


# -- frame-pair preprocessing ----------------------------------------------------

def test_classify_noise_free_all_static(rng):
    ids, pk, pk1, rel, _ = static_scene(rng, 80)
    res = classify_pair(ids, pk, pk1, rel, 1e-6, INTR)
    assert res.skipped is None
    assert set(res.labels.values()) == {LandmarkLabel.STATIC}


def test_classify_degenerate_pair_is_skipped(rng):
    ids, pk, pk1, _, _ = static_scene(rng, 10)
    res = classify_pair(ids, pk, pk1, Pose(Rotation(), [0, 0, 0]), 0.0, INTR)
    assert res.skipped == "degenerate_translation"
    assert res.labels == {}


def test_classify_low_credibility_is_skipped(rng):
    ids, pk, pk1, rel, _ = static_scene(rng, 10, t_norm=0.01)
    res = classify_pair(ids, pk, pk1, rel, 1.0, INTR, ClassifierConfig(sigma_max=100))
    assert res.skipped == "low_credibility"


def _imu_for(rel_body: Pose, T=0.1, n=21):
    """Noise-free IMU samples realizing a constant-twist body motion from rest-free start."""
    t = np.linspace(0, T, n)
    w = rel_body.rotation.log() / T
    # constant body-frame velocity along the chord; start velocity chosen so the
    # integrated displacement equals rel_body.t under a constant rotation rate
    g = np.tile(w, (n, 1))
    a = np.array([Rotation.exp(w * ti).inverse().apply(-GRAVITY) for ti in t])
    return arrays_to_samples(t, g, a)


def test_preprocess_with_imu_prior(rng):
    # body at rest-velocity v, no acceleration: prior displacement = v * T
    T = 0.1
    v = np.array([0.0, 0.0, 3.0])
    extr = ExtrinsicCalib()
    samples = arrays_to_samples(np.linspace(0, T, 21), np.zeros((21, 3)), np.tile(-GRAVITY, (21, 1)))
    pre = preintegrate(samples, ImuNoiseParams(1e-4, 1e-3))
    rel = Pose(Rotation(), v * T)
    pts = np.column_stack([rng.uniform(-5, 5, 200), rng.uniform(-4, 4, 200), rng.uniform(4, 25, 200)])
    pk = np.array([INTR.K @ (P / P[2]) for P in pts])[:, :2]
    P1 = pts - rel.t
    pk1 = np.array([INTR.K @ (P / P[2]) for P in P1])[:, :2]
    n_dyn = 40
    dyn = np.arange(n_dyn)
    res0 = classify_pair(np.arange(200), pk, pk1, rel, 0.0, INTR)
    # push dynamic points off their epipolar lines by 6-15 px
    abc = res0.scores.abc
    nrm = np.hypot(abc[:, 0], abc[:, 1])
    pk1 = pk1.copy()
    pk1[dyn] += (abc[dyn, :2] / nrm[dyn, None]) * rng.uniform(6, 15, n_dyn)[:, None]
    pk = pk + rng.normal(size=pk.shape) * 0.5
    pk1 = pk1 + rng.normal(size=pk1.shape) * 0.5
    res = preprocess_frame_pair(np.arange(200), pk, pk1, pre, extr, INTR, R_k=np.eye(3), v_k=v)
    assert res.skipped is None
    flagged = {i for i, l in res.labels.items() if l.is_dynamic}
    removed = set(int(i) for i in res.removed)
    assert len(flagged & set(dyn)) >= 0.9 * n_dyn
    assert len(removed - set(dyn)) <= 0.05 * (200 - n_dyn)
    assert res.cv_post <= res.cv_pre
