import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from formssl import triplets as TR
from formssl.errors import InsufficientVideos, NoCandidates
from formssl.trajectory import HalfCycle, Repetition, Trajectory


def traj(vid, phases, valid=None):
    phases = np.asarray(phases, dtype=float)
    valid = np.ones(len(phases), bool) if valid is None else np.asarray(valid, bool)
    return Trajectory(vid, np.full(len(phases), np.nan), phases, valid)


def brute_force_mine(trajs, delta, eps, mode, per_anchor, seed, cross_video_negatives=False):
    """Quadratic reference: explicit loops over every (anchor, candidate) pair."""
    frames = [(k, t.video_id, f, float(t.phase[f]))
              for k, t in enumerate(trajs) for f in range(len(t.phase)) if t.valid_mask[f]]
    rng = np.random.default_rng(seed)
    out, cand = [], []
    for (ka, va, fa, pa) in frames:
        pos, neg = [], []
        for (kb, vb, fb, pb) in frames:
            gap = abs(pa - pb)
            if mode == "cvcspc":
                if kb != ka and gap <= eps:
                    pos.append((vb, fb, pb))
                if gap > delta and (not cross_video_negatives or kb != ka):
                    neg.append((vb, fb, pb))
            else:
                if kb == ka and fb != fa and gap <= eps:
                    pos.append((vb, fb, pb))
                if kb == ka and gap > delta:
                    neg.append((vb, fb, pb))
        cand.append(((va, fa), [p[:2] for p in pos], [n[:2] for n in neg]))
        if not pos or not neg:
            continue
        k = min(per_anchor, len(pos))
        ps = rng.choice(len(pos), size=k, replace=False)
        ns = rng.integers(0, len(neg), size=k)
        for a, b in zip(ps, ns):
            p, n = pos[a], neg[b]
            out.append(TR.PoseTriplet((va, fa), p[:2], n[:2], (pa, p[2], n[2])))
    return out, cand


def random_corpus(rng):
    n_videos = int(rng.integers(2, 11))
    out = []
    for k in range(n_videos):
        n = int(rng.integers(2, 101))
        # coarse grid so that equal and near-equal phases actually occur
        phase = rng.integers(-36, 37, size=n) * 5.0 + rng.choice([0.0, 0.5, 2.5], size=n)
        valid = rng.random(n) > 0.1
        out.append(traj(f"v{k}", phase, valid))
    return out


# ------------------------------------------------------------------ mining

@pytest.mark.parametrize("mode", ["cvcspc", "vanilla"])
def test_mining_matches_brute_force(mode):
    rng = np.random.default_rng(99)
    for case in range(20):
        trajs = random_corpus(rng)
        per_anchor = int(rng.integers(1, 4))
        seed = int(rng.integers(0, 2**31))
        got = TR.mine_pose_triplets(trajs, 30.0, 5.0, mode, per_anchor, seed)
        want, cand = brute_force_mine(trajs, 30.0, 5.0, mode, per_anchor, seed)
        assert got == want, f"case {case}"
        for anchor, pos, neg in cand[:: max(1, len(cand) // 25)]:
            assert TR.candidate_sets(trajs, anchor, 30.0, 5.0, mode) == (pos, neg)


def test_cross_video_negative_flag_matches_brute_force():
    trajs = random_corpus(np.random.default_rng(5))
    got = TR.mine_pose_triplets(trajs, 30.0, 5.0, "cvcspc", 2, 3, cross_video_negatives=True)
    want, _ = brute_force_mine(trajs, 30.0, 5.0, "cvcspc", 2, 3, cross_video_negatives=True)
    assert got == want
    assert all(t.negative[0] != t.anchor[0] for t in got)


def test_two_video_grid_candidates():
    grid = [-180, -90, 0, 90, 180]
    trajs = [traj("A", grid), traj("B", grid)]
    pos, neg = TR.candidate_sets(trajs, ("A", 2))
    assert pos == [("B", 2)]
    assert neg == [(v, f) for v in "AB" for f in (0, 1, 3, 4)]


def test_zero_tolerance_needs_exact_phase():
    trajs = [traj("A", [0.0, 10.0, 50.0]), traj("B", [0.0, 10.0000001, 50.0])]
    pos, _ = TR.candidate_sets(trajs, ("A", 1), epsilon_pos=0.0)
    assert pos == []
    pos, _ = TR.candidate_sets(trajs, ("A", 0), epsilon_pos=0.0)
    assert pos == [("B", 0)]


def test_vanilla_three_frame_instance_has_no_positive():
    trajs = [traj("A", [-180, 0, 180])]
    with pytest.raises(NoCandidates):
        TR.candidate_sets(trajs, ("A", 1), mode="vanilla", strict=True)
    report = {}
    assert TR.mine_pose_triplets(trajs, mode="vanilla", report=report) == []
    assert report == {"anchors": 3, "skipped": 3, "triplets": 0}


def test_cvcspc_needs_two_videos():
    with pytest.raises(InsufficientVideos):
        TR.mine_pose_triplets([traj("A", [0, 100])])


def test_bad_thresholds_rejected():
    with pytest.raises(ValueError):
        TR.mine_pose_triplets([traj("A", [0]), traj("B", [0])], delta=5, epsilon_pos=5)


def test_invalid_frames_never_used():
    trajs = [traj("A", [0, 0, 100, 100], [True, False, True, True]),
             traj("B", [0, 0, 100, 100], [True, True, False, True])]
    for t in TR.mine_pose_triplets(trajs, per_anchor=3):
        for leg in (t.anchor, t.positive, t.negative):
            assert leg not in {("A", 1), ("B", 2)}


def test_anchor_stride():
    trajs = [traj("A", np.linspace(-180, 180, 20)), traj("B", np.linspace(-180, 180, 20))]
    got = TR.mine_pose_triplets(trajs, anchor_stride=4)
    assert {t.anchor[1] % 4 for t in got} == {0}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["cvcspc", "vanilla"]), st.integers(1, 3))
def test_emitted_triplets_satisfy_invariants(seed, mode, per_anchor):
    rng = np.random.default_rng(seed)
    trajs = random_corpus(rng)
    store = {t.video_id: t.phase for t in trajs}
    got = TR.mine_pose_triplets(trajs, 30.0, 5.0, mode, per_anchor, seed)
    for t in got:
        pa, pp, pn = (store[v][f] for v, f in (t.anchor, t.positive, t.negative))
        assert (pa, pp, pn) == t.phases
        assert abs(pa - pp) <= 5.0 and abs(pa - pn) > 30.0
        assert t.anchor != t.positive
        if mode == "cvcspc":
            assert t.positive[0] != t.anchor[0]
        else:
            assert t.anchor[0] == t.positive[0] == t.negative[0]


def test_pose_manifest_round_trip_is_byte_stable(tmp_path):
    trajs = random_corpus(np.random.default_rng(1))
    got = TR.mine_pose_triplets(trajs, seed=4)
    TR.write_pose_triplets(tmp_path / "a.jsonl", got, "h")
    TR.write_pose_triplets(tmp_path / "b.jsonl", TR.mine_pose_triplets(trajs, seed=4), "h")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert TR.load_pose_triplets(tmp_path / "a.jsonl") == got


# ---------------------------------------------------------- clip sampling

def rational_clip_indices(start, end, n):
    """round-half-up of linspace(start, end-1, n) in exact rational arithmetic."""
    return [math.floor(Fraction(start) + Fraction(k * (end - 1 - start), n - 1) + Fraction(1, 2))
            for k in range(n)]


def test_clip_indices_48_frames():
    assert TR.sample_clip_indices((0, 48), 16) == [0, 3, 6, 9, 13, 16, 19, 22, 25, 28, 31, 34, 38, 41, 44, 47]


def test_clip_indices_identity():
    assert TR.sample_clip_indices(HalfCycle("v", 0, 16, "descent"), 16) == list(range(16))


def test_clip_indices_two_frames():
    assert TR.sample_clip_indices((0, 2), 16) == [0] * 8 + [1] * 8


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 500), st.integers(2, 300), st.integers(2, 40))
def test_clip_indices_match_rational_oracle(start, length, n):
    got = TR.sample_clip_indices((start, start + length), n)
    assert got == rational_clip_indices(start, start + length, n)
    assert got[0] == start and got[-1] == start + length - 1
    assert all(b >= a for a, b in zip(got, got[1:]))
    if length >= n:
        assert all(b > a for a, b in zip(got, got[1:]))


# -------------------------------------------------------------- MD triplets

def reps_from_phase(n_reps, half=20):
    out = []
    for r in range(n_reps):
        s = 2 * half * r
        out.append(Repetition("v", HalfCycle("v", s, s + half, "descent"),
                              HalfCycle("v", s + half, s + 2 * half, "ascent")))
    return out


def test_md_determinism_and_structure():
    reps = reps_from_phase(3)
    a = TR.build_md_triplets(reps, 16, seed=7)
    assert a == TR.build_md_triplets(reps, 16, seed=7)
    assert len(a) == 3
    for t, r in zip(a, reps):
        assert t.anchor.frame_indices == t.positive.frame_indices == tuple(TR.sample_clip_indices(r.descent))
        assert t.negative.frame_indices == tuple(TR.sample_clip_indices(r.ascent))
        assert t.positive.augmentation_seed != t.anchor.augmentation_seed
        if t.reverse_target == "anchor_and_positive":
            assert t.anchor.reversed and t.positive.reversed and not t.negative.reversed
        else:
            assert not t.anchor.reversed and not t.positive.reversed and t.negative.reversed


def test_md_reverse_target_balance():
    reps = reps_from_phase(10_000, half=4)
    trips = TR.build_md_triplets(reps, 4, seed=2024)
    frac = np.mean([t.reverse_target == "negative" for t in trips])
    assert 0.48 <= frac <= 0.52


def test_md_global_motion_matches_after_reversal():
    t = np.arange(200)
    phase = 180 * np.cos(2 * np.pi * t / 40)
    reps = [Repetition("v", HalfCycle("v", s, s + 20, "descent"), HalfCycle("v", s + 20, s + 40, "ascent"))
            for s in range(0, 200, 40)]
    for trip in TR.build_md_triplets(reps, 16, seed=3):
        dirs = []
        for spec in (trip.anchor, trip.negative):
            idx = list(spec.frame_indices)[::-1] if spec.reversed else list(spec.frame_indices)
            dirs.append(np.sign(phase[idx[-1]] - phase[idx[0]]))
        assert dirs[0] == dirs[1] != 0


def test_clip_manifest_round_trip(tmp_path):
    trips = TR.build_md_triplets(reps_from_phase(4), 16, seed=1)
    TR.write_clip_triplets(tmp_path / "c.jsonl", trips, "h")
    assert TR.load_clip_triplets(tmp_path / "c.jsonl") == trips


# ---------------------------------------------------------------- clips ops

def test_temporal_reverse_examples(rng):
    f = rng.integers(0, 255, size=(3, 4, 4, 3), dtype=np.uint8)
    np.testing.assert_array_equal(TR.temporal_reverse(f), f[[2, 1, 0]])
    np.testing.assert_array_equal(TR.temporal_reverse(f[:1]), f[:1])
    np.testing.assert_array_equal(TR.temporal_reverse(TR.temporal_reverse(f)), f)


def test_identity_plan_is_bitwise_identity(rng):
    clip = rng.integers(0, 255, size=(5, 16, 16, 3), dtype=np.uint8)
    np.testing.assert_array_equal(TR.apply_augmentations(clip, TR.AugmentationPlan.identity()), clip)
    plan = TR.make_plan(12, TR.AugmentationConfig.off())
    assert plan == TR.AugmentationPlan.identity()


def test_channel_swap_red_to_blue():
    red = np.zeros((1, 4, 4, 3), np.uint8)
    red[..., 0] = 255
    out = TR.apply_augmentations(red, TR.AugmentationPlan(channel_perm=(2, 1, 0)))
    assert (out[..., 2] == 255).all() and (out[..., :2] == 0).all()


def test_flip_is_involution(rng):
    clip = rng.integers(0, 255, size=(3, 8, 8, 3), dtype=np.uint8)
    plan = TR.AugmentationPlan(flip=True)
    np.testing.assert_array_equal(TR.apply_augmentations(TR.apply_augmentations(clip, plan), plan), clip)


def test_translation_moves_pixels():
    clip = np.zeros((1, 8, 8, 3), np.uint8)
    clip[0, 2, 3] = 200
    out = TR.apply_augmentations(clip, TR.AugmentationPlan(translate=(2, 1)))
    assert out[0, 3, 5, 0] == 200 and out.sum() == 600


def test_temporal_shift_clamps():
    clip = np.arange(4, dtype=np.uint8)[:, None, None, None] * np.ones((4, 2, 2, 3), np.uint8)
    out = TR.apply_augmentations(clip, TR.AugmentationPlan(temporal_shift=2))
    assert out[:, 0, 0, 0].tolist() == [2, 3, 3, 3]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_plans_are_pure_bounded_and_spatially_consistent(seed):
    cfg = TR.AugmentationConfig(p_flip=1, p_mask=1, p_translate=1, p_rotate=1, p_blur=1, p_zoom=1,
                                p_channel_swap=1, p_temporal_shift=0)
    plan = TR.make_plan(seed, cfg)
    assert plan == TR.make_plan(seed, cfg)
    assert abs(plan.rotation_deg) <= cfg.max_rotation_deg
    assert all(abs(v) <= cfg.max_translate_px for v in plan.translate)
    assert cfg.zoom_range[0] <= plan.zoom <= cfg.zoom_range[1]
    top, left, mh, mw = plan.mask
    assert 0 <= top <= 1 - mh and 0 <= left <= 1 - mw
    frame = np.random.default_rng(seed).integers(0, 255, size=(12, 12, 3), dtype=np.uint8)
    clip = np.stack([frame] * 3)
    out = TR.apply_augmentations(clip, plan)
    assert out.shape == clip.shape and out.dtype == np.uint8
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], out[2])
    np.testing.assert_array_equal(TR.apply_augmentations(frame, plan), out[0])


def test_materialize_clip_epochs():
    frames = np.random.default_rng(0).integers(0, 255, size=(10, 8, 8, 3), dtype=np.uint8)
    source = lambda vid, idx: frames[idx]
    spec = TR.ClipSpec("v", (1, 2, 3), reversed=True, augmentation_seed=5)
    np.testing.assert_array_equal(TR.materialize_clip(spec, source), frames[[3, 2, 1]])
    cfg = TR.AugmentationConfig.color_only()
    e0 = TR.materialize_clip(spec, source, cfg)
    assert np.array_equal(e0, TR.materialize_clip(spec, source, cfg, epoch=0))
    plans = {TR.make_plan(s, cfg).channel_perm for s in ([5, 1], [5, 2], [5, 3], [5, 4], [5, 5])}
    assert len(plans) > 1
    e1 = TR.materialize_clip(spec, source, cfg, epoch=1)
    want = TR.apply_augmentations(frames[[3, 2, 1]], TR.make_plan([5, 1], cfg))
    np.testing.assert_array_equal(e1, want)
