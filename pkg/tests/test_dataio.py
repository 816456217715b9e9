import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionshift import dataio as di
from motionshift.simkit import TrajectoryScene


def scene_from(tracks, scene_id="s", env_id="e"):
    """``tracks`` is (T, M, 2); NaN marks absence."""
    tracks = np.asarray(tracks, float)
    return TrajectoryScene(scene_id, env_id, 0.4, np.arange(tracks.shape[0]), list(range(tracks.shape[1])), tracks)


def straight(n, start=(0.0, 0.0), vel=(0.5, 0.2)):
    return np.asarray(start) + np.arange(n)[:, None] * np.asarray(vel)


def test_single_agent_twenty_frames(tmp_path):
    path = tmp_path / "a.tsv"
    path.write_text("".join(f"{f * 10}\t1\t{0.1 * f:.6f}\t0.000000\n" for f in range(20)))
    scenes = di.load_tsv(path)
    assert len(scenes) == 1 and scenes[0].positions.shape == (20, 1, 2)


def test_round_trip(tmp_path, rng):
    pos = np.round(rng.normal(size=(25, 3, 2)) * 5, 6)
    pos[:4, 2] = np.nan
    path = tmp_path / "rt.tsv"
    di.write_tsv([scene_from(pos)], path)
    (back,) = di.load_tsv(path)
    np.testing.assert_array_equal(back.positions, pos)


def test_scenes_split_at_gaps(tmp_path):
    path = tmp_path / "two.tsv"
    di.write_tsv([scene_from(straight(20)[:, None]), scene_from(straight(22)[:, None])], path)
    assert [s.n_frames for s in di.load_tsv(path)] == [20, 22]


@pytest.mark.parametrize("body, line", [
    ("0\t1\t0.0\t0.0\n1\t1\t0.0\n", 2),
    ("0\t1\t0.0\t0.0\n1\t1\tabc\t0.0\n", 2),
    ("5\t1\t0.0\t0.0\n6\t1\t0.0\t0.0\n4\t1\t0.0\t0.0\n", 3),
])
def test_malformed_rows_report_line(tmp_path, body, line):
    path = tmp_path / "bad.tsv"
    path.write_text(body)
    with pytest.raises(di.TrajectoryFormatError) as err:
        di.load_tsv(path)
    assert err.value.line_no == line


def test_two_agents_each_get_the_other_as_neighbor():
    a, b = straight(20), straight(20, start=(1.0, 3.0), vel=(-0.3, 0.1))
    windows = di.window_scenes([scene_from(np.stack([a, b], axis=1))])
    assert len(windows) == 2
    w0, w1 = windows
    np.testing.assert_allclose(w0.neighbors[0], b[:8] - a[:8])
    np.testing.assert_allclose(w1.neighbors[0], a[:8] - b[:8])
    assert w0.neighbor_mask.tolist() == [True] + [False] * 4
    np.testing.assert_allclose(w0.past, a[:8] - a[7])
    np.testing.assert_allclose(w0.future, a[8:] - a[7])
    np.testing.assert_allclose(w0.style_neighbor, b - a[7])


@pytest.mark.parametrize("length, expected", [(20, 1), (25, 6), (19, 0)])
def test_window_counts(length, expected):
    tracks = np.stack([straight(length), straight(length, start=(5, 5))], axis=1)
    assert len(di.window_scenes([scene_from(tracks)])) == 2 * expected


def test_neighbor_order_matches_brute_force(rng):
    tracks = rng.normal(size=(20, 4, 2)) * 3
    windows = di.window_scenes([scene_from(tracks)])
    for w in windows:
        m = w.agent_id
        others = [j for j in range(4) if j != m]
        brute = sorted(others, key=lambda j: np.linalg.norm(tracks[7, j] - tracks[7, m]))
        assert list(w.neighbor_ids) == brute


def test_window_permutation_property(rng):
    scenes = [scene_from(rng.normal(size=(22, 3, 2)), scene_id=f"s{i}") for i in range(4)]
    base = {(w.scene_id, w.agent_id, w.start_frame): w for w in di.window_scenes(scenes)}
    perm = di.window_scenes([scenes[i] for i in (2, 0, 3, 1)])
    assert len(perm) == len(base)
    for w in perm:
        ref = base[(w.scene_id, w.agent_id, w.start_frame)]
        assert np.array_equal(w.past, ref.past) and np.array_equal(w.neighbors, ref.neighbors)


def test_sigma_straight_line_equals_alpha():
    sigma = di.curvature_sigma(straight(20), alpha=3.0)
    assert np.all(sigma == 3.0)


def test_sigma_substitution():
    # alpha=2, gamma=0.25: velocity change of 0.5 along x after the lag
    vel = np.zeros((19, 2))
    vel[:8, 0], vel[8:, 0] = 1.0, 1.5
    traj = np.concatenate([np.zeros((1, 2)), np.cumsum(vel, axis=0)])
    assert di.curvature_sigma(traj, alpha=2.0)[0] == pytest.approx(2.5, abs=1e-12)


def test_sigma_right_angle_turn():
    # 9 unit steps along x, then unit steps along y; the first gamma pairs (1,0) with (0,1)
    xs = [(float(i), 0.0) for i in range(10)]
    ys = [(9.0, float(j)) for j in range(1, 11)]
    traj = np.array(xs + ys)
    alpha = 1.7
    sigma = di.curvature_sigma(traj, alpha=alpha, lag=8)
    vel = np.diff(traj, axis=0)
    gamma = ((vel[8:] - vel[:-8]) ** 2).sum(axis=1)
    assert 2.0 in gamma
    t = int(np.argmax(gamma == 2.0))
    assert sigma[t] == pytest.approx(3 * alpha, abs=1e-12)
    # the last frames reuse the last defined gamma
    assert sigma[-1] == sigma[len(gamma) - 1]


def test_sigma_too_short():
    with pytest.raises(di.DataError):
        di.curvature_sigma(straight(9), alpha=1.0)
    with pytest.raises(ValueError):
        di.curvature_sigma(straight(20), alpha=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_sigma_linear_in_alpha_and_translation_invariant(seed, alpha):
    traj = np.random.default_rng(seed).normal(size=(20, 2))
    s1 = di.curvature_sigma(traj, alpha)
    assert np.array_equal(di.curvature_sigma(traj, 2 * alpha), 2 * s1)
    np.testing.assert_allclose(di.curvature_sigma(traj + 7.25, alpha), s1, rtol=1e-12)


def test_sigma_time_reversal():
    traj = np.random.default_rng(3).normal(size=(20, 2))
    fwd = di.curvature_sigma(traj, 1.0)
    rev = di.curvature_sigma(traj[::-1], 1.0)
    # gamma at t pairs velocities t and t+lag; reversal maps that pair to index n-2-lag-t
    n_gamma = 20 - 1 - 8
    np.testing.assert_allclose(rev[:n_gamma], fwd[:n_gamma][::-1], rtol=1e-12)


def test_spurious_environments_tags(rng):
    scenes = {s: [scene_from(rng.normal(size=(22, 2, 2)))] for s in ("hotel", "univ", "zara1", "zara2")}
    envs = di.make_spurious_environments(scenes)
    assert sorted(envs) == ["hotel-a1", "univ-a2", "zara1-a4", "zara2-a8"]
    w = envs["zara1-a4"][0]
    assert w.has_sigma and np.all(w.past[:, 2] >= 4.0)


def test_spurious_sweep_has_seven_copies(rng):
    sweep = di.spurious_test_sweep([scene_from(rng.normal(size=(22, 2, 2)))])
    assert list(sweep) == [f"eth-a{a:g}" for a in (1, 2, 4, 8, 16, 32, 64)]
    s1, s64 = sweep["eth-a1"][0].past[:, 2], sweep["eth-a64"][0].past[:, 2]
    np.testing.assert_allclose(s64, 64 * s1, rtol=1e-12)


def test_spurious_guards(rng):
    scenes = {"hotel": [scene_from(rng.normal(size=(22, 2, 2)))]}
    with pytest.raises(di.DataError):
        di.make_spurious_environments({"nowhere": scenes["hotel"]}, {"nowhere": 1.0})
    with pytest.raises(ValueError):
        di.make_spurious_environments(scenes, {"hotel": 0.0})
    with pytest.raises(ValueError):
        di.EnvironmentTag("x", "spurious", 0.0)


def test_stack_windows_shapes(rng):
    windows = di.window_scenes([scene_from(rng.normal(size=(21, 3, 2)))])
    arr = di.stack_windows(windows)
    assert arr.inputs.shape == (6, di.input_dim(False))
    assert arr.style_features.shape == (6, di.STYLE_DIM)
    assert np.all(arr.neighbor_window >= 0)
    i = 0
    j = arr.neighbor_window[i]
    assert windows[j].agent_id == windows[i].neighbor_ids[0] and windows[j].start_frame == windows[i].start_frame
