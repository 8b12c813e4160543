import numpy as np
import pytest

from evstar.events import parse_event_stream, write_event_stream
from evstar.geom import angular_distance, exp_so3, project
from evstar.sim import DEFAULT_INTRINSICS as INTR
from evstar.sim import MotionProfile, StarScene, generate_events, generate_scene


def test_narrow_cap_single_star_on_axis():
    s = generate_scene(1, 1e-6, seed=3)
    assert np.allclose(s.stars[0], [0, 0, 1], atol=1e-8)


def test_scene_determinism_and_visibility():
    a, b = generate_scene(20, 30.0, seed=9), generate_scene(20, 30.0, seed=9)
    assert np.array_equal(a.stars, b.stars)
    assert not np.array_equal(a.stars, generate_scene(20, 30.0, seed=10).stars)
    for s in a.stars:
        x, y = project(s, a.intrinsics)
        assert 0 <= x < a.sensor[0] and 0 <= y < a.sensor[1]
    assert np.allclose(np.linalg.norm(a.stars, axis=1), 1.0)
    assert np.all(np.degrees(np.arccos(a.stars[:, 2])) <= 15.0 + 1e-9)


def test_min_separation():
    s = generate_scene(20, 30.0, seed=1, min_separation_px=10.0)
    pix = np.array([project(v, s.intrinsics) for v in s.stars])
    d = np.hypot(*(pix[:, None] - pix[None]).transpose(2, 0, 1))
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 10.0


@pytest.mark.parametrize("kw", [dict(n_stars=0), dict(n_stars=3, fov_deg=0.0), dict(n_stars=3, fov_deg=91.0)])
def test_scene_validation(kw):
    with pytest.raises(ValueError):
        generate_scene(**kw)


def test_scene_type_validation():
    with pytest.raises(ValueError):
        StarScene(np.array([[0.0, 0.0, 2.0]]), np.ones(1))
    with pytest.raises(ValueError):
        StarScene(np.array([[0.0, 0.0, 1.0]]), np.zeros(1))


def test_profile_validation():
    with pytest.raises(ValueError):
        MotionProfile([(0, [0, 0, 1.0])])
    with pytest.raises(ValueError):
        MotionProfile([])


def test_static_scene_events_stay_put():
    scene = generate_scene(5, 20.0, seed=2)
    sim = generate_events(scene, MotionProfile.constant([0, 0, 0], 200_000), 200_000, 500.0, 0.4, 0.0, seed=2)
    ev = sim.events
    for k, s in enumerate(scene.stars):
        m = sim.star_id == k
        px = project(s, INTR)
        assert np.all(np.hypot(ev.x[m] - px[0], ev.y[m] - px[1]) < 3 * 0.4 * 1.5)  # radial 3 sigma, with slack
        assert np.all(ev.p[m][::2] == 1) and np.all(ev.p[m][1::2] == -1)


def test_relative_truth_about_optical_axis():
    w = np.deg2rad(4.0) * np.array([0, 0, 1.0])
    sim = generate_events(generate_scene(3, 10.0, seed=0), MotionProfile.constant(w, 100_000), 100_000, 100.0)
    R = sim.truth.relative(0, 100_000)
    assert np.rad2deg(angular_distance(R, np.eye(3))) == pytest.approx(0.4, abs=1e-9)
    assert np.abs(R - exp_so3(-0.1 * w)).max() < 1e-12
    assert np.allclose(sim.truth.attitude(0), np.eye(3))


def test_truth_composes_across_segments():
    prof = MotionProfile([(30_000, [0.1, 0, 0]), (50_000, [0, -0.2, 0.05]), (40_000, [0.02, 0.02, 0.3])])
    from evstar.sim import GroundTruth

    gt = GroundTruth(prof, 120_000)
    for a, b, c in [(0, 40_000, 120_000), (10_000, 30_000, 80_000), (0, 30_000, 80_000)]:
        assert np.abs(gt.relative(a, c) - gt.relative(a, b) @ gt.relative(b, c)).max() < 1e-12
    # inside a segment the attitude follows the segment exponential
    assert np.abs(prof.attitude(50_000) - exp_so3(np.array([0, -0.2, 0.05]) * 0.02) @ prof.attitude(30_000)).max() < 1e-12


def test_wobble_returns():
    prof = MotionProfile.wobble([0, 0.1, 0], 400_000, 200_000)
    assert np.allclose(prof.attitude(200_000), np.eye(3), atol=1e-12)
    assert not np.allclose(prof.attitude(100_000), np.eye(3))


def test_outlier_ratio_bookkeeping():
    sim = generate_events(generate_scene(20, 30.0, seed=4), MotionProfile.constant([0, 0, 0.05], 1_000_000),
                          1_000_000, 500.0, 0.5, 0.3, seed=4)
    n = len(sim.events)
    frac = sim.is_outlier.mean()
    assert abs(frac - 0.3) < 4 * np.sqrt(0.3 * 0.7 / n)
    assert np.all(np.diff(sim.events.t) >= 0)


def test_event_count_matches_rate():
    scene = generate_scene(10, 20.0, seed=0)
    counts = [np.bincount(generate_events(scene, MotionProfile.constant([0, 0, 0], 100_000), 100_000, 400.0,
                                          0.3, 0.0, seed=s).star_id, minlength=10) for s in range(40)]
    per_star = np.array(counts, float).ravel()
    expected = 400.0 * 0.1
    assert abs(per_star.mean() - expected) < 3 * per_star.std(ddof=1) / np.sqrt(len(per_star))


def test_star_leaving_view_stops_emitting():
    star = np.array([0.3, 0.0, 1.0]) / np.linalg.norm([0.3, 0.0, 1.0])
    scene = StarScene(star[None], np.ones(1))
    # fast yaw pushes the star out through the right edge
    sim = generate_events(scene, MotionProfile.constant([0, 2.0, 0], 200_000), 200_000, 2000.0, 0.0, 0.0)
    assert 0 < len(sim.events) < 2000.0 * 0.2 * 0.8
    assert sim.events.x.max() < scene.sensor[0]


def test_byte_identical_event_files(tmp_path):
    args = (generate_scene(8, 25.0, seed=6), MotionProfile.constant([0.02, 0.01, 0.05], 150_000), 150_000, 300.0,
            0.5, 0.1)
    for name in ("a", "b"):
        write_event_stream(tmp_path / f"{name}.txt", generate_events(*args, seed=6).events)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    back = parse_event_stream(tmp_path / "a.txt")
    assert len(back) == len(generate_events(*args, seed=6).events)


@pytest.mark.parametrize("kw", [dict(event_rate_per_star_hz=0.0), dict(outlier_ratio=1.0), dict(duration_us=0)])
def test_event_generation_validation(kw):
    base = dict(scene=generate_scene(2, 10.0), profile=MotionProfile.constant([0, 0, 0], 1000), duration_us=1000)
    with pytest.raises(ValueError):
        generate_events(**{**base, **kw})
