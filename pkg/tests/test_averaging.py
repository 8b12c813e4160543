import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evstar.averaging import (
    AttitudeSolution, GraphError, NoAnchorWarning, build_graph, chain_relatives, objective, re_orient, residuals,
    solve, surrogate_objective, write_residuals_csv,
)
from evstar.bank import BankConfig, plan_instances
from evstar.geom import angular_distance, exp_rotation, exp_so3, random_rotation
from evstar.sim import MotionProfile

DT = 50_000
TOL_DEG = np.rad2deg(1e-6)


def deg(x):
    return np.rad2deg(x)


def noisy(R, rng, sigma_deg):
    return exp_so3(rng.normal(scale=np.deg2rad(sigma_deg) / np.sqrt(3), size=3)) @ R


def truth_edges(profile, windows, rng=None, sigma_deg=0.0):
    out = []
    for a, b in windows:
        Ra, Rb = profile.attitudes([a, b])
        R = Ra @ Rb.T
        out.append((a, b, noisy(R, rng, sigma_deg) if sigma_deg else R))
    return out


def chain_windows(n, step=2 * DT):
    return [(k * step, (k + 1) * step) for k in range(n)]


PROFILE = MotionProfile.constant(np.deg2rad([1.0, -2.5, 3.0]), 45_000_000)


def max_err(sol, profile=PROFILE):
    return max(deg(angular_distance(R, profile.attitude(int(t)))) for t, R in zip(sol.times, sol.attitudes))


# -- graph construction ------------------------------------------------------------------------


def test_minimal_graph():
    g = build_graph(truth_edges(PROFILE, [(0, DT), (DT, 2 * DT)]), {0: np.eye(3)})
    assert g.n_nodes == 3 and g.index(DT) == 1
    with pytest.raises(KeyError):
        g.index(7)


def test_gap_is_disconnected():
    with pytest.raises(GraphError, match="components"):
        build_graph(truth_edges(PROFILE, [(0, 100_000), (200_000, 300_000)]), {0: np.eye(3)})


def test_anchors_join_components():
    edges = truth_edges(PROFILE, [(0, 100_000), (200_000, 300_000)])
    g = build_graph(edges, {0: PROFILE.attitude(0), 200_000: PROFILE.attitude(200_000)})
    sol = solve(g)
    assert max_err(sol) < TOL_DEG


@pytest.mark.parametrize("edges, anchors", [
    ([(0, 70_000, np.eye(3))], {}),
    ([(100_000, 0, np.eye(3))], {}),
    ([(0, 100_000, np.eye(3))], {30_000: np.eye(3)}),
    ([(0, 100_000, np.eye(3))], {200_000: np.eye(3)}),
    ([], {}),
])
def test_invalid_graphs(edges, anchors):
    with pytest.raises(GraphError):
        build_graph(edges, anchors)


def test_no_anchor_warns_and_gauges_first_node():
    with pytest.warns(NoAnchorWarning):
        g = build_graph(truth_edges(PROFILE, chain_windows(4)))
    sol = solve(g)
    assert np.allclose(sol.attitudes[0], np.eye(3), atol=1e-9)
    R0 = PROFILE.attitude(0)
    for t, R in zip(sol.times, sol.attitudes):
        assert deg(angular_distance(R, PROFILE.attitude(int(t)) @ R0.T)) < TOL_DEG


# -- solver ------------------------------------------------------------------------------------


def test_two_node_closed_form():
    Rt = exp_rotation(np.deg2rad(10.0), [0, 0, 1])
    g = build_graph([(0, DT, Rt)], {0: np.eye(3)}, anchor_weight=1e6)
    sol = solve(g)
    R0, R1 = sol.attitudes
    assert np.allclose(R0, np.eye(3), atol=1e-6)
    assert np.allclose(R1, exp_rotation(np.deg2rad(-10.0), [0, 0, 1]), atol=1e-6)
    assert np.allclose(R0, Rt @ R1, atol=1e-6)


def test_noise_free_full_plan_recovers_truth():
    plan = plan_instances(5_000_000, BankConfig())
    edges = truth_edges(PROFILE, [(w.alpha, w.beta) for w in plan])
    anchors = {t: PROFILE.attitude(t) for t in (0, 1_250_000, 2_500_000, 3_750_000, 5_000_000)}
    sol = solve(build_graph(edges, anchors))
    assert sol.converged
    assert max_err(sol) < TOL_DEG
    assert np.abs(sol.edge_residuals).max() < 1e-6 and np.abs(sol.anchor_residuals).max() < 1e-6


@pytest.mark.parametrize("every", [0, 10])
def test_surrogate_non_increasing(rng, every):
    edges = truth_edges(PROFILE, chain_windows(30, DT) + chain_windows(15, 2 * DT), rng, 0.5)
    anchors = {0: noisy(PROFILE.attitude(0), rng, 0.5), 1_500_000: noisy(PROFILE.attitude(1_500_000), rng, 0.5)}
    g = build_graph(edges, anchors)
    sol = solve(g, max_iters=60, global_step_every=every)
    h = np.array(sol.objective_history)
    assert len(h) == sol.iterations
    assert np.all(np.diff(h) <= 1e-12 * h[0])
    assert surrogate_objective(g, sol.attitudes) == pytest.approx(h[-1], rel=1e-9)
    assert objective(g, sol.attitudes) >= 0


def test_non_convergence_is_flagged(rng):
    edges = truth_edges(PROFILE, chain_windows(40, DT), rng, 1.0)
    sol = solve(build_graph(edges, {0: np.eye(3)}), max_iters=2, global_step_every=0)
    assert not sol.converged and sol.iterations == 2
    assert len(sol.edge_residuals) == 40


def test_gauge_is_identity_after_solve(rng):
    edges = truth_edges(PROFILE, chain_windows(10, DT), rng, 0.3)
    sol = solve(build_graph(edges, {0: random_rotation(rng), 250_000: random_rotation(rng)}))
    assert np.allclose(sol.gauge, np.eye(3), atol=1e-9)


@pytest.mark.parametrize("w", [1e3, 1e4, 1e5])
def test_anchor_dominance(rng, w):
    edges = truth_edges(PROFILE, chain_windows(8, DT), rng, 0.5)
    anchors = {t: noisy(PROFILE.attitude(t), rng, 1.0) for t in (0, 400_000)}
    sol = solve(build_graph(edges, anchors, anchor_weight=w))
    for t, R in anchors.items():
        assert deg(angular_distance(sol.attitude(t), R)) < 0.01


@settings(max_examples=15)
@given(st.integers(0, 10**6), st.floats(0.0, 2.0))
def test_solution_is_on_so3(seed, sigma):
    rng = np.random.default_rng(seed)
    edges = truth_edges(PROFILE, chain_windows(6, DT) + chain_windows(3, 2 * DT), rng, sigma)
    sol = solve(build_graph(edges, {0: random_rotation(rng)}))
    for R in sol.attitudes:
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-9) and np.isclose(np.linalg.det(R), 1.0)


def test_window_solve_equals_global(rng):
    edges = truth_edges(PROFILE, chain_windows(20, DT) + chain_windows(10, 2 * DT), rng, 0.3)
    anchors = {0: PROFILE.attitude(0), 1_000_000: PROFILE.attitude(1_000_000)}
    full = solve(build_graph(edges, anchors))
    perm = rng.permutation(len(edges))
    window = solve(build_graph([edges[i] for i in perm], anchors))
    assert np.array_equal(full.times, window.times)
    for A, B in zip(full.attitudes, window.attitudes):
        assert angular_distance(A, B) < 1e-5


# -- re-orientation ------------------------------------------------------------------------------


def test_re_orient_identity_and_invariance(rng):
    X = np.array([random_rotation(rng) for _ in range(4)])
    sol = AttitudeSolution(np.arange(4) * DT, X, np.eye(3))
    assert np.allclose(re_orient(sol, np.eye(3)).attitudes, X)
    G, Q = random_rotation(rng), random_rotation(rng)
    a = re_orient(AttitudeSolution(sol.times, X, G), G)
    b = re_orient(AttitudeSolution(sol.times, X @ Q, G @ Q), G @ Q)
    assert np.allclose(a.attitudes, b.attitudes, atol=1e-12)
    assert np.allclose(b.gauge, np.eye(3), atol=1e-12)


def test_anchor_term_after_re_orient(rng):
    edges = truth_edges(PROFILE, chain_windows(6, DT), rng, 0.5)
    anchors = {0: random_rotation(rng), 300_000: random_rotation(rng)}
    g = build_graph(edges, anchors)
    sol = solve(g)
    _, ar = residuals(g, sol.attitudes)
    want = [np.linalg.norm(sol.attitude(t) - R) for t, R in sorted(anchors.items())]
    assert np.allclose(ar, want) and np.allclose(sol.anchor_residuals, want)


# -- dead reckoning ------------------------------------------------------------------------------------


def test_chain_noise_free_is_exact():
    edges = truth_edges(PROFILE, chain_windows(30))
    sol = chain_relatives(edges, 1_000_000, PROFILE.attitude(1_000_000))
    assert len(sol.times) == 31 and max_err(sol) < 1e-9


def test_chain_single_edge():
    R = exp_rotation(0.1, [1, 0, 0])
    sol = chain_relatives([(0, 100_000, R)], 0, np.eye(3))
    assert np.allclose(sol.attitudes[0], R @ sol.attitudes[1])


def test_chain_gap():
    with pytest.raises(GraphError, match="gap"):
        chain_relatives([(0, 100_000, np.eye(3)), (200_000, 300_000, np.eye(3))], 0, np.eye(3))


def test_chain_drift_grows_with_length():
    n, seeds = 80, 24
    errs = np.zeros((seeds, n + 1))
    for s in range(seeds):
        rng = np.random.default_rng(s)
        sol = chain_relatives(truth_edges(PROFILE, chain_windows(n), rng, 0.3), 0, PROFILE.attitude(0))
        errs[s] = [deg(angular_distance(R, PROFILE.attitude(int(t)))) for t, R in zip(sol.times, sol.attitudes)]
    rms = np.sqrt((errs ** 2).mean(axis=0))
    quarters = [rms[1 + q * n // 4: 1 + (q + 1) * n // 4].mean() for q in range(4)]
    assert all(a < b for a, b in zip(quarters, quarters[1:]))


def test_averaging_beats_chaining_on_45_seconds():
    rng = np.random.default_rng(11)
    plan = plan_instances(45_000_000, BankConfig())
    edges = truth_edges(PROFILE, [(w.alpha, w.beta) for w in plan], rng, 0.3)
    anchor_t = [0, 11_250_000, 22_500_000, 33_750_000, 45_000_000]
    anchors = {t: noisy(PROFILE.attitude(t), rng, 0.3) for t in anchor_t}
    sol = solve(build_graph(edges, anchors))
    assert len(sol.times) == 901
    avg = np.sqrt(np.mean([deg(angular_distance(R, PROFILE.attitude(int(t))))**2
                           for t, R in zip(sol.times, sol.attitudes)]))
    fine = [e for e in edges if e[1] - e[0] == 100_000]
    ch = chain_relatives(fine, 0, anchors[0])
    chained = np.sqrt(np.mean([deg(angular_distance(R, PROFILE.attitude(int(t))))**2
                               for t, R in zip(ch.times, ch.attitudes)]))
    assert avg < chained


def test_residual_csv(tmp_path, rng):
    edges = truth_edges(PROFILE, chain_windows(3, DT), rng, 0.3)
    g = build_graph(edges, {0: np.eye(3)})
    sol = solve(g)
    write_residuals_csv(tmp_path / "r.csv", g, sol)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "alpha_us,beta_us,residual,angle_deg" and len(lines) == 4
    sol.to_csv(tmp_path / "s.csv")
    head, *rows = (tmp_path / "s.csv").read_text().splitlines()
    assert head.startswith("t_us,r00") and head.endswith(",flag") and len(rows) == 4
