import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import make_manifest, random_ladder_manifest
from tilestream.env import (BandwidthTrace, EpisodeDoneError, RewardWeights, SelectionSet,
                            StreamEnv, TraceError, TransmissionLedger, build_state,
                            compute_reward, constant_trace, greedy_select, load_trace,
                            oracle_viewports, parse_trace, reward_terms, synthetic_trace,
                            tile_features)
from tilestream.scene import gen_synthetic_scene, preprocess
from tilestream.viewport import Trajectory, gen_synthetic_trajectories


# -- traces ------------------------------------------------------------------

def test_trace_scaling_example(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("slot,mbps\n0,10\n1,30\n")
    np.testing.assert_allclose(load_trace(str(p), 40).samples, [20e6, 60e6])


def test_trace_identity_scaling():
    t = constant_trace(5, 80)
    np.testing.assert_array_equal(t.scaled(80).samples, t.samples)


def test_synthetic_trace_scaled_mean():
    t = synthetic_trace(3, 300, 55).scaled(120)
    assert abs(t.samples.mean() / 1e6 - 120) < 1e-9
    assert t.samples.std() > 0


def test_trace_rejects_non_positive():
    with pytest.raises(TraceError, match="line 3"):
        parse_trace("slot,mbps\n0,10\n1,0\n")
    with pytest.raises(TraceError):
        parse_trace("time,rate\n0,1\n")
    with pytest.raises(TraceError):
        BandwidthTrace([1.0, -1.0])


def test_trace_csv_round_trip():
    t = synthetic_trace(0, 20, 80)
    np.testing.assert_allclose(parse_trace(t.to_csv()).samples, t.samples, rtol=1e-15)


# -- state -------------------------------------------------------------------

def _manifest3():
    bits = [[10, 30, 60], [20, 40, 80], [5, 6, 7]]
    points = [[1, 3, 6], [2, 4, 8], [1, 1, 1]]
    imp = [[0.5, 1.0, 2.0], [1.0, 1.5, 4.0], [0.2, 0.2, 0.2]]
    return make_manifest(bits, points, imp)


def test_fresh_ledger_features_zero():
    m = _manifest3()
    f = tile_features(TransmissionLedger(m), m)
    np.testing.assert_array_equal(f[:, 3:], 0.0)
    np.testing.assert_array_equal(f[:, :3], m.centers)


def test_full_ledger_features_one():
    m = _manifest3()
    led = TransmissionLedger(m)
    led.level[:] = 3
    np.testing.assert_array_equal(tile_features(led, m)[:, 3:], 1.0)


def test_mid_stream_features_match_lookup():
    m = _manifest3()
    led = TransmissionLedger(m)
    led.level[:] = [2, 0, 1]
    f = tile_features(led, m)
    expect = [[3 / 6, 1.0 / 2.0, 2 / 3], [0, 0, 0], [1.0, 1.0, 1 / 3]]
    np.testing.assert_allclose(f[:, 3:], expect, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(led.prev_bits, [30, 0, 5])


def test_build_state_scales_positions():
    m = _manifest3()
    vp = np.array([[1.5, 0.5, 0.5, 90.0, -180.0, 0.0]])
    s = build_state(TransmissionLedger(m), constant_trace(3, 40), 1, vp, m)
    assert s.bandwidth == 40e6 and s.agent_bandwidth == 0.4
    assert (np.abs(s.agent_features[:, :3]) <= 1).all()
    np.testing.assert_allclose(s.agent_features[:, 0], [-2 / 3, 0, 2 / 3])
    np.testing.assert_allclose(s.agent_viewports[0, 3:], [0.5, -1.0, 0.0])
    with pytest.raises(IndexError):
        build_state(TransmissionLedger(m), constant_trace(3, 40), 3, vp, m)


# -- greedy selection --------------------------------------------------------

def test_greedy_worked_example():
    m = make_manifest([[10, 30], [10, 25]])
    sel = greedy_select([[0.9, 0.5], [0.1, 0.8]], TransmissionLedger(m), m, 35)
    assert sel.choices == [(0, 1), (1, 2)] and sel.total_bits == 35


def test_greedy_keeps_first_overshoot():
    m = make_manifest([[10]])
    sel = greedy_select([[1.0]], TransmissionLedger(m), m, 5)
    assert sel.choices == [(0, 1)] and sel.total_bits == 10


def test_greedy_nothing_left():
    m = make_manifest([[10, 20], [5, 6]])
    led = TransmissionLedger(m)
    led.level[:] = 2
    assert len(greedy_select(np.random.default_rng(0).normal(size=(2, 2)), led, m, 1e9)) == 0


def test_greedy_budget_in_bits_per_slot():
    m = make_manifest([[10], [10], [10]])
    sel = greedy_select(np.zeros((3, 1)), TransmissionLedger(m), m, 10, dt=2.0)
    assert sel.choices == [(0, 1), (1, 1), (2, 1)]  # 20 bits fit, third overshoots


def test_greedy_respects_eligibility():
    m = make_manifest([[10], [10]])
    sel = greedy_select([[5.0], [1.0]], TransmissionLedger(m), m, 100, eligible=[[False], [True]])
    assert sel.choices == [(1, 1)]


def test_greedy_rejects_bad_shape():
    m = make_manifest([[10, 20]])
    with pytest.raises(ValueError):
        greedy_select(np.zeros((2, 2)), TransmissionLedger(m), m, 10)


def prefix_oracle(scores, ledger, manifest, budget):
    """Lexicographically best properly-stopped upgrade sequence, by brute force.

    A sequence picks distinct tiles with strict upgrades. It is properly stopped
    if every proper prefix stays within budget and it either exceeds the budget
    or no further tile can be added. Items compare by (score desc, k asc, l asc).
    """
    K, L = scores.shape
    prev = ledger.prev_bits
    items = [(k, l) for k in range(K) for l in range(1, L + 1) if l > ledger.level[k]]
    rank = {it: (-scores[it[0], it[1] - 1], it[0], it[1]) for it in items}
    tiles_with_items = {k for k, _ in items}
    best = None
    for n in range(0, len(tiles_with_items) + 1):
        for seq in itertools.permutations(items, n):
            if len({k for k, _ in seq}) != n:
                continue
            totals = np.cumsum([manifest.bits[k, l - 1] - prev[k] for k, l in seq]) if n else []
            if any(t > budget for t in totals[:-1]):
                continue
            over = n > 0 and totals[-1] > budget
            if not over and {k for k, _ in seq} != tiles_with_items:
                continue
            key = [rank[it] for it in seq]
            if best is None or key < best[0]:
                best = (key, list(seq))
    return best[1]


def test_greedy_matches_prefix_oracle_small_random(rng):
    for _ in range(60):
        K, L = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        m = random_ladder_manifest(rng, K, L)
        led = TransmissionLedger(m)
        led.level[:] = rng.integers(0, L + 1, K)
        scores = rng.integers(0, 4, (K, L)).astype(float)  # plenty of ties
        budget = float(rng.uniform(0, m.bits.sum()))
        assert greedy_select(scores, led, m, budget).choices == prefix_oracle(scores, led, m, budget)


@given(st.integers(0, 2**31))
def test_greedy_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    K, L = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    m = random_ladder_manifest(rng, K, L)
    led = TransmissionLedger(m)
    led.level[:] = rng.integers(0, L + 1, K)
    scores = rng.normal(size=(K, L))
    budget = float(rng.uniform(0, m.bits.sum()))
    a = greedy_select(scores, led, m, budget)
    for g in (np.exp, lambda x: 3 * x + 7, lambda x: np.arctan(x), lambda x: x ** 3):
        assert greedy_select(g(scores), led, m, budget) == a


@given(st.integers(0, 2**31))
def test_selection_set_contract(seed):
    rng = np.random.default_rng(seed)
    K, L = int(rng.integers(1, 8)), int(rng.integers(1, 5))
    m = random_ladder_manifest(rng, K, L)
    led = TransmissionLedger(m)
    led.level[:] = rng.integers(0, L + 1, K)
    budget = float(rng.uniform(0, 500))
    sel = greedy_select(rng.normal(size=(K, L)), led, m, budget)
    x = sel.as_matrix(K, L)
    assert (x.sum(1) <= 1).all()
    assert all(l > led.level[k] for k, l in sel.choices)
    inc = [m.bits[k, l - 1] - led.prev_bits[k] for k, l in sel.choices]
    assert sel.total_bits == pytest.approx(sum(inc))
    # only the last accepted item may cross the budget
    assert sum(inc[:-1]) <= budget


def _best_feasible_reward(m, led, budget, y, w):
    K, L = m.n_tiles, m.n_levels
    options = [[0] + [l for l in range(1, L + 1) if l > led.level[k]] for k in range(K)]
    best = 0.0
    for combo in itertools.product(*options):
        sel = SelectionSet([(k, l) for k, l in enumerate(combo) if l])
        sel.total_bits = sum(m.bits[k, l - 1] - led.prev_bits[k] for k, l in sel.choices)
        if sel.total_bits <= budget:
            best = max(best, compute_reward(sel, y, led, m, w, budget))
    return best


def test_greedy_reward_near_exhaustive_best(rng):
    """Density-aligned scores: report how close greedy comes to the best feasible set."""
    w = RewardWeights()
    ratios = []
    for _ in range(100):
        K, L = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        m = random_ladder_manifest(rng, K, L)
        led = TransmissionLedger(m)
        y = np.ones(K, dtype=int)
        budget = float(rng.uniform(0.2, 0.8) * m.bits[:, -1].sum())
        scores = np.zeros((K, L))
        for k in range(K):
            for l in range(1, L + 1):
                one = SelectionSet([(k, l)], m.bits[k, l - 1])
                pq, sq, _ = reward_terms(one, y, led, m, w, budget)
                scores[k, l - 1] = (w.quality * pq + w.importance * sq) / m.bits[k, l - 1]
        sel = greedy_select(scores, led, m, budget)
        best = _best_feasible_reward(m, led, budget, y, w)
        if best == 0:
            continue
        ratios.append(compute_reward(sel, y, led, m, w, budget) / best)
    ratios = np.array(ratios)
    print(f"greedy/best reward: min {ratios.min():.3f} median {np.median(ratios):.3f} "
          f"share>=0.95 {np.mean(ratios >= 0.95):.2f}")
    assert np.median(ratios) >= 0.95


# -- reward ------------------------------------------------------------------

def test_empty_selection_reward_zero():
    m = _manifest3()
    assert compute_reward(SelectionSet(), np.ones(3), TransmissionLedger(m), m,
                          RewardWeights(), 100.0) == 0.0


def test_full_upgrade_reward_twenty():
    m = _manifest3()
    sel = SelectionSet([(0, 3)], 60.0)
    r = compute_reward(sel, np.array([1, 0, 0]), TransmissionLedger(m), m, RewardWeights(), 100.0)
    assert r == 20.0


def test_invisible_tile_earns_nothing():
    m = _manifest3()
    sel = SelectionSet([(0, 3)], 60.0)
    assert compute_reward(sel, np.array([0, 1, 1]), TransmissionLedger(m), m,
                          RewardWeights(), 100.0) == 0.0


def test_zero_denominator_terms_are_zero():
    m = _manifest3()
    led = TransmissionLedger(m)
    led.level[2] = 1  # tile 2 has identical levels, so both gains are 0 / 0
    sel = SelectionSet([(2, 3)], 2.0)
    assert reward_terms(sel, np.ones(3), led, m, RewardWeights(), 100.0)[:2] == (0.0, 0.0)


def test_overshoot_penalty_oracle(rng):
    for _ in range(100):
        m = random_ladder_manifest(rng, 3, 3)
        led = TransmissionLedger(m)
        w = RewardWeights(quality=float(rng.uniform(0, 20)), importance=float(rng.uniform(0, 20)),
                          delay=float(rng.uniform(0, 5)), dt=float(rng.uniform(0.5, 2)))
        k, l = int(rng.integers(3)), int(rng.integers(1, 4))
        inc = float(m.bits[k, l - 1])
        bw = inc / (w.dt * float(rng.uniform(0.2, 3.0)))
        sel = SelectionSet([(k, l)], inc)
        y = rng.integers(0, 2, 3)
        pq = (m.points[k, l - 1] / m.points[k, -1]) if y[k] else 0.0
        sq = (m.importance[k, l - 1] / m.importance[k, -1]) if y[k] else 0.0
        expect = w.quality * pq + w.importance * sq - w.delay * max(inc / bw - w.dt, 0.0)
        assert abs(compute_reward(sel, y, led, m, w, bw) - expect) < 1e-12


def test_double_budget_costs_one():
    m = make_manifest([[200]], points=[[4]], importance=[[1.0]])
    sel = SelectionSet([(0, 1)], 200.0)
    r = compute_reward(sel, np.array([1]), TransmissionLedger(m), m, RewardWeights(), 100.0)
    assert r == 20.0 - 1.0


@given(st.integers(0, 2**31))
def test_reward_bounds(seed):
    rng = np.random.default_rng(seed)
    K, L = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    m = random_ladder_manifest(rng, K, L)
    led = TransmissionLedger(m)
    led.level[:] = rng.integers(0, L + 1, K)
    y = rng.integers(0, 2, K)
    sel = greedy_select(rng.normal(size=(K, L)), led, m, float(rng.uniform(1, 400)))
    w = RewardWeights()
    pq, sq, pen = reward_terms(sel, y, led, m, w, 100.0)
    assert 0 <= w.quality * pq + w.importance * sq <= (w.quality + w.importance) * y.sum() + 1e-12
    assert pen >= 0


# -- environment -------------------------------------------------------------

def _scene_env(seed=0, slots=12, horizon=3, mbps=2.0, **kw):
    _, m = preprocess(gen_synthetic_scene(seed, 3000, payload_bytes=32), "s", 3.2, (0.32, 0.16))
    traj = gen_synthetic_trajectories(seed, 1, duration=slots + horizon + 1, scene_id="s")[0]
    return StreamEnv(m, traj, constant_trace(slots, mbps), horizon, **kw)


def test_oracle_viewports_frames():
    samples = np.arange(200 * 6, dtype=float).reshape(200, 6)
    samples[:, 3:] = 0
    traj = Trajectory("u", "s", samples)
    out = oracle_viewports(traj, 0, 3, 1.0)
    np.testing.assert_array_equal(out[:, 0], samples[[30, 60, 90], 0])
    np.testing.assert_array_equal(oracle_viewports(traj, 2, 1)[:, 0], samples[[90], 0])
    with pytest.raises(IndexError):
        oracle_viewports(traj, 5, 3)


def test_perfect_predictor_matches_oracle():
    env_o = _scene_env()
    env_p = _scene_env(predictor=lambda traj, t, H, dt: oracle_viewports(traj, t, H, dt))
    np.testing.assert_array_equal(env_o.state.viewports, env_p.state.viewports)


def test_zero_action_is_deterministic():
    a, b = _scene_env(), _scene_env()
    K, L = a.manifest.n_tiles, a.manifest.n_levels
    while not a.done:
        _, ra, _, ia = a.step(np.zeros((K, L)))
        _, rb, _, ib = b.step(np.zeros((K, L)))
        assert ra == rb and ia["selection"].choices == ib["selection"].choices
    np.testing.assert_array_equal(a.ledger.level, b.ledger.level)


def test_huge_budget_top_preferring_action_completes_in_one_step():
    env = _scene_env(mbps=1e9)
    K, L = env.manifest.n_tiles, env.manifest.n_levels
    env.step(np.tile(np.arange(L, dtype=float), (K, 1)))
    assert env.ledger.complete()


def test_budget_accounting_and_ledger_monotone():
    env = _scene_env(slots=40, mbps=0.8)
    K, L = env.manifest.n_tiles, env.manifest.n_levels
    rng = np.random.default_rng(0)
    inc_max = np.diff(np.concatenate([np.zeros((K, 1)), env.manifest.bits], 1), axis=1).max()
    full_max = env.manifest.bits.max()
    prev_level, prev_feat = env.ledger.level.copy(), env.state.features[:, 3:].copy()
    while not env.done:
        state, _, done, info = env.step(rng.normal(size=(K, L)))
        assert info["sent_bits"] <= info["budget_bits"] + max(inc_max, full_max)
        assert info["sent_bits"] <= info["budget_bits"] + info["selection"].max_increment
        assert (env.ledger.level >= prev_level).all()
        prev_level = env.ledger.level.copy()
        if state is not None:
            assert (state.features[:, 3:] >= prev_feat - 1e-15).all()
            assert ((state.features[:, 3:] >= 0) & (state.features[:, 3:] <= 1)).all()
            prev_feat = state.features[:, 3:].copy()


def test_step_after_done_raises():
    env = _scene_env(slots=2)
    K, L = env.manifest.n_tiles, env.manifest.n_levels
    env.step(np.zeros((K, L)))
    _, _, done, _ = env.step(np.zeros((K, L)))
    assert done
    with pytest.raises(EpisodeDoneError):
        env.step(np.zeros((K, L)))


def test_episode_length_limited_by_trajectory():
    env = _scene_env(slots=12, horizon=3)
    _, m = preprocess(gen_synthetic_scene(0, 500, payload_bytes=8), "s", 3.2, (0.32,))
    # 16 s of frames at 30 Hz; the last slot still needs H future frames
    env = StreamEnv(m, env.trajectory, constant_trace(100, 1.0), 3)
    assert env.n_slots == 13
