"""Acceptance gate: one test per criterion, each printing a pass/fail line.

The heavy learning checks (criteria 7 and 8) take a few minutes on one core.
"""
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import stats

from helpers import make_manifest, random_ladder_manifest
from test_env import prefix_oracle
from test_viewport import _random_pairs, cube_samples
from tilestream.cvp import CvpConfig, CvpModel, evaluate_mae, train_cvp
from tilestream.dba import (DbaNetwork, DdpgAgent, DdpgConfig, StateBatch,
                            critic_forward, train)
from tilestream.env import (RewardWeights, SelectionSet, StreamEnv, TransmissionLedger,
                            compute_reward, constant_trace, greedy_select, synthetic_trace)
from tilestream.harness import (Policy, SimConfig, benchmark_env_factory, run_simulation,
                                tiny_benchmark)
from tilestream.nn import (MLP, Attention, FeaturePropagation, SetAbstraction, Tensor,
                           max_relative_error)
from tilestream.scene import gen_synthetic_scene, preprocess, validate_ladder
from tilestream.viewport import (FrustumConfig, future_visibility, gen_synthetic_trajectories,
                                 points_in_frustum, visible_mask)

pytestmark = pytest.mark.acceptance


def test_c01_ladder_monotonicity(report):
    t0 = time.perf_counter()
    bad, n_tiles = [], 0
    for seed in range(50):
        tiles, _ = preprocess(gen_synthetic_scene(seed, 20_000), f"s{seed}")
        n_tiles += len(tiles)
        bad += [(seed, t.index) for t in tiles if validate_ladder(t) is not None]
    dt = time.perf_counter() - t0
    ok = not bad and dt < 30
    report(1, ok, f"50 scenes, {n_tiles} tiles, {len(bad)} violations, {dt:.1f}s (< 30s)")
    assert ok


def test_c02_greedy_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = transform_breaks = 0
    for _ in range(200):
        K, L = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        m = random_ladder_manifest(rng, K, L)
        led = TransmissionLedger(m)
        led.level[:] = rng.integers(0, L + 1, K)
        scores = rng.integers(-3, 4, (K, L)).astype(float)
        budget = float(rng.uniform(0, m.bits.sum()))
        sel = greedy_select(scores, led, m, budget)
        mismatches += sel.choices != prefix_oracle(scores, led, m, budget)
        for g in (np.exp, lambda x: 2 * x - 1, np.arctan, lambda x: x ** 3):
            transform_breaks += greedy_select(g(scores), led, m, budget) != sel
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and transform_breaks == 0 and dt < 10
    report(2, ok, f"200 instances, {mismatches} oracle mismatches, "
                  f"{transform_breaks} transform changes, {dt:.1f}s (< 10s)")
    assert ok


def test_c03_reward(report):
    w = RewardWeights()
    m = make_manifest([[10, 30, 60]], points=[[1, 3, 6]], importance=[[0.5, 1.0, 2.0]])
    empty = compute_reward(SelectionSet(), np.ones(1), TransmissionLedger(m), m, w, 100.0)
    full = compute_reward(SelectionSet([(0, 3)], 60.0), np.ones(1), TransmissionLedger(m), m, w, 100.0)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        m = random_ladder_manifest(rng, 3, 3)
        led = TransmissionLedger(m)
        led.level[:] = rng.integers(0, 3, 3)
        k = int(rng.integers(3))
        lvl = int(rng.integers(led.level[k] + 1, 4))
        inc = float(m.bits[k, lvl - 1] - led.prev_bits[k])
        bw = inc / rng.uniform(0.2, 3.0)
        y = rng.integers(0, 2, 3)
        gain_p = gain_s = 0.0
        if y[k]:   # gain relative to what is still missing from the tile
            dp = m.points[k, -1] - led.prev_points[k]
            ds = m.importance[k, -1] - led.prev_importance[k]
            gain_p = (m.points[k, lvl - 1] - led.prev_points[k]) / dp if dp else 0.0
            gain_s = (m.importance[k, lvl - 1] - led.prev_importance[k]) / ds if ds else 0.0
        expect = 10 * gain_p + 10 * gain_s - max(inc / bw - 1.0, 0.0)
        got = compute_reward(SelectionSet([(k, lvl)], inc), y, led, m, w, bw)
        worst = max(worst, abs(got - expect))
    ok = empty == 0.0 and full == 20.0 and worst < 1e-12
    report(3, ok, f"empty={empty}, full visible upgrade={full}, "
                  f"worst overshoot error {worst:.1e} (< 1e-12)")
    assert ok


def _gradient_cases(rng):
    x = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    mlp = MLP([4, 6, 3], rng)
    yield "mlp", lambda: (mlp(x) ** 2).sum(), mlp.parameters() + [x]

    att = Attention(4, 4, 4, rng)
    kv = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    yield "attention", lambda: (att(x, kv) ** 2).sum(), att.parameters() + [x, kv]

    pos = rng.uniform(-2, 2, (2, 12, 3))
    feats = Tensor(rng.normal(size=(2, 12, 4)), requires_grad=True)
    sa = SetAbstraction(4, 2.0, 5, [4 + 3, 6, 6], rng)
    yield "set-abstraction", lambda: (sa(pos, feats)[1] ** 2).sum(), sa.parameters() + [feats]

    coarse = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    fp = FeaturePropagation([6 + 4, 5], rng)
    cpos = pos[:, :4]
    yield "feature-propagation", lambda: (fp(cpos, coarse, pos, feats) ** 2).sum(), \
        fp.parameters() + [coarse, feats]

    cvp = CvpModel(["a", "b"], CvpConfig(horizon=4, embed_dim=6, hidden=6, seed=1))
    hist = rng.normal(size=(2, 4, 6)) * [1, 1, 1, 20, 20, 20]
    tgt = rng.normal(size=(2, 4, 6)) * 0.3
    enc = cvp.encode(hist)[0]
    yield "cvp end-to-end", lambda: ((cvp.forward_scaled(["a", "b"], enc) - tgt) ** 2).mean(), \
        cvp.parameters()

    net = DbaNetwork(2, rng, width=6, sa_centroids=4, max_group=4)
    batch = StateBatch(rng.uniform(-4, 4, (2, 5, 3)), rng.normal(size=(2, 5, 6)),
                       rng.normal(size=(2, 3, 6)), np.array([0.4, 0.8]))
    act = rng.normal(size=(2, 5, 2))
    yield "critic", lambda: ((net.critic(batch, act) - 1.0) ** 2).mean(), net.head_parameters("critic")
    yield "actor", lambda: net.critic(batch, net.actor(batch)).mean(), net.head_parameters("actor")


def test_c04_gradients(report):
    t0 = time.perf_counter()
    errors = {name: max_relative_error(fn, params, h=1e-5)
              for name, fn, params in _gradient_cases(np.random.default_rng(4))}
    dt = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst < 1e-4 and dt < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(4, ok, f"max rel error {worst:.1e} (< 1e-4), {dt:.1f}s (< 120s); {detail}")
    assert ok


def test_c05_visibility(report):
    rng = np.random.default_rng(5)
    cfg, edge = FrustumConfig(), 3.2
    fn = fp = 0
    for vp, c in _random_pairs(rng, 200):
        aabb = bool(visible_mask(vp, c[None], edge, cfg)[0])
        sampled = bool(points_in_frustum(vp, cube_samples(c, edge), cfg).any())
        fn += sampled and not aabb
        fp += aabb and not sampled

    class Tile:
        def __init__(self, c):
            self.center = c
    non_monotone = 0
    for _ in range(100):
        vps = rng.uniform([-3, -3, 0, -30, -180, -10], [3, 3, 2, 30, 180, 10], (12, 6))
        tiles = [Tile(c) for c in rng.uniform(-10, 10, (20, 3))]
        ys = [future_visibility(vps[:h], tiles, edge=edge) for h in range(1, 13)]
        non_monotone += sum(bool((a > b).any()) for a, b in zip(ys, ys[1:]))
    ok = fn == 0 and fp / 200 <= 0.02 and non_monotone == 0
    report(5, ok, f"200 pairs, {fn} false negatives, {fp / 200:.1%} false positives (<= 2%), "
                  f"{non_monotone} horizon monotonicity breaks")
    assert ok


def _state_for_scene(n_tiles, seed):
    """A streaming state from a real synthetic scene cropped to ``n_tiles`` tiles."""
    _, m = preprocess(gen_synthetic_scene(seed, 6000, payload_bytes=16), f"k{n_tiles}")
    m.tiles = m.tiles[:n_tiles]
    traj = gen_synthetic_trajectories(seed, 1, duration=10, scene_id="k")[0]
    return StreamEnv(m, traj, constant_trace(3, 40), horizon=3).state


def test_c06_variable_tile_count(report):
    factory = benchmark_env_factory(0, n_slots=5, horizon=3)
    cfg = DdpgConfig(width=16, sa_centroids=8, max_group=8, optimizer="adam",
                     actor_lr=1e-3, critic_lr=1e-3, seed=6)
    agent, _ = train(factory, cfg, episodes=5)
    shapes = {}
    for K in (1, 8, 20):
        s = _state_for_scene(K, K)
        a = agent(s)
        q = critic_forward(s, a, agent.net)
        shapes[K] = a.shape
        assert a.shape == (K, agent.n_levels) and np.isfinite(a).all() and np.isfinite(q)
    rng = np.random.default_rng(6)
    worst = 0.0
    s = _state_for_scene(20, 3)
    for _ in range(20):
        idx = rng.choice(s.n_tiles, 6, replace=False)
        sub = type(s)(s.bandwidth, s.viewports, s.features[idx], s.agent_features[idx],
                      s.agent_viewports)
        a = rng.normal(size=(6, agent.n_levels))
        perm = rng.permutation(6)
        subp = type(s)(s.bandwidth, s.viewports, sub.features[perm], sub.agent_features[perm],
                       s.agent_viewports)
        worst = max(worst, abs(critic_forward(sub, a, agent.net) -
                               critic_forward(subp, a[perm], agent.net)))
    ok = worst < 1e-9
    report(6, ok, f"action shapes {shapes}, critic permutation |dQ| max {worst:.1e} (< 1e-9)")
    assert ok


DDPG_ACCEPT = dict(width=16, sa_centroids=8, max_group=8, optimizer="adam",
                   actor_lr=1e-3, critic_lr=1e-3, updates_per_episode=1)


def _episode_reward(manifest, traj, trace, cfg, policy):
    rows, _ = run_simulation(manifest, traj, trace, policy, cfg)
    return float(np.mean([r.reward for r in rows])), [r.coverage for r in rows]


def test_c07_ddpg_learning(report):
    t0 = time.perf_counter()
    agent_last10, random_means = [], []
    cov_agent, cov_dist, cov30_agent, cov30_dist = [], [], [], []
    for seed in range(20):
        manifest, traj, trace, cfg = tiny_benchmark(seed)
        agent, log = train(benchmark_env_factory(seed), DdpgConfig(seed=seed, **DDPG_ACCEPT),
                           episodes=200)
        agent_last10.append(np.mean([row["mean_reward"] for row in log[-10:]]))
        r, _ = _episode_reward(manifest, traj, trace, cfg,
                               Policy("random", manifest.n_levels, manifest.tile_edge, seed=seed))
        random_means.append(r)
        _, ca = _episode_reward(manifest, traj, trace, cfg,
                                Policy("ddpg", manifest.n_levels, agent=agent))
        _, cd = _episode_reward(manifest, traj, trace, cfg, Policy("distance", manifest.n_levels))
        cov_agent.append(np.mean(ca[:30]))
        cov_dist.append(np.mean(cd[:30]))
        cov30_agent.append(ca[29])
        cov30_dist.append(cd[29])
    dt = time.perf_counter() - t0
    test = stats.ttest_ind(agent_last10, random_means, equal_var=False, alternative="greater")
    ok = (test.pvalue < 0.05 and np.mean(cov_agent) > np.mean(cov_dist) and dt < 600)
    report(7, ok, f"reward last-10 {np.mean(agent_last10):.3f} vs random {np.mean(random_means):.3f} "
                  f"(Welch p={test.pvalue:.1e} < 0.05); mean coverage over slots 1-30 "
                  f"{np.mean(cov_agent):.3f} vs distance {np.mean(cov_dist):.3f} "
                  f"(at slot 30 itself: {np.mean(cov30_agent):.3f} vs {np.mean(cov30_dist):.3f}); "
                  f"{dt:.0f}s (< 600s)")
    assert ok


def test_c08_cvp_ablation(report):
    t0 = time.perf_counter()
    results = {"full": [], "no-cpe": [], "no-hpe": []}
    for seed in range(5):
        train_set = [t for s in ("a", "b", "c")
                     for t in gen_synthetic_trajectories(seed, 6, duration=20, scene_id=s)]
        held_out = gen_synthetic_trajectories(seed, 6, duration=20, scene_id="held")
        for name, kw in (("full", {}), ("no-cpe", {"disable_cpe": True}),
                         ("no-hpe", {"disable_hpe": True})):
            cfg = CvpConfig(horizon=10, optimizer="adam", lr=1e-3, epochs=60,
                            windows_per_epoch=1280, batch_size=32, seed=seed, **kw)
            model, _ = train_cvp(train_set, cfg)
            results[name].append(evaluate_mae(model, held_out, stride=5))
    dt = time.perf_counter() - t0
    pos = {k: np.mean([p for p, _ in v]) for k, v in results.items()}
    comb = {k: np.mean([p + r for p, r in v]) for k, v in results.items()}
    wins = sum(results["full"][i][0] + results["full"][i][1] <=
               min(sum(results["no-cpe"][i]), sum(results["no-hpe"][i])) for i in range(5))
    ok = (pos["full"] < pos["no-cpe"] and comb["full"] <= comb["no-cpe"]
          and comb["full"] <= comb["no-hpe"] and dt < 600)
    report(8, ok, "5-seed means: position MAE full {full:.3f} m vs no-cpe {nocpe:.3f} m; "
                  "position+rotation full {cf:.2f} vs no-cpe {cc:.2f}, no-hpe {ch:.2f} "
                  "(full best on {w}/5 seeds); {dt:.0f}s (< 600s)".format(
                      full=pos["full"], nocpe=pos["no-cpe"], cf=comb["full"], cc=comb["no-cpe"],
                      ch=comb["no-hpe"], w=wins, dt=dt))
    assert ok


def test_c09_budget_accounting(report):
    _, m = preprocess(gen_synthetic_scene(9, 50_000, payload_bytes=2048), "budget")
    traj = gen_synthetic_trajectories(9, 1, duration=70, scene_id="budget")[0]
    base = synthetic_trace(9, 60, 80)
    agent = DdpgAgent(m.n_levels, DdpgConfig(width=8, sa_centroids=8, max_group=8), m.tile_edge)
    violations = episodes = 0
    for preset in (40, 80, 120):
        for kind in ("distance", "viewport-greedy", "random", "ddpg"):
            policy = Policy(kind, m.n_levels, m.tile_edge, agent=agent, seed=preset)
            rows, _ = run_simulation(m, traj, base.scaled(preset), policy,
                                     SimConfig(horizon=5, max_slots=30))
            episodes += 1
            cum = [r.cumulative_megabytes for r in rows]
            violations += sum(r.sent_bits > r.budget_bits + r.max_increment for r in rows)
            violations += sum(b < a for a, b in zip(cum, cum[1:]))
    ok = violations == 0
    report(9, ok, f"{episodes} episodes over 40/80/120 Mbps, {violations} violations")
    assert ok


def _cli(*args):
    r = subprocess.run([sys.executable, "-m", "tilestream", *map(str, args)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    return r


def test_c10_cli_determinism(report, tmp_path):
    d = tmp_path / "data"
    _cli("synth", "--out", d, "--scenes", 2, "--anchors", 4000, "--payload-bytes", 32,
         "--users", 2, "--duration", 15, "--traces", 2, "--slots", 12)
    outputs = []
    for run in range(2):
        o = tmp_path / f"run{run}"
        o.mkdir()
        _cli("train-dba", "--scenes", d / "scenes", "--traces", d / "traces", "--episodes", 3,
             "--seed", 5, "--horizon", 3, "--max-slots", 5, "--width", 8, "--sa-centroids", 8,
             "--agent", o / "agent.gsnn", "--log", o / "train.csv")
        for policy in ("viewport-greedy", "random", "ddpg"):
            _cli("simulate", "--scene", d / "scenes/scene00",
                 "--trajectory", d / "trajectories/scene00.csv", "--trace", d / "traces/trace00.csv",
                 "--avg-mbps", 80, "--policy", policy, "--seed", 2, "--horizon", 3,
                 "--oracle-viewports", "--agent", o / "agent.gsnn",
                 "--out", o / f"sim_{policy}.csv", "--metrics", o / f"mb_{policy}.csv")
        outputs.append({p.name: p.read_bytes() for p in sorted(o.glob("*.csv"))})
    ok = outputs[0].keys() == outputs[1].keys() and all(
        outputs[0][k] == outputs[1][k] for k in outputs[0])
    report(10, ok, f"{len(outputs[0])} CSVs from train-dba and simulate, byte-identical across runs")
    assert ok
