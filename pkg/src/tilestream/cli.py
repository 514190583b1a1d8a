"""Command-line entry point: ``python -m tilestream <verb> ...``.

Every verb writes CSV. Failures print one JSON line starting with ``error:``
to stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

from . import cvp, dba, env, harness, scene, viewport

log = logging.getLogger("tilestream")

SCENE_ANCHORS = "anchors.gstl"


class CliError(Exception):
    pass


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def _scene_dirs(root):
    if os.path.isfile(os.path.join(root, scene.MANIFEST_NAME)):
        return [root]
    dirs = sorted(d for d in glob.glob(os.path.join(root, "*"))
                  if os.path.isfile(os.path.join(d, scene.MANIFEST_NAME)))
    if not dirs:
        raise CliError(f"no preprocessed scene (manifest.json) under {root}")
    return dirs


def _trajectory_files(root):
    if os.path.isfile(root):
        return [root]
    files = sorted(glob.glob(os.path.join(root, "*.csv")))
    if not files:
        raise CliError(f"no trajectory CSV under {root}")
    return files


def _load_trajectories(root, rate):
    out = []
    for path in _trajectory_files(root):
        out.extend(viewport.read_trajectories(path, rate=rate))
    return out


def _load_traces(root, avg=None):
    files = [root] if os.path.isfile(root) else sorted(glob.glob(os.path.join(root, "*.csv")))
    if not files:
        raise CliError(f"no bandwidth trace CSV under {root}")
    return [env.load_trace(f, avg) for f in files]


# --------------------------------------------------------------------------
# verbs


def cmd_preprocess(a):
    anchors = scene.read_representation(os.path.join(a.scene, SCENE_ANCHORS))
    scene_id = a.scene_id or os.path.basename(os.path.normpath(a.scene))
    tiles, manifest = scene.preprocess(anchors, scene_id, a.tile_edge, a.voxels)
    for t in tiles:
        bad = scene.validate_ladder(t)
        if bad is not None:
            raise CliError(str(bad))
    scene.write_manifest(a.scene, manifest, tiles)
    rows = ["tile,level,bits,points,importance"]
    for entry in manifest.tiles:
        for lv in entry.levels:
            rows.append(f"{'_'.join(map(str, entry.index))},{lv.level},{lv.bits},"
                        f"{lv.points},{lv.importance!r}")
    _write(a.out, "\n".join(rows) + "\n")


def cmd_synth(a):
    os.makedirs(a.out, exist_ok=True)
    rows = ["kind,name,path"]
    for i in range(a.scenes):
        sid = f"scene{i:02d}"
        sdir = os.path.join(a.out, "scenes", sid)
        os.makedirs(sdir, exist_ok=True)
        anchors = scene.gen_synthetic_scene([a.seed, i], a.anchors, a.extent,
                                            payload_bytes=a.payload_bytes)
        scene.write_representation(os.path.join(sdir, SCENE_ANCHORS), anchors)
        if not a.no_preprocess:
            tiles, manifest = scene.preprocess(anchors, sid, a.tile_edge, a.voxels)
            scene.write_manifest(sdir, manifest, tiles)
        rows.append(f"scene,{sid},{sdir}")
        trajs = viewport.gen_synthetic_trajectories(a.seed, a.users, a.extent, a.duration,
                                                    a.rate, scene_id=sid)
        tpath = os.path.join(a.out, "trajectories", f"{sid}.csv")
        os.makedirs(os.path.dirname(tpath), exist_ok=True)
        viewport.write_trajectory(tpath, trajs)
        rows.append(f"trajectories,{sid},{tpath}")
    for j in range(a.traces):
        trace = env.synthetic_trace([a.seed, 1000 + j], a.slots, 80.0)
        path = os.path.join(a.out, "traces", f"trace{j:02d}.csv")
        _write(path, trace.to_csv())
        rows.append(f"trace,trace{j:02d},{path}")
    _write(a.log, "\n".join(rows) + "\n")


def _cvp_config(a, **extra):
    return cvp.CvpConfig(horizon=a.horizon, lr=a.lr, optimizer=a.optimizer,
                         epochs=a.epochs, batch_size=a.batch_size,
                         windows_per_epoch=a.windows_per_epoch,
                         disable_cpe=a.no_cpe, disable_hpe=a.no_hpe,
                         position_scale=a.position_scale, seed=a.seed, **extra)


def cmd_train_cvp(a):
    trajs = _load_trajectories(a.data, a.rate)
    model, curve = cvp.train_cvp(trajs, _cvp_config(a))
    model.save(a.model)
    _write(a.log, "epoch,train_mae\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))


def cmd_eval_cvp(a):
    model = cvp.CvpModel.load(a.model)
    pos, rot = cvp.evaluate_mae(model, _load_trajectories(a.data, a.rate), a.stride)
    _write(a.out, f"position_mae_m,rotation_mae_deg\n{float(pos)!r},{float(rot)!r}\n")


def _ddpg_config(a):
    return dba.DdpgConfig(seed=a.seed, optimizer=a.optimizer, actor_lr=a.actor_lr,
                          critic_lr=a.critic_lr, updates_per_episode=a.updates,
                          width=a.width, sa_centroids=a.sa_centroids,
                          checkpoint_every=a.checkpoint_every,
                          checkpoint_dir=os.path.dirname(os.path.abspath(a.agent)))


def cmd_train_dba(a):
    manifests = [scene.read_manifest(d) for d in _scene_dirs(a.scenes)]
    traj_root = a.trajectories or os.path.join(os.path.dirname(os.path.normpath(a.scenes)),
                                               "trajectories")
    trajs = _load_trajectories(traj_root, a.rate)
    traces = _load_traces(a.traces)
    by_scene = {}
    for t in trajs:
        by_scene.setdefault(t.scene_id, []).append(t)
    pairs = [(m, by_scene[m.scene_id]) for m in manifests if m.scene_id in by_scene]
    if not pairs:
        raise CliError("no trajectories match the preprocessed scenes")
    presets = a.presets
    sim = harness.SimConfig(horizon=a.horizon, dt=a.dt, max_slots=a.max_slots)

    def factory(episode, rng):
        m, users = pairs[int(rng.integers(len(pairs)))]
        traj = users[int(rng.integers(len(users)))]
        trace = traces[int(rng.integers(len(traces)))].scaled(presets[int(rng.integers(len(presets)))])
        return harness.make_env(m, traj, trace, sim)

    n_levels = {m.n_levels for m, _ in pairs}
    edges = {m.tile_edge for m, _ in pairs}
    if len(n_levels) != 1 or len(edges) != 1:
        raise CliError("all training scenes must share the ladder depth and tile edge")
    agent, rows = dba.train(factory, _ddpg_config(a), a.episodes, n_levels.pop(), edges.pop())
    agent.save(a.agent)
    _write(a.log, dba.format_log(rows))


def _make_policy(a, manifest, seed):
    if a.policy == "ddpg":
        if not a.agent:
            raise CliError("--policy ddpg needs --agent")
        agent = dba.DdpgAgent.from_checkpoint(a.agent)
        if agent.n_levels != manifest.n_levels:
            raise CliError(f"agent scores {agent.n_levels} levels, scene has {manifest.n_levels}")
        return harness.Policy("ddpg", manifest.n_levels, manifest.tile_edge, agent, seed)
    return harness.Policy(a.policy, manifest.n_levels, manifest.tile_edge, seed=seed)


def _sim_config(a):
    predictor = None
    if not a.oracle_viewports:
        if not a.cvp_model:
            raise CliError("pass --oracle-viewports or --cvp-model")
        predictor = cvp.cvp_predictor(cvp.CvpModel.load(a.cvp_model))
    return harness.SimConfig(horizon=a.horizon, dt=a.dt, predictor=predictor,
                             max_slots=a.max_slots)


def _pick_user(trajs, user):
    if user is None:
        return trajs[0]
    for t in trajs:
        if t.user_id == user:
            return t
    raise CliError(f"user {user!r} not in trajectory file")


def cmd_simulate(a):
    manifest = scene.read_manifest(a.scene)
    traj = _pick_user(viewport.read_trajectories(a.trajectory, manifest.scene_id, a.rate), a.user)
    if a.trace:
        trace = env.load_trace(a.trace, a.avg_mbps)
    elif a.avg_mbps:
        trace = env.synthetic_trace(a.seed, a.slots, a.avg_mbps)
    else:
        raise CliError("pass --trace and/or --avg-mbps")
    rows, text = harness.run_simulation(manifest, traj, trace, _make_policy(a, manifest, a.seed),
                                        _sim_config(a))
    _write(a.out, text)
    if a.metrics:
        _write(a.metrics, "slot,cumulative_megabytes,coverage,reward\n" + "".join(
            f"{r.slot},{r.cumulative_megabytes!r},{r.coverage!r},{r.reward!r}\n" for r in rows))


def cmd_compare(a):
    manifests = {m.scene_id: m for m in map(scene.read_manifest, _scene_dirs(a.scenes))}
    traces = _load_traces(a.traces)
    runs = []
    for t in _load_trajectories(a.trajectories, a.rate):
        if t.scene_id in manifests and (a.user is None or t.user_id == a.user):
            runs.append((manifests[t.scene_id], t, traces[len(runs) % len(traces)]))
    if not runs:
        raise CliError("no (scene, trajectory) pairs to compare")
    factories = {}
    for kind in a.policies:
        def make(manifest, seed, kind=kind):
            ns = argparse.Namespace(policy=kind, agent=a.agent)
            return _make_policy(ns, manifest, seed)
        factories[kind] = make
    summary, curves = harness.compare_policies(runs, factories, a.presets, a.seeds, _sim_config(a))
    _write(a.out, harness.format_summary(summary))
    if a.curves:
        _write(a.curves, harness.format_curves(curves))
    if a.plot:
        for path in harness.plot_curves(curves, a.plot):
            log.info("wrote %s", path)


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="tilestream",
                                description="Tile-based adaptive streaming simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    q = sub.add_parser("preprocess", help="tile a scene and build its quality ladders")
    q.add_argument("--scene", required=True, help=f"directory holding {SCENE_ANCHORS}")
    q.add_argument("--scene-id")
    q.add_argument("--tile-edge", type=float, default=scene.DEFAULT_EDGE)
    q.add_argument("--voxels", type=_floats, default=scene.DEFAULT_VOXELS)
    q.add_argument("--out", help="per-level summary CSV (default stdout)")
    q.set_defaults(func=cmd_preprocess)

    q = sub.add_parser("synth", help="generate scenes, trajectories and traces")
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--scenes", type=int, default=3)
    q.add_argument("--anchors", type=int, default=100_000)
    q.add_argument("--payload-bytes", type=int, default=256)
    q.add_argument("--extent", type=float, default=9.6)
    q.add_argument("--users", type=int, default=8)
    q.add_argument("--duration", type=float, default=60.0)
    q.add_argument("--rate", type=float, default=viewport.DEFAULT_RATE)
    q.add_argument("--traces", type=int, default=4)
    q.add_argument("--slots", type=int, default=120)
    q.add_argument("--tile-edge", type=float, default=scene.DEFAULT_EDGE)
    q.add_argument("--voxels", type=_floats, default=scene.DEFAULT_VOXELS)
    q.add_argument("--no-preprocess", action="store_true")
    q.add_argument("--log", help="listing of written artifacts (default stdout)")
    q.set_defaults(func=cmd_synth)

    def cvp_args(q):
        q.add_argument("--horizon", type=int, default=30)
        q.add_argument("--lr", type=float, default=1e-5)
        q.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
        q.add_argument("--epochs", type=int, default=10)
        q.add_argument("--batch-size", type=int, default=64)
        q.add_argument("--windows-per-epoch", type=int)
        q.add_argument("--position-scale", type=float, default=4.8)
        g = q.add_mutually_exclusive_group()
        g.add_argument("--no-cpe", action="store_true")
        g.add_argument("--no-hpe", action="store_true")

    q = sub.add_parser("train-cvp", help="train the viewport predictor")
    q.add_argument("--data", required=True, help="trajectory CSV file or directory")
    q.add_argument("--model", default="cvp.gsnn")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--rate", type=float, default=viewport.DEFAULT_RATE)
    q.add_argument("--log")
    cvp_args(q)
    q.set_defaults(func=cmd_train_cvp)

    q = sub.add_parser("eval-cvp", help="position/rotation MAE of a trained predictor")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--stride", type=int, default=1)
    q.add_argument("--rate", type=float, default=viewport.DEFAULT_RATE)
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval_cvp)

    q = sub.add_parser("train-dba", help="train the DDPG bitrate agent")
    q.add_argument("--scenes", required=True, help="preprocessed scene directory or parent")
    q.add_argument("--traces", required=True)
    q.add_argument("--trajectories", help="default: <scenes>/../trajectories")
    q.add_argument("--episodes", type=int, default=100)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--agent", default="agent.gsnn")
    q.add_argument("--log")
    q.add_argument("--presets", type=_floats, default=(40.0, 80.0, 120.0))
    q.add_argument("--horizon", type=int, default=30)
    q.add_argument("--dt", type=float, default=1.0)
    q.add_argument("--max-slots", type=int, default=30)
    q.add_argument("--rate", type=float, default=viewport.DEFAULT_RATE)
    q.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    q.add_argument("--actor-lr", type=float, default=1e-4)
    q.add_argument("--critic-lr", type=float, default=1e-3)
    q.add_argument("--updates", type=int, default=1, help="updates per episode")
    q.add_argument("--width", type=int, default=32)
    q.add_argument("--sa-centroids", type=int, default=64)
    q.add_argument("--checkpoint-every", type=int, default=0)
    q.set_defaults(func=cmd_train_dba)

    def sim_args(q):
        q.add_argument("--horizon", type=int, default=30)
        q.add_argument("--dt", type=float, default=1.0)
        q.add_argument("--oracle-viewports", action="store_true")
        q.add_argument("--cvp-model")
        q.add_argument("--max-slots", type=int)
        q.add_argument("--rate", type=float, default=viewport.DEFAULT_RATE)
        q.add_argument("--agent", help="DDPG checkpoint for the ddpg policy")
        q.add_argument("--user", help="user id (default: first in file)")

    q = sub.add_parser("simulate", help="stream one session and log every slot")
    q.add_argument("--scene", required=True)
    q.add_argument("--trajectory", required=True)
    q.add_argument("--trace")
    q.add_argument("--avg-mbps", type=float, choices=(40.0, 80.0, 120.0))
    q.add_argument("--slots", type=int, default=120, help="synthetic trace length")
    q.add_argument("--policy", choices=harness.POLICY_KINDS, default="viewport-greedy")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.add_argument("--metrics", help="per-slot cumulative megabytes CSV")
    sim_args(q)
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("compare", help="coverage of several policies across presets")
    q.add_argument("--scenes", required=True)
    q.add_argument("--trajectories", required=True)
    q.add_argument("--traces", required=True)
    q.add_argument("--policies", type=lambda s: tuple(s.split(",")),
                   default=("distance", "viewport-greedy", "random"))
    q.add_argument("--presets", type=_floats, default=(40.0, 80.0, 120.0))
    q.add_argument("--seeds", type=lambda s: tuple(int(v) for v in s.split(",")), default=(0,))
    q.add_argument("--out")
    q.add_argument("--curves", help="per-slot mean/std CSV")
    q.add_argument("--plot", help="file prefix for per-preset PNG charts")
    sim_args(q)
    q.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one machine-readable line, no traceback
        if args.verbose:
            log.exception("failed")
        err = {"verb": args.verb, "type": type(exc).__name__, "message": str(exc)}
        print("error: " + json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    return 0
