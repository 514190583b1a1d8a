"""6-DoF viewports, trajectory files and frustum visibility of tiles.

Conventions: world frame is right-handed with +z up. A camera with zero
rotation looks along +x. Rotation ``(p, q, r)`` is pitch/yaw/roll in degrees,
applied intrinsically in yaw-pitch-roll order; positive pitch looks up,
positive yaw turns from +x toward +y.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

TRAJECTORY_COLUMNS = ("user_id", "frame", "x", "y", "z", "p", "q", "r")
DEFAULT_RATE = 30.0


class TrajectoryParseError(ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Viewport:
    position: tuple
    rotation: tuple  # pitch, yaw, roll in degrees

    def as_vector(self):
        return np.array([*self.position, *self.rotation], dtype=np.float64)

    @classmethod
    def from_vector(cls, v):
        v = [float(x) for x in v]
        return cls(tuple(v[:3]), tuple(v[3:6]))


@dataclass
class FrustumConfig:
    horizontal_fov: float = 90.0
    vertical_fov: float = 75.0
    near: float = 0.1
    far: float = 50.0

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if not (0 < self.horizontal_fov < 180 and 0 < self.vertical_fov < 180):
            raise ValueError("field of view must lie in (0, 180) degrees")


class Trajectory:
    """Time-ordered viewport samples of one user in one scene.

    Stored as an (N, 6) array of ``x, y, z, p, q, r`` with unwrapped angles.
    """

    def __init__(self, user_id, scene_id, samples, rate=DEFAULT_RATE):
        samples = np.asarray(samples, dtype=np.float64).reshape(-1, 6)
        if len(samples) == 0:
            raise ValueError("a trajectory needs at least one sample")
        self.user_id = str(user_id)
        self.scene_id = str(scene_id)
        self.rate = float(rate)
        self.samples = samples.copy()
        self.samples[:, 3:] = unwrap_degrees(self.samples[:, 3:])

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.rate

    @property
    def positions(self):
        return self.samples[:, :3]

    @property
    def rotations(self):
        return self.samples[:, 3:]

    def viewport(self, frame):
        return Viewport.from_vector(self.samples[frame])

    def viewports(self):
        return [Viewport.from_vector(s) for s in self.samples]

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and self.user_id == other.user_id
                and self.scene_id == other.scene_id and self.rate == other.rate
                and np.array_equal(self.samples, other.samples))

    def __repr__(self):
        return (f"Trajectory(user={self.user_id!r}, scene={self.scene_id!r}, "
                f"frames={len(self)}, rate={self.rate})")


def unwrap_degrees(angles):
    """Remove +-360 jumps along axis 0 so consecutive samples differ by < 180."""
    return np.unwrap(np.asarray(angles, dtype=np.float64), period=360.0, axis=0)


# --------------------------------------------------------------------------
# CSV I/O


def read_trajectories(path, scene_id=None, rate=DEFAULT_RATE):
    """Parse a trajectory CSV that may hold several users; returns a list."""
    if scene_id is None:
        scene_id = os.path.splitext(os.path.basename(path))[0]
    with open(path, newline="") as f:
        return parse_trajectories(f.read(), scene_id, rate)


def parse_trajectories(text, scene_id="scene", rate=DEFAULT_RATE):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TrajectoryParseError("empty file", 1) from None
    header = [h.strip() for h in header]
    missing = [c for c in TRAJECTORY_COLUMNS if c not in header]
    if missing:
        raise TrajectoryParseError(f"missing column(s) {', '.join(missing)}", 1)
    col = {c: header.index(c) for c in TRAJECTORY_COLUMNS}
    rows = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise TrajectoryParseError(f"expected {len(header)} cells, got {len(row)}", lineno)
        user = row[col["user_id"]].strip()
        try:
            frame = int(row[col["frame"]])
            vals = [float(row[col[c]]) for c in TRAJECTORY_COLUMNS[2:]]
        except ValueError as e:
            raise TrajectoryParseError(f"non-numeric cell ({e})", lineno) from None
        rows.setdefault(user, []).append((frame, vals))
    if not rows:
        raise TrajectoryParseError("no samples", 2)
    out = []
    for user, items in rows.items():
        items.sort(key=lambda it: it[0])
        frames = [it[0] for it in items]
        if frames != list(range(len(frames))):
            raise TrajectoryParseError(f"user {user}: frames must run 0..N-1 without gaps", 2)
        out.append(Trajectory(user, scene_id, [it[1] for it in items], rate))
    return out


def parse_trajectory(path, scene_id=None, rate=DEFAULT_RATE):
    trajs = read_trajectories(path, scene_id, rate)
    if len(trajs) != 1:
        raise TrajectoryParseError(f"expected one user, found {len(trajs)}", 1)
    return trajs[0]


def format_trajectories(trajectories):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for traj in trajectories:
        for i, s in enumerate(traj.samples):
            w.writerow([traj.user_id, i] + [repr(float(v)) for v in s])
    return buf.getvalue()


def write_trajectory(path, trajectories):
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    with open(path, "w", newline="") as f:
        f.write(format_trajectories(trajectories))


# --------------------------------------------------------------------------
# geometry


def camera_axes(rotation):
    """Forward, left and up unit vectors for ``(..., 3)`` pitch/yaw/roll degrees."""
    rot = np.radians(np.asarray(rotation, dtype=np.float64))
    p, y, r = rot[..., 0], rot[..., 1], rot[..., 2]
    cp, sp, cy, sy, cr, sr = np.cos(p), np.sin(p), np.cos(y), np.sin(y), np.cos(r), np.sin(r)
    fwd = np.stack([cy * cp, sy * cp, sp], -1)
    left0 = np.stack([-sy, cy, np.zeros_like(y)], -1)
    up0 = np.stack([-cy * sp, -sy * sp, cp], -1)
    # roll turns left/up about the forward axis
    left = cr[..., None] * left0 + sr[..., None] * up0
    up = -sr[..., None] * left0 + cr[..., None] * up0
    return fwd, left, up


def frustum_planes(viewport, cfg):
    """Six inward planes ``(n, d)`` with inside meaning ``n . x + d >= 0``."""
    pos = np.asarray(viewport.position, dtype=np.float64)
    fwd, left, up = camera_axes(viewport.rotation)
    a = np.radians(cfg.horizontal_fov / 2)
    b = np.radians(cfg.vertical_fov / 2)
    normals = np.array([
        fwd,
        -fwd,
        np.sin(a) * fwd - np.cos(a) * left,
        np.sin(a) * fwd + np.cos(a) * left,
        np.sin(b) * fwd - np.cos(b) * up,
        np.sin(b) * fwd + np.cos(b) * up,
    ])
    offsets = -normals @ pos
    offsets[0] -= cfg.near
    offsets[1] += cfg.far
    return normals, offsets


def points_in_frustum(viewport, points, cfg):
    normals, offsets = frustum_planes(viewport, cfg)
    return ((np.asarray(points) @ normals.T + offsets) >= 0).all(-1)


def visible_mask(viewport, centers, edge, cfg):
    """Boolean mask of cubes (centers, edge) that intersect the frustum.

    Plane test with the positive vertex: a cube is culled only when it lies
    entirely behind one plane, so grazing cubes near frustum corners pass.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    normals, offsets = frustum_planes(viewport, cfg)
    reach = (edge / 2) * np.abs(normals).sum(1)
    return ((centers @ normals.T + offsets + reach) >= 0).all(-1)


def _tile_geometry(tiles, edge):
    if hasattr(tiles, "centers") and hasattr(tiles, "tile_edge"):
        return tiles.centers, tiles.tile_edge
    centers = np.array([t.center for t in tiles], dtype=np.float64)
    if edge is None:
        raise ValueError("tile edge required when passing bare tiles")
    return centers, edge


def visible_tiles(viewport, tiles, cfg=None, edge=None):
    """Ids (positions in ``tiles``) of tiles whose cube intersects the frustum.

    ``tiles`` is a SceneManifest, or a sequence of objects with ``center``
    together with ``edge``.
    """
    cfg = cfg or FrustumConfig()
    centers, edge = _tile_geometry(tiles, edge)
    return set(np.nonzero(visible_mask(viewport, centers, edge, cfg))[0].tolist())


def future_visibility(predicted, tiles, cfg=None, edge=None):
    """Per-tile 0/1 vector: 1 if visible from any of the predicted viewports."""
    cfg = cfg or FrustumConfig()
    centers, edge = _tile_geometry(tiles, edge)
    y = np.zeros(len(centers), dtype=np.int64)
    for vp in predicted:
        if not isinstance(vp, Viewport):
            vp = Viewport.from_vector(vp)
        y |= visible_mask(vp, centers, edge, cfg)
    return y


# --------------------------------------------------------------------------
# synthetic trajectories

STYLES = ("orbit", "stationary")


def _user_params(rng, extent, style):
    half = extent / 2
    if style == "orbit":
        return {
            "style": style,
            "center": rng.uniform(-0.15, 0.15, 3) * half * np.array([1, 1, 0]),
            "radius": rng.uniform(0.35, 0.8) * half,
            "omega": rng.choice([-1, 1]) * rng.uniform(0.15, 0.6),
            "phase": rng.uniform(0, 2 * np.pi),
            "height": rng.uniform(1.3, 1.8),
            "breath_amp": rng.uniform(0.0, 0.25) * half,
            "breath_freq": rng.uniform(0.05, 0.2),
            "look_amp": rng.uniform(5, 30),
            "look_freq": rng.uniform(0.1, 0.4),
            "pitch_bias": rng.uniform(-20, 5),
        }
    return {
        "style": style,
        "spot": rng.uniform(-0.5, 0.5, 3) * half * np.array([1, 1, 0]),
        "height": rng.uniform(1.3, 1.8),
        "jitter": rng.uniform(0.02, 0.08),
        "jitter_freq": rng.uniform(0.1, 0.5),
        "yaw0": rng.uniform(-180, 180),
        "turn_rate": rng.choice([-1, 1]) * rng.uniform(5, 40),
        "sweep_amp": rng.uniform(20, 90),
        "sweep_freq": rng.uniform(0.05, 0.25),
        "pitch_bias": rng.uniform(-25, 10),
    }


def _render_user(par, t, rng):
    n = len(t)
    if par["style"] == "orbit":
        ang = par["phase"] + par["omega"] * t
        rad = par["radius"] + par["breath_amp"] * np.sin(2 * np.pi * par["breath_freq"] * t)
        pos = np.stack([par["center"][0] + rad * np.cos(ang),
                        par["center"][1] + rad * np.sin(ang),
                        np.full(n, par["height"])], -1)
        to_c = par["center"][:2] - pos[:, :2]
        yaw = np.degrees(np.arctan2(to_c[:, 1], to_c[:, 0]))
        yaw = unwrap_degrees(yaw) + par["look_amp"] * np.sin(2 * np.pi * par["look_freq"] * t)
        pitch = par["pitch_bias"] + 0.3 * par["look_amp"] * np.cos(
            2 * np.pi * par["look_freq"] * 0.7 * t)
    else:
        w = 2 * np.pi * par["jitter_freq"]
        phases = rng.uniform(0, 2 * np.pi, 3)
        off = par["jitter"] * np.stack([np.sin(w * t + phases[0]),
                                        np.sin(1.3 * w * t + phases[1]),
                                        0.3 * np.sin(0.7 * w * t + phases[2])], -1)
        pos = par["spot"] + np.array([0, 0, par["height"]]) + off
        yaw = (par["yaw0"] + par["turn_rate"] * t
               + par["sweep_amp"] * np.sin(2 * np.pi * par["sweep_freq"] * t))
        pitch = par["pitch_bias"] + 8 * np.sin(2 * np.pi * par["sweep_freq"] * 1.7 * t)
    roll = 2.0 * np.sin(0.5 * t + rng.uniform(0, 2 * np.pi))
    return np.column_stack([pos, pitch, yaw, roll])


def user_styles(seed, n_users, extent=9.6):
    """Persistent per-user style parameters; index i belongs to user ``u{i:02d}``."""
    root = np.random.SeedSequence(seed)
    out = []
    for i, child in enumerate(root.spawn(n_users)):
        rng = np.random.default_rng(child)
        style = STYLES[int(rng.integers(len(STYLES)))]
        out.append(_user_params(rng, extent, style))
    return out


def gen_synthetic_trajectories(seed, n_users, extent=9.6, duration=60.0,
                               rate=DEFAULT_RATE, scene_id="scene", start_time=0.0):
    """Deterministic trajectories of users with persistent viewing styles.

    Users keep their style parameters across scenes (the style depends only on
    ``seed`` and the user index); per-scene noise phases depend on ``scene_id``.
    """
    if duration <= 0 or rate <= 0:
        raise ValueError("duration and rate must be positive")
    n = int(round(duration * rate))
    t = start_time + np.arange(n) / rate
    styles = user_styles(seed, n_users, extent)
    scene_key = int.from_bytes(str(scene_id).encode()[:8].ljust(8, b"\0"), "little")
    out = []
    for i, par in enumerate(styles):
        rng = np.random.default_rng([seed, i, scene_key])
        samples = _render_user(par, t, rng)
        out.append(Trajectory(f"u{i:02d}", scene_id, samples, rate))
    return out
