"""Scene model: anchors, cubic tiles and per-tile quality ladders.

A scene is an anchor point cloud (position, 3 scale factors, opaque payload
size). Pre-processing cuts it into cubic tiles and voxel-downsamples each
tile into L nested representations, level L holding every anchor.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

RECORD_BYTES = 24  # position + scaling as 6 x f32
DEFAULT_VOXELS = (0.16, 0.08, 0.04, 0.02, 0.01)
DEFAULT_EDGE = 3.2

REPR_MAGIC = b"GSTL"
REPR_VERSION = 1
MANIFEST_FORMAT = "tilestream-manifest"
MANIFEST_VERSION = 1


class SceneError(ValueError):
    pass


class ParseError(SceneError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Anchor:
    position: tuple
    scaling: tuple
    payload_bytes: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.scaling):
            raise SceneError(f"scaling must be positive, got {self.scaling}")
        if self.payload_bytes < 0:
            raise SceneError("payload_bytes must be non-negative")


@dataclass
class AnchorSet:
    """Structure-of-arrays anchor storage; the form every operation works on."""

    positions: np.ndarray
    scalings: np.ndarray
    payload: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.scalings = np.asarray(self.scalings, dtype=np.float64).reshape(-1, 3)
        self.payload = np.asarray(self.payload, dtype=np.int64).reshape(-1)
        n = len(self.positions)
        if len(self.scalings) != n or len(self.payload) != n:
            raise SceneError("positions, scalings and payload lengths differ")
        if n and (self.scalings <= 0).any():
            raise SceneError("all scaling components must be > 0")
        if (self.payload < 0).any():
            raise SceneError("payload_bytes must be non-negative")

    def __len__(self):
        return len(self.positions)

    def subset(self, idx):
        return AnchorSet(self.positions[idx], self.scalings[idx], self.payload[idx])

    @classmethod
    def from_anchors(cls, anchors):
        if isinstance(anchors, AnchorSet):
            return anchors
        anchors = list(anchors)
        if not anchors:
            return cls(np.zeros((0, 3)), np.ones((0, 3)), np.zeros(0, int))
        return cls([a.position for a in anchors], [a.scaling for a in anchors],
                   [a.payload_bytes for a in anchors])

    def to_anchors(self):
        return [Anchor(tuple(p), tuple(s), int(b))
                for p, s, b in zip(self.positions, self.scalings, self.payload)]

    def __eq__(self, other):
        return (isinstance(other, AnchorSet)
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.scalings, other.scalings)
                and np.array_equal(self.payload, other.payload))


@dataclass
class Representation:
    level: int
    bits: int
    points: int
    importance: float
    anchors: AnchorSet = None

    @property
    def anchor_count(self):
        return self.points


@dataclass
class Tile:
    index: tuple
    center: np.ndarray
    representations: list = field(default_factory=list)

    @property
    def anchors(self):
        return self.representations[-1].anchors


def importance_score(representation):
    """Sum over anchors of the product of their three scale factors."""
    anchors = representation.anchors if isinstance(representation, Representation) \
        else AnchorSet.from_anchors(representation)
    if anchors is None or len(anchors) == 0:
        return 0.0
    return float(np.prod(anchors.scalings, axis=1).sum())


def representation_bits(anchors):
    return 8 * (RECORD_BYTES * len(anchors) + int(anchors.payload.sum()))


def tile_scene(anchors, edge=DEFAULT_EDGE, origin=(0.0, 0.0, 0.0)):
    """Partition anchors into cubic tiles by floor division of (pos - origin) / edge.

    Only occupied tiles are returned, sorted by grid index. Each tile carries a
    single full-resolution representation; ``build_ladders`` adds the rest.
    """
    anchors = AnchorSet.from_anchors(anchors)
    if len(anchors) == 0:
        raise SceneError("cannot tile an empty anchor list")
    if edge <= 0:
        raise SceneError("tile edge must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    keys = np.floor((anchors.positions - origin) / edge).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    tiles = []
    for t, key in enumerate(uniq):
        members = anchors.subset(np.nonzero(inverse == t)[0])
        center = origin + (key + 0.5) * edge
        full = Representation(1, representation_bits(members), len(members),
                              importance_score(members), members)
        tiles.append(Tile(tuple(int(v) for v in key), center, [full]))
    return tiles


def _voxel_select(anchors, candidates, voxel, origin):
    """Keep one candidate per voxel occupied by ``anchors``.

    The winner is the candidate nearest the centroid of all anchors in the
    voxel; ties go to the lower index.
    """
    keys = np.floor((anchors.positions - origin) / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    centroids = np.zeros((len(uniq), 3))
    np.add.at(centroids, inverse, anchors.positions)
    centroids /= counts[:, None]
    cvox = inverse[candidates]
    dist = np.linalg.norm(anchors.positions[candidates] - centroids[cvox], axis=1)
    order = np.lexsort((candidates, dist, cvox))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cvox[order][1:] != cvox[order][:-1]
    return np.sort(candidates[order][first])


def downsample_tile(tile_anchors, voxel_sizes=DEFAULT_VOXELS, origin=(0.0, 0.0, 0.0)):
    """Build the L = len(voxel_sizes) + 1 level ladder for one tile.

    Levels are built finest-first and nested: each coarser level picks its
    representatives from the next finer level, which keeps bits and points
    non-decreasing in level for any payload sizes.
    """
    anchors = AnchorSet.from_anchors(tile_anchors)
    voxel_sizes = [float(v) for v in voxel_sizes]
    if any(b >= a for a, b in zip(voxel_sizes, voxel_sizes[1:])):
        raise SceneError(f"voxel sizes must be strictly decreasing: {voxel_sizes}")
    if any(v <= 0 for v in voxel_sizes):
        raise SceneError("voxel sizes must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    L = len(voxel_sizes) + 1
    selected = [None] * L
    selected[L - 1] = np.arange(len(anchors))
    for lvl in range(L - 2, -1, -1):
        selected[lvl] = _voxel_select(anchors, selected[lvl + 1], voxel_sizes[lvl], origin)
    ladder = []
    for lvl, idx in enumerate(selected):
        sub = anchors.subset(idx)
        ladder.append(Representation(lvl + 1, representation_bits(sub), len(sub),
                                     importance_score(sub), sub))
    return ladder


def build_ladders(tiles, voxel_sizes=DEFAULT_VOXELS, origin=(0.0, 0.0, 0.0)):
    for tile in tiles:
        tile.representations = downsample_tile(tile.anchors, voxel_sizes, origin)
    return tiles


@dataclass
class LadderViolation:
    tile: tuple
    quantity: str
    level_low: int
    level_high: int

    def __str__(self):
        return (f"tile {self.tile}: {self.quantity} decreases from level "
                f"{self.level_low} to {self.level_high}")


def validate_ladder(tile):
    """Return None if bits and points are non-decreasing in level, else the
    first violating adjacent level pair (1-based levels)."""
    reps = tile.representations if isinstance(tile, Tile) else tile.levels
    index = tile.index
    for lo, hi in zip(reps, reps[1:]):
        for quantity in ("bits", "points"):
            if getattr(hi, quantity) < getattr(lo, quantity):
                return LadderViolation(index, quantity, lo.level, hi.level)
    return None


def gen_synthetic_scene(seed, n_anchors, extent=9.6, n_blobs=None, payload_bytes=64):
    """Clustered anchors: a Gaussian-blob mixture clipped to the extent cube."""
    if n_anchors < 1:
        raise SceneError("n_anchors must be >= 1")
    rng = np.random.default_rng(seed)
    half = extent / 2
    n_blobs = int(rng.integers(3, 9)) if n_blobs is None else n_blobs
    centers = rng.uniform(-0.7 * half, 0.7 * half, (n_blobs, 3))
    sigmas = rng.uniform(0.04, 0.18, n_blobs) * extent
    weights = rng.dirichlet(np.full(n_blobs, 0.8))
    comp = rng.choice(n_blobs, size=n_anchors, p=weights)
    pos = centers[comp] + rng.normal(size=(n_anchors, 3)) * sigmas[comp, None]
    # stored at f32 precision so representation files round-trip exactly;
    # the clip limit is the largest f32 not beyond the half extent
    lim = np.float32(half)
    if float(lim) > half:
        lim = np.nextafter(lim, np.float32(0))
    pos = np.clip(pos, -lim, lim).astype(np.float32).astype(np.float64)
    scale = np.exp(rng.normal(np.log(0.03), 0.4, (n_anchors, 3)))
    scale = scale.astype(np.float32).astype(np.float64)
    payload = np.full(n_anchors, payload_bytes, dtype=np.int64)
    return AnchorSet(pos, scale, payload)


# --------------------------------------------------------------------------
# representation files


def encode_representation(anchors):
    anchors = AnchorSet.from_anchors(anchors)
    parts = [REPR_MAGIC, struct.pack("<HI", REPR_VERSION, len(anchors))]
    for p, s, n in zip(anchors.positions, anchors.scalings, anchors.payload):
        parts.append(struct.pack("<6fH", *p, *s, int(n)))
        parts.append(bytes(int(n)))
    return b"".join(parts)


def decode_representation(buf):
    if len(buf) < 4 or buf[:4] != REPR_MAGIC:
        raise ParseError("bad magic", 0)
    if len(buf) < 10:
        raise ParseError("truncated header", len(buf))
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != REPR_VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    off = 10
    pos = np.empty((count, 3))
    scl = np.empty((count, 3))
    pay = np.empty(count, dtype=np.int64)
    rec = struct.calcsize("<6fH")
    for i in range(count):
        if off + rec > len(buf):
            raise ParseError(f"truncated anchor record {i}", off)
        vals = struct.unpack_from("<6fH", buf, off)
        off += rec
        if off + vals[6] > len(buf):
            raise ParseError(f"truncated payload of anchor {i}", off)
        off += vals[6]
        pos[i], scl[i], pay[i] = vals[:3], vals[3:6], vals[6]
    if off != len(buf):
        raise ParseError("trailing bytes after last anchor", off)
    return AnchorSet(pos, scl, pay)


def write_representation(path, anchors):
    with open(path, "wb") as f:
        f.write(encode_representation(anchors))


def read_representation(path):
    with open(path, "rb") as f:
        return decode_representation(f.read())


# --------------------------------------------------------------------------
# manifest


@dataclass
class LevelEntry:
    level: int
    bits: int
    points: int
    importance: float
    path: str = ""


@dataclass
class TileEntry:
    index: tuple
    center: tuple
    levels: list


@dataclass
class SceneManifest:
    scene_id: str
    tile_edge: float
    grid_origin: tuple
    voxel_sizes: tuple
    tiles: list

    def __post_init__(self):
        if not self.tiles:
            raise SceneError("a manifest needs at least one tile")
        seen = set()
        for t in self.tiles:
            if tuple(t.index) in seen:
                raise SceneError(f"duplicate tile index {t.index}")
            seen.add(tuple(t.index))
            if len(t.levels) != self.n_levels:
                raise SceneError(f"tile {t.index} has {len(t.levels)} levels, "
                                 f"expected {self.n_levels}")
        if any(b >= a for a, b in zip(self.voxel_sizes, self.voxel_sizes[1:])):
            raise SceneError("voxel sizes must be strictly decreasing")
        self._arrays = None

    @property
    def n_tiles(self):
        return len(self.tiles)

    @property
    def n_levels(self):
        return len(self.voxel_sizes) + 1

    def _table(self, attr):
        return np.array([[getattr(lv, attr) for lv in t.levels] for t in self.tiles],
                        dtype=np.float64)

    @property
    def bits(self):
        """(K, L) bits per representation."""
        return self._cached("bits")

    @property
    def points(self):
        return self._cached("points")

    @property
    def importance(self):
        return self._cached("importance")

    @property
    def centers(self):
        return self._cached("centers")

    def _cached(self, key):
        if self._arrays is None:
            self._arrays = {
                "bits": self._table("bits"),
                "points": self._table("points"),
                "importance": self._table("importance"),
                "centers": np.array([t.center for t in self.tiles], dtype=np.float64),
            }
        return self._arrays[key]

    def bounds(self):
        """Axis-aligned bounds of the tiled volume (min corner, max corner)."""
        half = self.tile_edge / 2
        return self.centers.min(0) - half, self.centers.max(0) + half

    def to_dict(self):
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "scene_id": self.scene_id,
            "tile_edge": self.tile_edge,
            "grid_origin": list(self.grid_origin),
            "voxel_sizes": list(self.voxel_sizes),
            "tiles": [{
                "index": list(t.index),
                "center": list(t.center),
                "levels": [{"level": lv.level, "bits": lv.bits, "points": lv.points,
                            "importance": lv.importance, "path": lv.path}
                           for lv in t.levels],
            } for t in self.tiles],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != MANIFEST_FORMAT:
            raise SceneError(f"not a scene manifest (format={doc.get('format')!r})")
        if doc.get("version") != MANIFEST_VERSION:
            raise SceneError(f"unsupported manifest version {doc.get('version')!r}")
        tiles = [TileEntry(tuple(t["index"]), tuple(float(c) for c in t["center"]),
                           [LevelEntry(int(lv["level"]), int(lv["bits"]), int(lv["points"]),
                                       float(lv["importance"]), lv.get("path", ""))
                            for lv in t["levels"]])
                 for t in doc["tiles"]]
        return cls(doc["scene_id"], float(doc["tile_edge"]),
                   tuple(float(v) for v in doc["grid_origin"]),
                   tuple(float(v) for v in doc["voxel_sizes"]), tiles)

    def __eq__(self, other):
        return isinstance(other, SceneManifest) and self.to_dict() == other.to_dict()


def manifest_from_tiles(scene_id, tiles, tile_edge, voxel_sizes, origin=(0.0, 0.0, 0.0)):
    entries = []
    for t in tiles:
        name = "_".join(str(v) for v in t.index)
        levels = [LevelEntry(r.level, int(r.bits), int(r.points), float(r.importance),
                             f"tiles/{name}/L{r.level}.gstl")
                  for r in t.representations]
        entries.append(TileEntry(tuple(t.index), tuple(float(c) for c in t.center), levels))
    return SceneManifest(scene_id, float(tile_edge), tuple(float(v) for v in origin),
                         tuple(float(v) for v in voxel_sizes), entries)


MANIFEST_NAME = "manifest.json"


def write_manifest(scene_dir, manifest, tiles=None):
    """Write ``manifest.json`` and, if tiles are given, every representation file."""
    os.makedirs(scene_dir, exist_ok=True)
    if tiles is not None:
        for t, entry in zip(tiles, manifest.tiles):
            for rep, lv in zip(t.representations, entry.levels):
                path = os.path.join(scene_dir, lv.path)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                write_representation(path, rep.anchors)
    with open(os.path.join(scene_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest.to_dict(), f, indent=1)
    return os.path.join(scene_dir, MANIFEST_NAME)


def read_manifest(scene_dir):
    path = scene_dir if scene_dir.endswith(".json") else os.path.join(scene_dir, MANIFEST_NAME)
    with open(path) as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed manifest: {e.msg}", e.pos) from None
    return SceneManifest.from_dict(doc)


def preprocess(anchors, scene_id="scene", tile_edge=DEFAULT_EDGE,
               voxel_sizes=DEFAULT_VOXELS, origin=(0.0, 0.0, 0.0)):
    """Tile and ladder a scene; returns (tiles, manifest)."""
    tiles = build_ladders(tile_scene(anchors, tile_edge, origin), voxel_sizes, origin)
    return tiles, manifest_from_tiles(scene_id, tiles, tile_edge, voxel_sizes, origin)
