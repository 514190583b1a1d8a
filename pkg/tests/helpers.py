"""Small builders shared by the tests."""
import numpy as np

from tilestream.scene import LevelEntry, SceneManifest, TileEntry


def make_manifest(bits, points=None, importance=None, centers=None, edge=1.0, scene_id="m"):
    """Manifest straight from (K, L) tables; tiles sit on a line along +x by default."""
    bits = np.asarray(bits)
    K, L = bits.shape
    points = np.arange(1, L + 1)[None].repeat(K, 0) if points is None else np.asarray(points)
    importance = points * 0.5 if importance is None else np.asarray(importance)
    if centers is None:
        centers = [((k + 0.5) * edge, 0.5 * edge, 0.5 * edge) for k in range(K)]
    tiles = [TileEntry((k, 0, 0), tuple(map(float, centers[k])),
                       [LevelEntry(l + 1, int(bits[k, l]), int(points[k, l]),
                                   float(importance[k, l])) for l in range(L)])
             for k in range(K)]
    voxels = tuple(0.5 ** (i + 1) for i in range(L - 1))
    return SceneManifest(scene_id, float(edge), (0.0, 0.0, 0.0), voxels, tiles)


def random_ladder_manifest(rng, K, L, edge=1.0):
    inc = rng.integers(1, 40, (K, L))
    bits = np.cumsum(inc, axis=1) * 8
    points = np.cumsum(rng.integers(1, 10, (K, L)), axis=1)
    importance = np.cumsum(rng.uniform(0.1, 2.0, (K, L)), axis=1)
    return make_manifest(bits, points, importance, edge=edge)
