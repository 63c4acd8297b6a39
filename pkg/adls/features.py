"""Per-pixel feature vectors built from HSV color and the nearest measured pixels.

Layouts, for k neighbors (k = 3 gives 26 and 14 features):

    rgbd: [h, s, v, x, y] + k * [depth, l1dist, dx, dy, dh, ds, dv]
    d:    [x, y]          + k * [depth, l1dist, dx, dy]

x is the column and y the row. Missing neighbors (fewer than k measured
pixels) are filled with depth 0, distance width + height and zero deltas.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from adls.errors import ConfigError, EmptySceneError
from adls.imaging import rgb_to_hsv_image
from adls.models import SampleMap, Scenario, Scene

# Batch queries keep (queries x samples) distance blocks below this many entries.
_BLOCK_ENTRIES = 4_000_000


class Neighbor(NamedTuple):
    row: int
    col: int
    depth: float
    distance: int


def feature_count(scenario: Scenario, k: int = 3) -> int:
    return 5 + 7 * k if scenario is Scenario.RGBD else 2 + 4 * k


class MeasuredIndex:
    """Exact k-nearest measured pixels under L1; ties go to the lower row-major index.

    Single queries use an expanding ring search over a bucket grid (plain scan
    below BRUTE_FORCE_BELOW samples); batch queries scan vectorized blocks.
    """

    BRUTE_FORCE_BELOW = 64

    def __init__(self, samples: SampleMap, bucket: int | None = None) -> None:
        rows, cols = samples.positions()
        self.rows = rows.astype(np.int64)
        self.cols = cols.astype(np.int64)
        self.depths = samples.depths[rows, cols].astype(np.float64)
        self.height, self.width = samples.height, samples.width
        self.size = int(self.rows.size)

        area = self.height * self.width
        self.bucket = bucket or max(4, int(np.sqrt(area / max(self.size, 1))))
        self._grid_rows = -(-self.height // self.bucket)
        self._grid_cols = -(-self.width // self.bucket)
        keys = (self.rows // self.bucket) * self._grid_cols + self.cols // self.bucket
        self._order = np.argsort(keys, kind="stable")
        sorted_keys = keys[self._order]
        cells = np.arange(self._grid_rows * self._grid_cols)
        self._cell_start = np.searchsorted(sorted_keys, cells, side="left")
        self._cell_end = np.searchsorted(sorted_keys, cells, side="right")

    def _cell(self, i: int, j: int) -> np.ndarray:
        cell = i * self._grid_cols + j
        return self._order[self._cell_start[cell]:self._cell_end[cell]]

    def _ring(self, bi: int, bj: int, r: int) -> list[np.ndarray]:
        found = []
        for i in range(max(bi - r, 0), min(bi + r, self._grid_rows - 1) + 1):
            if abs(i - bi) == r:
                cols = range(max(bj - r, 0), min(bj + r, self._grid_cols - 1) + 1)
            else:
                cols = [j for j in (bj - r, bj + r) if 0 <= j < self._grid_cols]
            found.extend(self._cell(i, j) for j in cols)
        return found

    def _outside_bound(self, row: int, col: int, bi: int, bj: int, r: int) -> int | None:
        """Least L1 distance from (row, col) to any pixel outside the visited block."""
        s = self.bucket
        top, bottom = (bi - r) * s, (bi + r + 1) * s - 1
        lft, rgt = (bj - r) * s, (bj + r + 1) * s - 1
        bounds = []
        if top > 0:
            bounds.append(row - top + 1)
        if bottom < self.height - 1:
            bounds.append(bottom + 1 - row)
        if lft > 0:
            bounds.append(col - lft + 1)
        if rgt < self.width - 1:
            bounds.append(rgt + 1 - col)
        return min(bounds) if bounds else None

    def _rank(self, candidates: np.ndarray, row: int, col: int, k: int) -> list[Neighbor]:
        dist = np.abs(self.rows[candidates] - row) + np.abs(self.cols[candidates] - col)
        best = candidates[np.lexsort((candidates, dist))[:k]]
        return [
            Neighbor(int(self.rows[i]), int(self.cols[i]), float(self.depths[i]),
                     int(abs(self.rows[i] - row) + abs(self.cols[i] - col)))
            for i in best
        ]

    def query(self, row: int, col: int, k: int) -> list[Neighbor]:
        if self.size == 0 or k <= 0:
            return []
        if self.size < self.BRUTE_FORCE_BELOW:
            return self._rank(np.arange(self.size), row, col, k)

        bi, bj = row // self.bucket, col // self.bucket
        found: list[np.ndarray] = []
        r = 0
        while True:
            found.extend(self._ring(bi, bj, r))
            bound = self._outside_bound(row, col, bi, bj, r)
            if bound is None:
                break
            candidates = np.concatenate(found) if found else np.empty(0, dtype=np.intp)
            if candidates.size >= k:
                dist = np.abs(self.rows[candidates] - row) + np.abs(self.cols[candidates] - col)
                if np.partition(dist, k - 1)[k - 1] < bound:
                    break
            r += 1
        return self._rank(np.concatenate(found), row, col, k)

    def query_many(self, rows: np.ndarray, cols: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor indices and L1 distances, shape (queries, k); -1 pads missing neighbors."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        idx = np.full((rows.size, k), -1, dtype=np.int64)
        dist = np.full((rows.size, k), -1, dtype=np.int64)
        kk = min(k, self.size)
        if kk == 0:
            return idx, dist
        ids = np.arange(self.size, dtype=np.int64)
        chunk = max(1, _BLOCK_ENTRIES // self.size)
        for start in range(0, rows.size, chunk):
            r = rows[start:start + chunk, None]
            c = cols[start:start + chunk, None]
            d = np.abs(r - self.rows[None, :]) + np.abs(c - self.cols[None, :])
            key = d * self.size + ids[None, :]   # unique per sample: distance, then row-major index
            if kk < self.size:
                part = np.argpartition(key, kk - 1, axis=1)[:, :kk]
            else:
                part = np.broadcast_to(ids, key.shape).copy()
            part = np.take_along_axis(part, np.argsort(np.take_along_axis(key, part, axis=1), axis=1), axis=1)
            idx[start:start + chunk, :kk] = part
            dist[start:start + chunk, :kk] = np.take_along_axis(d, part, axis=1)
        return idx, dist


def nearest_measured(samples: SampleMap, pixel: tuple[int, int], k: int = 3) -> list[Neighbor]:
    """Up to k measured pixels nearest to (row, col), the pixel itself included."""
    return MeasuredIndex(samples).query(pixel[0], pixel[1], k)


def build_feature_matrix(
    scene: Scene,
    rows: np.ndarray,
    cols: np.ndarray,
    scenario: Scenario,
    k: int = 3,
    index: MeasuredIndex | None = None,
    hsv: np.ndarray | None = None,
) -> np.ndarray:
    """Feature rows for the given pixels against the scene's current samples."""
    if scenario is Scenario.RGBD and scene.rgb is None:
        raise ConfigError(f"scene {scene.id}: rgbd scenario needs an RGB image")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    index = index or MeasuredIndex(scene.samples)
    nbr, dist = index.query_many(rows, cols, k)
    real = nbr >= 0
    safe = np.where(real, nbr, 0)
    x = cols.astype(np.float64)
    y = rows.astype(np.float64)

    if index.size:
        n_rows, n_cols, n_depth = index.rows[safe], index.cols[safe], index.depths[safe]
    else:
        n_rows = n_cols = np.zeros_like(safe)
        n_depth = np.zeros(safe.shape)
    blocks = [
        np.where(real, n_depth, 0.0),
        np.where(real, dist, scene.width + scene.height).astype(np.float64),
        np.where(real, n_cols - x[:, None], 0.0),
        np.where(real, n_rows - y[:, None], 0.0),
    ]
    head = [x[:, None], y[:, None]]
    if scenario is Scenario.RGBD:
        if hsv is None:
            hsv = rgb_to_hsv_image(scene.rgb.pixels)
        own = hsv[rows, cols]
        theirs = hsv[n_rows, n_cols]
        blocks += [np.where(real, theirs[..., ch] - own[:, None, ch], 0.0) for ch in range(3)]
        head = [own] + head
    per_neighbor = np.stack(blocks, axis=-1).reshape(rows.size, -1)
    return np.hstack(head + [per_neighbor])


def build_features(scene: Scene, pixel: tuple[int, int], scenario: Scenario, k: int = 3) -> np.ndarray:
    row, col = pixel
    return build_feature_matrix(scene, np.array([row]), np.array([col]), scenario, k)[0]


def build_training_matrix(
    scene: Scene,
    subsample_size: int,
    scenario: Scenario,
    rng: np.random.Generator,
    k: int = 3,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X, y, flat pixel ids) for a uniform subsample of valid-GT pixels."""
    valid = np.flatnonzero(scene.ground_truth.valid.ravel())
    if valid.size == 0:
        raise EmptySceneError(f"scene {scene.id} has no valid ground truth")
    picked = rng.choice(valid, size=min(subsample_size, valid.size), replace=False)
    rows, cols = np.divmod(picked, scene.width)
    X = build_feature_matrix(scene, rows, cols, scenario, k)
    return X, scene.ground_truth.values[rows, cols], picked
