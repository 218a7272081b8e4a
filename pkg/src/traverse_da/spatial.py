"""Voxel-hash index for exact fixed-radius neighbour queries.

The cell edge equals the query radius, so every neighbour of a query lies in
the 3x3x3 block of cells around the query's own cell. Points are stored
sorted by a packed integer cell key, so the three z-neighbouring cells of
each (x, y) column form one contiguous run. A dense per-column table of key
offsets narrows the binary search to the column's own cells; every
candidate is then tested exactly with a strict ``dist < r``.
The scan loops are compiled with numba.
"""

from __future__ import annotations

import numba
import numpy as np

from .core import PointCloud

# |cell| beyond this would risk overflow when packing keys
MAX_CELL_COORD = 2**40
# above this many (x, y) columns the offset table is skipped (memory)
MAX_COLUMN_TABLE = 2**22


def cell_of(points: np.ndarray, cell_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / cell_size).astype(np.int64)


@numba.njit(cache=True, nogil=True)
def _lower_bound(keys, key, lo, hi):
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


@numba.njit(cache=True, nogil=True)
def _block_ranges(keys, starts, colstart, total, lo, dims, cell, qx, qy, qz, ranges):
    """Point ranges of the 3x3x3 block around the query's cell, one per (x, y) column.

    Cells that differ only in z have consecutive keys, so each column of
    three cells is one contiguous run of the sorted points. ``colstart``
    may be empty, in which case the whole key array is searched.
    """
    table = colstart.shape[0] > 0
    ci = np.int64(np.floor(qx / cell)) - lo[0]
    cj = np.int64(np.floor(qy / cell)) - lo[1]
    ck = np.int64(np.floor(qz / cell)) - lo[2]
    k0 = max(ck - 1, 0)
    k1 = min(ck + 1, dims[2] - 1)
    m = 0
    for di in range(-1, 2):
        a = ci + di
        if a < 0 or a >= dims[0]:
            continue
        for dj in range(-1, 2):
            b = cj + dj
            if b < 0 or b >= dims[1] or k0 > k1:
                continue
            col = a * dims[1] + b
            if table:
                s0, s1 = colstart[col], colstart[col + 1]
                if s0 == s1:
                    continue
            else:
                s0, s1 = np.int64(0), np.int64(keys.shape[0])
            base = col * dims[2]
            i0 = _lower_bound(keys, base + k0, s0, s1)
            i1 = _lower_bound(keys, base + k1 + 1, i0, s1)
            if i0 == i1:
                continue
            ranges[m, 0] = starts[i0]
            ranges[m, 1] = starts[i1] if i1 < keys.shape[0] else total
            m += 1
    return m


@numba.njit(cache=True, nogil=True)
def _scan(points, keys, starts, colstart, lo, dims, cell, r2, queries, mode, values, out_n, out_lo, out_hi, pair_q, pair_p):
    """Shared neighbour scan.

    mode 0: counts only; mode 1: counts + min/max of ``values``; mode 2:
    write pairs into pair_q/pair_p (sized from a previous mode-0 pass).
    Queries should arrive grouped by cell so block ranges can be reused.
    """
    npair = 0
    total = points.shape[0]
    ranges = np.empty((9, 2), dtype=np.int64)
    m = 0
    pi = pj = pk = np.int64(-(2**62))
    for qi in range(queries.shape[0]):
        qx, qy, qz = queries[qi, 0], queries[qi, 1], queries[qi, 2]
        ci = np.int64(np.floor(qx / cell))
        cj = np.int64(np.floor(qy / cell))
        ck = np.int64(np.floor(qz / cell))
        if ci != pi or cj != pj or ck != pk:
            m = _block_ranges(keys, starts, colstart, total, lo, dims, cell, qx, qy, qz, ranges)
            pi, pj, pk = ci, cj, ck
        n = 0
        vlo = np.inf
        vhi = -np.inf
        for j in range(m):
            for p in range(ranges[j, 0], ranges[j, 1]):
                dx = points[p, 0] - qx
                dy = points[p, 1] - qy
                dz = points[p, 2] - qz
                if dx * dx + dy * dy + dz * dz < r2:
                    n += 1
                    if mode == 1:
                        v = values[p]
                        if v < vlo:
                            vlo = v
                        if v > vhi:
                            vhi = v
                    elif mode == 2:
                        pair_q[npair] = qi
                        pair_p[npair] = p
                        npair += 1
        out_n[qi] = n
        if mode == 1:
            out_lo[qi] = vlo
            out_hi[qi] = vhi


@numba.njit(cache=True, nogil=True)
def _root(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@numba.njit(cache=True, nogil=True)
def _link_scan(points, keys, starts, colstart, lo, dims, cell, r2, parent):
    """Union every indexed point with its neighbours closer than sqrt(r2).

    ``points`` are the index's own cell-sorted points, so consecutive
    points mostly share a cell and reuse its block ranges.
    """
    total = points.shape[0]
    ranges = np.empty((9, 2), dtype=np.int64)
    m = 0
    pi = pj = pk = np.int64(-(2**62))
    for qi in range(total):
        qx, qy, qz = points[qi, 0], points[qi, 1], points[qi, 2]
        ci = np.int64(np.floor(qx / cell))
        cj = np.int64(np.floor(qy / cell))
        ck = np.int64(np.floor(qz / cell))
        if ci != pi or cj != pj or ck != pk:
            m = _block_ranges(keys, starts, colstart, total, lo, dims, cell, qx, qy, qz, ranges)
            pi, pj, pk = ci, cj, ck
        for j in range(m):
            for p in range(max(ranges[j, 0], qi + 1), ranges[j, 1]):
                dx = points[p, 0] - qx
                dy = points[p, 1] - qy
                dz = points[p, 2] - qz
                if dx * dx + dy * dy + dz * dz < r2:
                    ra = _root(parent, qi)
                    rb = _root(parent, p)
                    if ra != rb:
                        if ra < rb:
                            parent[rb] = ra
                        else:
                            parent[ra] = rb
    for i in range(total):
        parent[i] = _root(parent, i)


class VoxelIndex:
    """Immutable hash of points by voxel cell of edge ``cell_size``."""

    def __init__(self, points: np.ndarray, cell_size: float, values: np.ndarray | None = None):
        if not cell_size > 0:
            raise ValueError(f"cell size must be > 0, got {cell_size}")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell_size = float(cell_size)
        self.r2 = self.cell_size * self.cell_size
        cells = cell_of(pts, self.cell_size)
        if cells.size and np.abs(cells).max() > MAX_CELL_COORD:
            raise ValueError("point coordinates too large for the voxel key range")
        if len(pts):
            self._lo = cells.min(axis=0) - 1
            self._dims = cells.max(axis=0) + 2 - self._lo
        else:
            self._lo = np.zeros(3, dtype=np.int64)
            self._dims = np.ones(3, dtype=np.int64)
        if float(np.prod(self._dims.astype(np.float64))) >= 2.0**62:
            raise ValueError("cloud extent too large for a single voxel index; split it")
        rel = cells - self._lo
        keys = (rel[:, 0] * self._dims[1] + rel[:, 1]) * self._dims[2] + rel[:, 2]
        order = np.argsort(keys, kind="stable")
        self._order = order
        self.points = np.ascontiguousarray(pts[order])
        self.points.setflags(write=False)
        self._keys, self._starts, self._counts = np.unique(keys[order], return_index=True, return_counts=True)
        self._starts = self._starts.astype(np.int64)
        self._counts = self._counts.astype(np.int64)
        ncol = int(self._dims[0] * self._dims[1])
        if ncol <= MAX_COLUMN_TABLE:
            bounds = np.arange(ncol + 1, dtype=np.int64) * self._dims[2]
            self._colstart = np.searchsorted(self._keys, bounds).astype(np.int64)
        else:
            self._colstart = np.zeros(0, dtype=np.int64)
        self._values = None if values is None else np.ascontiguousarray(np.asarray(values, dtype=np.float64)[order])

    @property
    def total(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.total

    def cells(self) -> dict:
        """Materialise the cell → points mapping (inspection only)."""
        out = {}
        cells = cell_of(self.points, self.cell_size)
        for s, n in zip(self._starts, self._counts):
            out[tuple(int(v) for v in cells[s])] = self.points[s : s + n]
        return out

    def _run(self, queries, mode, n_pairs=0):
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        m = len(q)
        out_n = np.zeros(m, dtype=np.int64)
        out_lo = np.full(m, np.inf)
        out_hi = np.full(m, -np.inf)
        pq = np.zeros(n_pairs, dtype=np.int64)
        pp = np.zeros(n_pairs, dtype=np.int64)
        if self.total and m:
            if np.abs(np.floor(q / self.cell_size)).max(initial=0.0) > MAX_CELL_COORD:
                raise ValueError("query coordinates too large for the voxel key range")
            values = self._values if self._values is not None else np.zeros(1)
            # visiting queries in cell order keeps the scan cache-friendly
            qc = cell_of(q, self.cell_size)
            order = np.lexsort((qc[:, 2], qc[:, 1], qc[:, 0]))
            qs = np.ascontiguousarray(q[order])
            _scan(self.points, self._keys, self._starts, self._colstart, self._lo, self._dims,
                  self.cell_size, self.r2, qs, mode, values, out_n, out_lo, out_hi, pq, pp)
            inv = np.empty_like(order)
            inv[order] = np.arange(m)
            out_n, out_lo, out_hi = out_n[inv], out_lo[inv], out_hi[inv]
            if n_pairs:
                pq = order[pq]
                by_query = np.argsort(pq, kind="stable")
                pq, pp = pq[by_query], pp[by_query]
        return out_n, out_lo, out_hi, pq, pp

    def count_within_many(self, queries: np.ndarray) -> np.ndarray:
        """Exact ``|{p : ||p - q|| < r}|`` for every query row."""
        return self._run(queries, 0)[0]

    def value_range_within(self, queries: np.ndarray):
        """(count, min value, max value) over each query's neighbours."""
        if self._values is None:
            raise ValueError("index was built without per-point values")
        n, lo, hi, _, _ = self._run(queries, 1)
        return n, lo, hi

    def pairs_within(self, queries: np.ndarray):
        """All (query index, original point index) pairs with distance < r, query-major."""
        counts = self.count_within_many(queries)
        _, _, _, pq, pp = self._run(queries, 2, int(counts.sum()))
        return pq, self._order[pp]

    def components(self) -> np.ndarray:
        """Single-linkage component labels of the indexed points (original order).

        Labels are numbered by first occurrence, so they are independent of
        the internal storage order.
        """
        n = self.total
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        parent = np.arange(n, dtype=np.int64)
        _link_scan(self.points, self._keys, self._starts, self._colstart, self._lo, self._dims,
                   self.cell_size, self.r2, parent)
        root = np.empty(n, dtype=np.int64)
        root[self._order] = self._order[parent]  # root as an original index
        _, first, labels = np.unique(root, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(first))
        return rank[labels]


def build_index(cloud, radius: float) -> VoxelIndex:
    points = cloud.points if isinstance(cloud, PointCloud) else cloud
    return VoxelIndex(points, radius)


def count_within(index: VoxelIndex, q) -> int:
    return int(index.count_within_many(np.asarray(q, dtype=np.float64).reshape(1, 3))[0])


def brute_force_count(points: np.ndarray, q, radius: float) -> int:
    """O(n) reference count, used as a test oracle."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return int(np.count_nonzero(np.linalg.norm(pts - np.asarray(q, dtype=np.float64), axis=1) < radius))
