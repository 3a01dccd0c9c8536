"""3D-to-2D reorganization: sort keys, grid sort, V_TI planes, packed V_GF frames."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, DimensionError
from .model import GopModel, attr_slices, mde_level, near_square

EMPTY = -1
DEFAULT_PASSES = 16


def pca3(features):
    """Projections of centered rows onto the top-3 principal directions.

    Each direction is sign-fixed so its components sum to >= 0; directions
    without variance give zero projections.
    """
    a = np.asarray(features, dtype=np.float64)
    n, c = a.shape
    out = np.zeros((n, 3))
    centered = a - a.mean(axis=0)
    if n == 0 or not np.any(centered):
        return out
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, c) * np.finfo(np.float64).eps * s[0]
    for j in range(min(3, len(s))):
        if s[j] <= tol:
            break
        v = vt[j]
        if v.sum() < 0:
            v = -v
        out[:, j] = centered @ v
    return out


def minmax_normalize(columns):
    """Per-column (v - min) / (max - min); constant columns map to 0.5."""
    a = np.asarray(columns, dtype=np.float64)
    if a.size == 0:
        return a.copy()
    lo = a.min(axis=0)
    span = a.max(axis=0) - lo
    flat = span == 0
    out = (a - lo) / np.where(flat, 1.0, span)
    out[:, flat] = 0.5
    return out


def sort_keys(model: GopModel):
    return minmax_normalize(np.hstack([model.x.astype(np.float64), pca3(model.f)]))


def _spread_bits(v, nbits, stride):
    out = np.zeros_like(v, dtype=np.uint64)
    for b in range(nbits):
        out |= ((v >> np.uint64(b)) & np.uint64(1)) << np.uint64(b * stride)
    return out


def morton3(keys, bits=10):
    q = np.clip(np.floor(np.asarray(keys)[:, :3] * ((1 << bits) - 1) + 0.5), 0, (1 << bits) - 1)
    q = q.astype(np.uint64)
    return (_spread_bits(q[:, 0], bits, 3) | (_spread_bits(q[:, 1], bits, 3) << np.uint64(1))
            | (_spread_bits(q[:, 2], bits, 3) << np.uint64(2)))


def morton_init(keys, grid_h, grid_w):
    """Anchors in 3D Morton order laid along the grid's 2D Z-order curve."""
    n = len(keys)
    if grid_h * grid_w < n:
        raise ConfigError(f"grid {grid_h}x{grid_w} too small for {n} anchors")
    anchor_order = np.lexsort((np.arange(n), morton3(keys)))
    rows, cols = np.divmod(np.arange(grid_h * grid_w, dtype=np.uint64), np.uint64(grid_w))
    cell_code = _spread_bits(rows, 16, 2) << np.uint64(1) | _spread_bits(cols, 16, 2)
    cell_order = np.argsort(cell_code, kind="stable")
    grid = np.full(grid_h * grid_w, EMPTY, dtype=np.int64)
    grid[cell_order[:n]] = anchor_order
    return grid.reshape(grid_h, grid_w)


@njit(cache=True)
def _local_energy(grid, keys, y, x):
    a = grid[y, x]
    if a < 0:
        return 0.0
    H, W = grid.shape
    d = keys.shape[1]
    total = 0.0
    for k in range(4):
        ny, nx = y, x
        if k == 0:
            ny = y + 1
        elif k == 1:
            ny = y - 1
        elif k == 2:
            nx = x + 1
        else:
            nx = x - 1
        if ny < 0 or ny >= H or nx < 0 or nx >= W:
            continue
        b = grid[ny, nx]
        if b < 0:
            continue
        for c in range(d):
            diff = keys[a, c] - keys[b, c]
            total += diff * diff
    return total


@njit(cache=True)
def _refine_pass(grid, keys, order, dys, dxs):
    H, W = grid.shape
    accepted = 0
    for i in range(order.size):
        ay = order[i] // W
        ax = order[i] % W
        by = min(max(ay + dys[i], 0), H - 1)
        bx = min(max(ax + dxs[i], 0), W - 1)
        if ay == by and ax == bx:
            continue
        a = grid[ay, ax]
        b = grid[by, bx]
        if a < 0 and b < 0:
            continue
        before = _local_energy(grid, keys, ay, ax) + _local_energy(grid, keys, by, bx)
        grid[ay, ax] = b
        grid[by, bx] = a
        after = _local_energy(grid, keys, ay, ax) + _local_energy(grid, keys, by, bx)
        if after < before - 1e-12:
            accepted += 1
        else:
            grid[ay, ax] = a
            grid[by, bx] = b
    return accepted


def grid_sort(keys, grid_h, grid_w, seed=0, passes=DEFAULT_PASSES):
    """Morton initialization refined by greedy swaps of nearby cells.

    A swap is kept only if it strictly lowers the summed squared key distance
    between 4-neighbours; the swap radius halves each pass down to 1.
    Deterministic for a given seed.
    """
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    grid = morton_init(keys, grid_h, grid_w)
    cells = grid_h * grid_w
    if cells < 2:
        return grid
    rng = np.random.default_rng(seed)
    radius = max(grid_h, grid_w) // 2
    for _ in range(passes):
        r = max(radius, 1)
        order = rng.permutation(cells).astype(np.int64)
        dys = rng.integers(-r, r + 1, cells).astype(np.int64)
        dxs = rng.integers(-r, r + 1, cells).astype(np.int64)
        _refine_pass(grid, keys, order, dys, dxs)
        radius //= 2
    return grid


def smoothness_energy(ti_grid, keys):
    """Sum of squared key distances over horizontally/vertically adjacent occupied cells."""
    g = np.asarray(ti_grid)
    keys = np.asarray(keys, dtype=np.float64)
    total = 0.0
    for a, b in ((g[:, :-1], g[:, 1:]), (g[:-1, :], g[1:, :])):
        both = (a >= 0) & (b >= 0)
        if both.any():
            total += float(((keys[a[both]] - keys[b[both]]) ** 2).sum())
    return total


@dataclass(frozen=True, eq=False)
class LayoutMaps:
    ti_grid: np.ndarray  # (grid_h, grid_w) anchor index or EMPTY
    gf_order: np.ndarray  # anchors with streams, in ti_grid row-major order
    gf_dims: tuple

    def scan_order(self):
        """All anchors in row-major ti_grid order."""
        flat = self.ti_grid.ravel()
        return flat[flat >= 0]

    @property
    def n_empty(self):
        return int((self.ti_grid < 0).sum())

    def __eq__(self, other):
        return (isinstance(other, LayoutMaps) and self.gf_dims == other.gf_dims
                and np.array_equal(self.ti_grid, other.ti_grid)
                and np.array_equal(self.gf_order, other.gf_order))


def gf_order_from(ti_grid, present):
    """Decoder-side V_GF order: occupied cells in scan order whose anchor has a stream."""
    flat = np.asarray(ti_grid).ravel()
    flat = flat[flat >= 0]
    return flat[np.asarray(present, dtype=bool)[flat]]


def layout_from_grid(ti_grid, present):
    gf_order = gf_order_from(ti_grid, present)
    return LayoutMaps(np.asarray(ti_grid, dtype=np.int64), gf_order, near_square(len(gf_order)))


def check_grid(ti_grid, n_anchors):
    flat = np.asarray(ti_grid).ravel()
    used = flat[flat >= 0]
    if len(used) != n_anchors or not np.array_equal(np.sort(used), np.arange(n_anchors)):
        raise DimensionError("ti_grid is not a permutation of the anchors")
    if np.any(flat < EMPTY):
        raise DimensionError("ti_grid holds invalid cell values")


def build_layout(model: GopModel, seed=0) -> LayoutMaps:
    cfg = model.config
    keys = sort_keys(model)
    ti_grid = grid_sort(keys, cfg.grid_h, cfg.grid_w, seed)
    return layout_from_grid(ti_grid, mde_level(model.m_de) > 0)


def _vti_channels(model: GopModel):
    n, K = model.config.n_anchors, model.config.K
    return np.concatenate([
        model.x, model.attr_scale, model.offset_scale, model.offsets.reshape(n, 3 * K),
        model.m_de[:, None], model.m_knn[:, None], model.m_dy[:, None], model.f,
    ], axis=1)


def assemble_vti(model: GopModel, layout: LayoutMaps):
    """(12 + 3K + C, grid_h, grid_w) float32 planes; EMPTY cells are zero."""
    cfg = model.config
    g = layout.ti_grid
    if g.shape != (cfg.grid_h, cfg.grid_w):
        raise DimensionError(f"layout grid {g.shape} does not match config")
    check_grid(g, cfg.n_anchors)
    per_anchor = _vti_channels(model)
    planes = np.zeros((per_anchor.shape[1],) + g.shape, dtype=np.float32)
    occ = g >= 0
    planes[:, occ] = per_anchor[g[occ]].T
    return planes


def disassemble_vti(planes, layout: LayoutMaps, K, C):
    """Inverse of assemble_vti: dict of per-anchor float32 arrays in anchor order."""
    g = layout.ti_grid
    if planes.shape != (12 + 3 * K + C,) + g.shape:
        raise DimensionError(f"planes {planes.shape} do not match K={K}, C={C}, grid {g.shape}")
    occ = g >= 0
    n = int(occ.sum())
    rows = np.empty((n, planes.shape[0]), dtype=np.float32)
    rows[g[occ]] = planes[:, occ].T
    sl = attr_slices(K)
    return {
        "x": rows[:, sl["x"]], "attr_scale": rows[:, sl["attr_scale"]],
        "offset_scale": rows[:, sl["offset_scale"]],
        "offsets": rows[:, sl["offsets"]].reshape(n, K, 3),
        "m_de": rows[:, sl["m_de"]][:, 0], "m_knn": rows[:, sl["m_knn"]][:, 0],
        "m_dy": rows[:, sl["m_dy"]][:, 0], "f": rows[:, 12 + 3 * K:],
    }


def pack_vgf(model: GopModel, layout: LayoutMaps):
    """(N, P, h, w) frames: streams of gf_order anchors, row-major, zero-padded tail."""
    cfg = model.config
    h, w = layout.gf_dims
    L = len(layout.gf_order)
    out = np.zeros((cfg.N, cfg.P, h * w), dtype=np.float32)
    if L:
        # streams[gf_order] is (L, N, P)
        out[:, :, :L] = model.streams[layout.gf_order].transpose(1, 2, 0)
    return out.reshape(cfg.N, cfg.P, h, w)


def unpack_vgf(frames, layout: LayoutMaps, n_anchors):
    """Inverse of pack_vgf: (streams (n, N, P), present (n,))."""
    N, P = frames.shape[:2]
    L = len(layout.gf_order)
    h, w = layout.gf_dims
    if frames.shape[2:] != (h, w):
        raise DimensionError(f"frames {frames.shape} do not match gf_dims {layout.gf_dims}")
    streams = np.zeros((n_anchors, N, P), dtype=np.float32)
    present = np.zeros(n_anchors, dtype=bool)
    if L:
        streams[layout.gf_order] = frames.reshape(N, P, h * w)[:, :, :L].transpose(2, 0, 1)
        present[layout.gf_order] = True
    return streams, present
