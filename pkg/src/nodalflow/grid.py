"""Non-graded quadtrees over rectangular domains.

Cells are stored in flat arrays with lower-left corners expressed as integers
at the deepest admissible resolution (2**30 ticks per axis), so corner
deduplication, containment and area accounting are exact. Trees are immutable:
every topology operation returns a new tree with a bumped version stamp, and
derived structures (node set, neighborhood table, point-location data) are
cached lazily on the tree itself.

Neighbor queries follow the hanging-node convention of nodal quadtree
discretizations: a node missing a direct neighbor in some direction receives a
ghost neighbor on the far face of the adjacent coarse leaf, described by the
face corner nodes plus the center node and its two transverse neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

COORD_BITS = 30
COORD_SPAN = 1 << COORD_BITS

LEFT, RIGHT, BOTTOM, TOP = 0, 1, 2, 3
DIRECTION_NAMES = ("left", "right", "bottom", "top")
_OPPOSITE = (RIGHT, LEFT, TOP, BOTTOM)

KIND_DIRECT, KIND_GHOST, KIND_BOUNDARY = 0, 1, 2

_U64 = (1 << 64) - 1


class GridTopologyError(RuntimeError):
    """Raised when a tree violates the one-ghost-per-node assumption."""


def _splitmix64(state: int) -> tuple[int, int]:
    # Deterministic 64-bit generator (splitmix64); used for reproducible
    # random refinement independent of numpy's global RNG.
    state = (state + 0x9E3779B97F4A7C15) & _U64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return state, z ^ (z >> 31)


def _pack(ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    return (ix.astype(np.int64) << (COORD_BITS + 1)) | iy.astype(np.int64)


def _unpack(key: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return key >> (COORD_BITS + 1), key & (COORD_SPAN * 2 - 1)


@dataclass(frozen=True)
class RefineParams:
    """Refinement thresholds: interface band, vorticity band and level caps."""

    band: float = 3.0
    lip: float = 1.2
    vorticity_threshold: float = 0.05
    max_level: int = 8
    max_vorticity_level: int = 8
    min_level: int = 2

    def __post_init__(self):
        if self.min_level > self.max_level:
            raise ValueError("min_level must not exceed max_level")
        if self.band <= 0 or self.vorticity_threshold <= 0:
            raise ValueError("band and vorticity_threshold must be positive")


@dataclass(frozen=True)
class Neighborhood:
    """Directional neighbor data of one node.

    Per direction: kind (direct/ghost/boundary), the distance to the (ghost)
    neighbor, and either the direct neighbor id or the ghost contributor ids
    with their interpolation weights.
    """

    node: int
    kinds: tuple[int, int, int, int]
    distances: tuple[float, float, float, float]
    neighbors: tuple[int, int, int, int]
    ghost_ids: tuple[Optional[np.ndarray], ...]
    ghost_weights: tuple[Optional[np.ndarray], ...]

    def is_hanging(self) -> bool:
        return any(k == KIND_GHOST for k in self.kinds)


class NeighborhoodTable:
    """Vectorized neighbor data for all nodes of one tree.

    ``kind``/``dist``/``nbr`` are (4, n_nodes) arrays indexed by direction.
    ``ghost_rows[d]`` holds (row, col, weight) triplets describing the ghost
    interpolation for hanging directions; direct rows are identity links.
    """

    def __init__(self, kind, dist, nbr, ghost_rows):
        self.kind = kind
        self.dist = dist
        self.nbr = nbr
        self.ghost_rows = ghost_rows


class Quadtree:
    """Non-graded quadtree over [x_min, x_max] x [y_min, y_max]."""

    _version_counter = 0

    def __init__(self, bounds, leaf_ix, leaf_iy, leaf_level, version=None):
        self.x_min, self.x_max, self.y_min, self.y_max = map(float, bounds)
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("degenerate domain bounds")
        if version is None:
            Quadtree._version_counter += 1
            version = Quadtree._version_counter
        self.version = int(version)
        self._cache: dict = {}
        self._build_cells(np.asarray(leaf_ix, dtype=np.int64),
                          np.asarray(leaf_iy, dtype=np.int64),
                          np.asarray(leaf_level, dtype=np.int64))

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def _build_cells(self, lx, ly, lev):
        if lev.size == 0:
            raise ValueError("tree needs at least one leaf")
        if lev.max() > COORD_BITS:
            raise ValueError(f"leaf level exceeds {COORD_BITS}")
        max_level = int(lev.max())

        leaf_keys_at = {}
        for L in range(max_level + 1):
            sel = lev == L
            leaf_keys_at[L] = np.unique(_pack(lx[sel], ly[sel]))

        # Every ancestor of a leaf is an internal cell.
        cells_at = [None] * (max_level + 1)
        carry = np.empty(0, dtype=np.int64)
        for L in range(max_level, -1, -1):
            keys = np.unique(np.concatenate([leaf_keys_at[L], carry]))
            cells_at[L] = keys
            if L > 0:
                px, py = _unpack(keys)
                parent_size = np.int64(1 << (COORD_BITS - L + 1))
                carry = np.unique(_pack((px // parent_size) * parent_size,
                                        (py // parent_size) * parent_size))

        n_cells = sum(k.size for k in cells_at)
        cx = np.empty(n_cells, dtype=np.int64)
        cy = np.empty(n_cells, dtype=np.int64)
        clev = np.empty(n_cells, dtype=np.int16)
        child0 = np.full(n_cells, -1, dtype=np.int64)

        # Assign ids level by level, ordering each level's cells by
        # (parent id, quadrant) so the 4 children of a parent are contiguous.
        cx[0] = cy[0] = 0
        clev[0] = 0
        offset = 1
        level_key_id = [(cells_at[0], np.array([0]))]
        for L in range(1, max_level + 1):
            keys = cells_at[L]
            if keys.size == 0:
                level_key_id.append((keys, np.empty(0, dtype=np.int64)))
                continue
            x, y = _unpack(keys)
            size = np.int64(1 << (COORD_BITS - L))
            parent_keys = _pack((x // (2 * size)) * (2 * size),
                                (y // (2 * size)) * (2 * size))
            pk_sorted, pid_sorted = level_key_id[L - 1]
            order_prev = np.argsort(pk_sorted, kind="stable")
            pos = np.searchsorted(pk_sorted[order_prev], parent_keys)
            parent_ids = pid_sorted[order_prev[pos]]
            quadrant = ((x // size) & 1) + 2 * ((y // size) & 1)
            order = np.lexsort((quadrant, parent_ids))
            keys, x, y = keys[order], x[order], y[order]
            parent_ids = parent_ids[order]
            ids = offset + np.arange(keys.size, dtype=np.int64)
            cx[ids], cy[ids], clev[ids] = x, y, L
            if keys.size % 4 != 0:
                raise GridTopologyError("leaf set does not tile the domain")
            child0[parent_ids[::4]] = ids[::4]
            level_key_id.append((keys, ids))
            offset += keys.size

        self.cell_x = cx
        self.cell_y = cy
        self.cell_level = clev
        self.cell_child0 = child0
        self.max_level = max_level
        self.leaf_ids = np.flatnonzero(child0 < 0)

    # ------------------------------------------------------------------
    # basic geometry
    # ------------------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return self.leaf_ids.size

    @property
    def scale(self) -> tuple[float, float]:
        return ((self.x_max - self.x_min) / COORD_SPAN,
                (self.y_max - self.y_min) / COORD_SPAN)

    def leaf_coords(self):
        """Integer (ix, iy, size) of every leaf, in leaf id order."""
        ids = self.leaf_ids
        size = np.int64(1) << (COORD_BITS - self.cell_level[ids].astype(np.int64))
        return self.cell_x[ids], self.cell_y[ids], size

    def to_x(self, ix):
        return self.x_min + np.asarray(ix, dtype=np.float64) * self.scale[0]

    def to_y(self, iy):
        return self.y_min + np.asarray(iy, dtype=np.float64) * self.scale[1]

    # ------------------------------------------------------------------
    # node set
    # ------------------------------------------------------------------

    def _node_data(self):
        cached = self._cache.get("nodes")
        if cached is None:
            ix, iy, s = self.leaf_coords()
            keys = np.concatenate([
                _pack(ix, iy), _pack(ix + s, iy),
                _pack(ix, iy + s), _pack(ix + s, iy + s)])
            node_key = np.unique(keys)
            corner_ids = np.searchsorted(node_key, keys).reshape(4, -1).T
            cached = (node_key, corner_ids.astype(np.int64))
            self._cache["nodes"] = cached
        return cached

    @property
    def node_key(self) -> np.ndarray:
        return self._node_data()[0]

    @property
    def n_nodes(self) -> int:
        return self.node_key.size

    @property
    def leaf_corner_ids(self) -> np.ndarray:
        """(n_leaves, 4) node ids per leaf: SW, SE, NW, NE."""
        return self._node_data()[1]

    def node_icoords(self):
        return _unpack(self.node_key)

    def node_positions(self):
        ix, iy = self.node_icoords()
        return self.to_x(ix), self.to_y(iy)

    def node_id_at(self, ix: int, iy: int) -> int:
        key = (np.int64(ix) << (COORD_BITS + 1)) | np.int64(iy)
        pos = int(np.searchsorted(self.node_key, key))
        if pos >= self.n_nodes or self.node_key[pos] != key:
            return -1
        return pos

    # ------------------------------------------------------------------
    # point location
    # ------------------------------------------------------------------

    def to_int_coords(self, x, y):
        sx, sy = self.scale
        ix = np.floor((np.asarray(x, dtype=np.float64) - self.x_min) / sx)
        iy = np.floor((np.asarray(y, dtype=np.float64) - self.y_min) / sy)
        ix = np.clip(ix, 0, COORD_SPAN - 1).astype(np.int64)
        iy = np.clip(iy, 0, COORD_SPAN - 1).astype(np.int64)
        return ix, iy

    def locate_int(self, ix, iy):
        """Leaf cell id containing each integer point (boundary-biased up/right)."""
        ix = np.clip(np.asarray(ix, dtype=np.int64), 0, COORD_SPAN - 1)
        iy = np.clip(np.asarray(iy, dtype=np.int64), 0, COORD_SPAN - 1)
        cur = np.zeros(ix.shape, dtype=np.int64)
        for _ in range(self.max_level):
            c0 = self.cell_child0[cur]
            active = c0 >= 0
            if not active.any():
                break
            half = (np.int64(1) << (COORD_BITS - self.cell_level[cur].astype(np.int64) - 1))
            qx = (ix >= self.cell_x[cur] + half) & active
            qy = (iy >= self.cell_y[cur] + half) & active
            nxt = c0 + qx.astype(np.int64) + 2 * qy.astype(np.int64)
            cur = np.where(active, nxt, cur)
        return cur

    def locate(self, x, y):
        ix, iy = self.to_int_coords(x, y)
        return self.locate_int(ix, iy)

    # ------------------------------------------------------------------
    # neighborhoods
    # ------------------------------------------------------------------

    def neighborhood_table(self) -> NeighborhoodTable:
        cached = self._cache.get("nbr_table")
        if cached is None:
            cached = self._build_neighborhood_table()
            self._cache["nbr_table"] = cached
        return cached

    def _build_neighborhood_table(self) -> NeighborhoodTable:
        n = self.n_nodes
        nix, niy = self.node_icoords()
        sx, sy = self.scale
        corner = self.leaf_corner_ids
        _, _, lsize = self.leaf_coords()

        int_dist = np.full((4, n), np.iinfo(np.int64).max, dtype=np.int64)
        # Candidate neighbor distances from every leaf edge: a corner node's
        # neighbor along an edge sits one leaf-size away; the smallest
        # adjacent leaf wins.
        for cid, dirs in ((0, (RIGHT, TOP)), (1, (LEFT, TOP)),
                          (2, (RIGHT, BOTTOM)), (3, (LEFT, BOTTOM))):
            for d in dirs:
                np.minimum.at(int_dist[d], corner[:, cid], lsize)

        kind = np.full((4, n), KIND_BOUNDARY, dtype=np.uint8)
        nbr = np.full((4, n), -1, dtype=np.int64)
        dist = np.full((4, n), np.nan)
        ghost_rows = [None] * 4

        step = {LEFT: (-1, 0), RIGHT: (1, 0), BOTTOM: (0, -1), TOP: (0, 1)}
        at_wall = {
            LEFT: nix == 0, RIGHT: nix == COORD_SPAN,
            BOTTOM: niy == 0, TOP: niy == COORD_SPAN,
        }
        axis_scale = (sx, sx, sy, sy)

        hanging = {}
        for d in range(4):
            dx, dy = step[d]
            has = int_dist[d] < np.iinfo(np.int64).max
            tgt_key = _pack(nix + dx * np.where(has, int_dist[d], 0),
                            niy + dy * np.where(has, int_dist[d], 0))
            pos = np.searchsorted(self.node_key, tgt_key)
            pos_c = np.clip(pos, 0, n - 1)
            found = has & (self.node_key[pos_c] == tgt_key)
            if not np.array_equal(found, has):
                raise GridTopologyError("corner-adjacent neighbor node missing")
            kind[d, found] = KIND_DIRECT
            nbr[d, found] = pos_c[found]
            dist[d, found] = int_dist[d, found] * axis_scale[d]
            hanging[d] = ~found & ~at_wall[d]

        multi = np.zeros(n, dtype=np.int64)
        for d in range(4):
            multi += hanging[d]
        if (multi > 1).any():
            bad = np.flatnonzero(multi > 1)
            raise GridTopologyError(
                f"nodes with more than one ghost direction: {bad[:10].tolist()}")

        for d in range(4):
            ids = np.flatnonzero(hanging[d])
            if ids.size == 0:
                ghost_rows[d] = (np.empty(0, np.int64), np.empty(0, np.int64),
                                 np.empty(0))
                continue
            dx, dy = step[d]
            # Probe one tick into the adjacent region to find the coarse leaf
            # this node hangs on.
            px = nix[ids] + (dx if dx < 0 else 0)
            py = niy[ids] + (dy if dy < 0 else 0)
            leaf = self.locate_int(px, py)
            lx0, ly0 = self.cell_x[leaf], self.cell_y[leaf]
            w = np.int64(1) << (COORD_BITS - self.cell_level[leaf].astype(np.int64))

            # The ghost sits on the far face of the coarse leaf. Its value is
            # the linear interpolation between the far-face corners plus a
            # transverse-curvature correction built from the near-face
            # corners (the nodes flanking the hanging node on its own face);
            # using matching transverse offsets on both faces keeps the
            # formula exact on quadratics and the weights bounded by one:
            #   phi_ghost = phi_0 + I_far(s) - I_near(s).
            if d in (LEFT, RIGHT):
                fx_far = lx0 if d == LEFT else lx0 + w
                fx_near = lx0 + w if d == LEFT else lx0
                far_lo = _pack(fx_far, ly0)
                far_hi = _pack(fx_far, ly0 + w)
                near_lo = _pack(fx_near, ly0)
                near_hi = _pack(fx_near, ly0 + w)
                tr_lo = (niy[ids] - ly0) * sy
                tr_hi = (ly0 + w - niy[ids]) * sy
                dist[d, ids] = w * sx
            else:
                fy_far = ly0 if d == BOTTOM else ly0 + w
                fy_near = ly0 + w if d == BOTTOM else ly0
                far_lo = _pack(lx0, fy_far)
                far_hi = _pack(lx0 + w, fy_far)
                near_lo = _pack(lx0, fy_near)
                near_hi = _pack(lx0 + w, fy_near)
                tr_lo = (nix[ids] - lx0) * sx
                tr_hi = (lx0 + w - nix[ids]) * sx
                dist[d, ids] = w * sy

            def _lookup(keys):
                pos = np.searchsorted(self.node_key, keys)
                ok = self.node_key[np.clip(pos, 0, n - 1)] == keys
                if not ok.all():
                    raise GridTopologyError("ghost face corner node missing")
                return pos

            id_far_lo = _lookup(far_lo)
            id_far_hi = _lookup(far_hi)
            id_near_lo = _lookup(near_lo)
            id_near_hi = _lookup(near_hi)

            denom = tr_lo + tr_hi
            w_hi = tr_lo / denom
            w_lo = tr_hi / denom

            kind[d, ids] = KIND_GHOST
            rows = np.repeat(ids, 5)
            cols = np.stack([id_far_lo, id_far_hi, ids,
                             id_near_lo, id_near_hi], axis=1).ravel()
            wts = np.stack([w_lo, w_hi, np.ones_like(w_lo),
                            -w_lo, -w_hi], axis=1).ravel()
            ghost_rows[d] = (rows, cols, wts)

        return NeighborhoodTable(kind, dist, nbr, ghost_rows)

    # ------------------------------------------------------------------
    # serialization
    # ------------------------------------------------------------------

    def to_text(self) -> str:
        ix, iy, _ = self.leaf_coords()
        lev = self.cell_level[self.leaf_ids]
        lines = [f"quadtree {self.x_min!r} {self.x_max!r} {self.y_min!r} {self.y_max!r}"]
        lines += [f"{a} {b} {c}" for a, b, c in zip(ix, iy, lev)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Quadtree":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        head = lines[0].split()
        if head[0] != "quadtree":
            raise ValueError("not a quadtree dump")
        bounds = tuple(float(v) for v in head[1:5])
        data = np.array([[int(v) for v in ln.split()] for ln in lines[1:]],
                        dtype=np.int64).reshape(-1, 3)
        return cls(bounds, data[:, 0], data[:, 1], data[:, 2])


# ----------------------------------------------------------------------
# construction / refinement operations
# ----------------------------------------------------------------------

def build_uniform(bounds: Sequence[float], level: int) -> Quadtree:
    """Uniform tree with 4**level leaves over the given rectangle."""
    if level < 0:
        raise ValueError("level must be non-negative")
    if level > COORD_BITS:
        raise ValueError(f"level {level} exceeds integer-coordinate limit {COORD_BITS}")
    n = 1 << level
    s = COORD_SPAN >> level
    i = np.arange(n, dtype=np.int64) * s
    ix, iy = np.meshgrid(i, i, indexing="ij")
    lev = np.full(n * n, level, dtype=np.int64)
    return Quadtree(bounds, ix.ravel(), iy.ravel(), lev)


def _split_leaf_tuple(x, y, level):
    if level >= COORD_BITS:
        raise ValueError("split would exceed max representable level")
    h = 1 << (COORD_BITS - level - 1)
    return [(x, y, level + 1), (x + h, y, level + 1),
            (x, y + h, level + 1), (x + h, y + h, level + 1)]


def random_refine(tree: Quadtree, n_splits: int, seed: int) -> Quadtree:
    """Apply n_splits uniformly random leaf splits (splitmix64 stream)."""
    if n_splits == 0:
        return tree
    ix, iy, s = tree.leaf_coords()
    lev = COORD_BITS - np.log2(s).astype(int)
    leaves = list(zip(ix.tolist(), iy.tolist(), lev.tolist()))
    state = seed & _U64
    for _ in range(n_splits):
        state, z = _splitmix64(state)
        k = z % len(leaves)
        x, y, L = leaves.pop(k)
        leaves.extend(_split_leaf_tuple(x, y, L))
    arr = np.array(leaves, dtype=np.int64)
    return Quadtree((tree.x_min, tree.x_max, tree.y_min, tree.y_max),
                    arr[:, 0], arr[:, 1], arr[:, 2],
                    version=tree.version + 1)


def split_all_leaves(tree: Quadtree) -> Quadtree:
    """Replace every leaf by its four children (halves the local spacing)."""
    ix, iy, s = tree.leaf_coords()
    if (s == 1).any():
        raise ValueError("split_all_leaves would exceed max representable level")
    lev = COORD_BITS - np.log2(s).astype(np.int64)
    h = s >> 1
    nx = np.concatenate([ix, ix + h, ix, ix + h])
    ny = np.concatenate([iy, iy, iy + h, iy + h])
    nl = np.tile(lev + 1, 4)
    return Quadtree((tree.x_min, tree.x_max, tree.y_min, tree.y_max),
                    nx, ny, nl, version=tree.version + 1)


def node_neighborhood(tree: Quadtree, node_id: int) -> Neighborhood:
    """Per-direction neighbor info of one node (see NeighborhoodTable)."""
    tab = tree.neighborhood_table()
    gids, gwts = [], []
    for d in range(4):
        if tab.kind[d, node_id] == KIND_GHOST:
            rows, cols, wts = tab.ghost_rows[d]
            sel = rows == node_id
            gids.append(cols[sel].copy())
            gwts.append(wts[sel].copy())
        else:
            gids.append(None)
            gwts.append(None)
    return Neighborhood(
        node=node_id,
        kinds=tuple(int(tab.kind[d, node_id]) for d in range(4)),
        distances=tuple(float(tab.dist[d, node_id]) for d in range(4)),
        neighbors=tuple(int(tab.nbr[d, node_id]) for d in range(4)),
        ghost_ids=tuple(gids),
        ghost_weights=tuple(gwts),
    )


def node_volumes(tree: Quadtree) -> np.ndarray:
    """Control area per node: quarter of each incident leaf's area."""
    vol = tree._cache.get("node_vol")
    if vol is None:
        sx, sy = tree.scale
        _, _, s = tree.leaf_coords()
        area = (s * sx) * (s * sy) * 0.25
        vol = np.zeros(tree.n_nodes)
        for c in range(4):
            np.add.at(vol, tree.leaf_corner_ids[:, c], area)
        tree._cache["node_vol"] = vol
    return vol


def bilinear_at(tree: Quadtree, values: np.ndarray, x, y) -> np.ndarray:
    """Bilinear interpolation of nodal values at arbitrary points."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    leaf_of_cell = np.full(tree.cell_x.size, -1, dtype=np.int64)
    leaf_of_cell[tree.leaf_ids] = np.arange(tree.n_leaves)
    cells = tree.locate(x, y)
    lf = leaf_of_cell[cells]
    corner = tree.leaf_corner_ids[lf]
    sx, sy = tree.scale
    x0 = tree.to_x(tree.cell_x[cells])
    y0 = tree.to_y(tree.cell_y[cells])
    w = (np.int64(1) << (COORD_BITS - tree.cell_level[cells].astype(np.int64)))
    tx = np.clip((x - x0) / (w * sx), 0.0, 1.0)
    ty = np.clip((y - y0) / (w * sy), 0.0, 1.0)
    v = values[corner]
    return ((1 - tx) * (1 - ty) * v[:, 0] + tx * (1 - ty) * v[:, 1]
            + (1 - tx) * ty * v[:, 2] + tx * ty * v[:, 3])


def _criteria_mask(tree, ix, iy, size, level, phi_fn, gradmag_sampler, p):
    """Split decision per cell for refine_to_criteria (strict level caps)."""
    sx, sy = tree.scale
    diag = np.hypot(size * sx, size * sy)
    xs = [tree.to_x(ix), tree.to_x(ix + size)]
    ys = [tree.to_y(iy), tree.to_y(iy + size)]
    phi_min = None
    gmax = None
    for cx in xs:
        for cy in ys:
            phi = np.abs(np.asarray(phi_fn(cx, cy), dtype=np.float64))
            phi_min = phi if phi_min is None else np.minimum(phi_min, phi)
            if gradmag_sampler is not None:
                g = gradmag_sampler(cx, cy)
                gmax = g if gmax is None else np.maximum(gmax, g)
    split = (phi_min <= p.band * p.lip * diag) & (level < p.max_level)
    if gmax is not None:
        split |= (diag * gmax >= p.vorticity_threshold) & (level < p.max_vorticity_level)
    split |= level < p.min_level
    return split


def refine_to_criteria(tree: Quadtree, levelset: Callable, velocity,
                       p: RefineParams) -> Quadtree:
    """Split/merge cells until the band, vorticity and min-level criteria
    reach a fixed point.

    ``levelset`` is evaluated at cell corners as phi(x, y); ``velocity`` (a
    VectorField on ``tree``, or None) drives the normalized velocity-gradient
    criterion, sampled bilinearly from the input tree for cells created while
    refining.
    """
    gradmag_sampler = None
    if velocity is not None:
        from . import operators

        u = velocity.u.values
        v = velocity.v.values
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("non-finite velocity values")
        gx, gy = operators.gradient_matrices(tree)
        gm = np.sqrt((gx @ u) ** 2 + (gy @ u) ** 2 +
                     (gx @ v) ** 2 + (gy @ v) ** 2)
        unorm = max(float(np.max(np.hypot(u, v))), 1e-12)
        gm /= unorm

        def gradmag_sampler(x, y):
            return bilinear_at(tree, gm, x, y)

    # Merge pass: the topmost internal cell failing every criterion becomes a
    # leaf; all its descendants are dropped in one sweep.
    csize = np.int64(1) << (COORD_BITS - tree.cell_level.astype(np.int64))
    keep = _criteria_mask(tree, tree.cell_x, tree.cell_y, csize,
                          tree.cell_level.astype(np.int64), levelset,
                          gradmag_sampler, p)
    is_internal = tree.cell_child0 >= 0
    cut_here = is_internal & ~keep
    blocked = np.zeros(tree.cell_x.size, dtype=bool)
    for L in range(tree.max_level):
        sel = np.flatnonzero(is_internal & (tree.cell_level == L))
        if sel.size == 0:
            continue
        childs = (tree.cell_child0[sel, None] + np.arange(4)).ravel()
        blocked[childs] = np.repeat(blocked[sel] | cut_here[sel], 4)
    new_leaf = ~blocked & (cut_here | ~is_internal)
    ids = np.flatnonzero(new_leaf)
    lx, ly = tree.cell_x[ids], tree.cell_y[ids]
    llev = tree.cell_level[ids].astype(np.int64)

    # Split pass to fixed point.
    cap = max(p.max_level, p.max_vorticity_level, p.min_level) + 2
    for _ in range(cap):
        lsize = np.int64(1) << (COORD_BITS - llev)
        split = _criteria_mask(tree, lx, ly, lsize, llev, levelset,
                               gradmag_sampler, p)
        if not split.any():
            break
        sx_, sy_, sl = lx[split], ly[split], llev[split]
        h = (np.int64(1) << (COORD_BITS - sl - 1))
        lx = np.concatenate([lx[~split], sx_, sx_ + h, sx_, sx_ + h])
        ly = np.concatenate([ly[~split], sy_, sy_, sy_ + h, sy_ + h])
        llev = np.concatenate([llev[~split], sl + 1, sl + 1, sl + 1, sl + 1])

    new_keys = np.sort(_pack(lx, ly) * 64 + llev)
    oix, oiy, osz = tree.leaf_coords()
    olev = COORD_BITS - np.log2(osz).astype(np.int64)
    old_keys = np.sort(_pack(oix, oiy) * 64 + olev)
    if new_keys.size == old_keys.size and np.array_equal(new_keys, old_keys):
        return tree
    return Quadtree((tree.x_min, tree.x_max, tree.y_min, tree.y_max),
                    lx, ly, llev, version=tree.version + 1)
