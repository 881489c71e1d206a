"""Nodal finite-difference operators on quadtree grids.

All operators are expressed through four per-direction neighbor-value
matrices M_d: row i of M_d returns the value seen by node i in direction d,
which is either the direct neighbor's value or the third-order ghost
interpolation at a T-junction. The Laplacian, divergence and gradient then
reduce to sparse matrix algebra with per-row distance coefficients, which
keeps applications and assemblies vectorized.

Boundary treatment:
  * periodic walls are folded onto canonical nodes (matching wall node sets
    required);
  * Neumann walls use a mirrored ghost consistent with the outward-derivative
    data;
  * Dirichlet walls become identity rows in assembled systems;
  * the immersed interface uses linear cut-fraction substitution for
    Dirichlet data and flux dropping with cut-volume weighting for
    homogeneous Neumann data (hybrid finite-volume closure).

Wall nodes are never hanging (a leaf face containing them would have to
extend outside the domain), so one-sided closures only ever chase direct
neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from .grid import (COORD_SPAN, LEFT, RIGHT, BOTTOM, TOP, KIND_DIRECT,
                   KIND_GHOST, KIND_BOUNDARY, Neighborhood, Quadtree)

WALL_SIDES = ("left", "right", "bottom", "top")
_SIDE_DIR = {"left": LEFT, "right": RIGHT, "bottom": BOTTOM, "top": TOP}
_OPP = {LEFT: RIGHT, RIGHT: LEFT, BOTTOM: TOP, TOP: BOTTOM}

ROW_FLUX, ROW_DIRICHLET, ROW_INACTIVE, ROW_PIN, ROW_ALIAS = 0, 1, 2, 3, 4

BCValue = Union[None, float, Callable]


class VersionMismatchError(ValueError):
    """Field was built for a different tree topology."""


# ----------------------------------------------------------------------
# fields
# ----------------------------------------------------------------------

@dataclass
class ScalarField:
    values: np.ndarray
    version: int

    @classmethod
    def zeros(cls, tree: Quadtree) -> "ScalarField":
        return cls(np.zeros(tree.n_nodes), tree.version)

    @classmethod
    def from_function(cls, tree: Quadtree, fn) -> "ScalarField":
        x, y = tree.node_positions()
        vals = np.asarray(fn(x, y), dtype=np.float64) + np.zeros(tree.n_nodes)
        return cls(vals, tree.version)

    def copy(self) -> "ScalarField":
        return ScalarField(self.values.copy(), self.version)

    def check(self, tree: Quadtree) -> np.ndarray:
        if self.version != tree.version or self.values.size != tree.n_nodes:
            raise VersionMismatchError(
                f"field stamped {self.version} used with tree {tree.version}")
        return self.values


@dataclass
class VectorField:
    u: ScalarField
    v: ScalarField

    @classmethod
    def zeros(cls, tree: Quadtree) -> "VectorField":
        return cls(ScalarField.zeros(tree), ScalarField.zeros(tree))

    @classmethod
    def from_functions(cls, tree: Quadtree, fu, fv) -> "VectorField":
        return cls(ScalarField.from_function(tree, fu),
                   ScalarField.from_function(tree, fv))

    def copy(self) -> "VectorField":
        return VectorField(self.u.copy(), self.v.copy())

    def check(self, tree: Quadtree):
        if self.u.version != self.v.version:
            raise VersionMismatchError("vector component stamps differ")
        return self.u.check(tree), self.v.check(tree)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.u.values, self.v.values])

    @classmethod
    def from_stacked(cls, tree: Quadtree, w: np.ndarray) -> "VectorField":
        n = tree.n_nodes
        return cls(ScalarField(np.array(w[:n]), tree.version),
                   ScalarField(np.array(w[n:]), tree.version))


# ----------------------------------------------------------------------
# boundary conditions
# ----------------------------------------------------------------------

@dataclass
class ScalarBC:
    """Boundary data for one scalar Poisson/Helmholtz problem.

    walls maps each side to ("dirichlet", g) | ("neumann", g) | ("periodic",
    None); g may be None (homogeneous), a constant, or a callable g(x, y).
    Neumann data is the outward normal derivative. interface is None,
    ("dirichlet", g) or ("neumann", None); an optional per-node offset is
    added to interface Dirichlet data at cut points owned by that node (used
    for the splitting-error correction).
    """

    walls: dict
    interface: Optional[tuple] = None
    interface_offset: Optional[np.ndarray] = None
    pin_if_floating: bool = True

    def __post_init__(self):
        for side in WALL_SIDES:
            if side not in self.walls:
                raise ValueError(f"missing wall spec for '{side}'")
        for pair in (("left", "right"), ("bottom", "top")):
            kinds = [self.walls[s][0] for s in pair]
            if ("periodic" in kinds) and kinds[0] != kinds[1]:
                raise ValueError(f"periodic walls must pair up on {pair}")

    @property
    def periodic_x(self) -> bool:
        return self.walls["left"][0] == "periodic"

    @property
    def periodic_y(self) -> bool:
        return self.walls["bottom"][0] == "periodic"

    def signature(self) -> tuple:
        wall_kinds = tuple(self.walls[s][0] for s in WALL_SIDES)
        iface = None if self.interface is None else self.interface[0]
        return wall_kinds + (iface,)


def neumann_bc() -> ScalarBC:
    return ScalarBC({s: ("neumann", None) for s in WALL_SIDES})


def dirichlet_bc(g: BCValue = None) -> ScalarBC:
    return ScalarBC({s: ("dirichlet", g) for s in WALL_SIDES})


def periodic_bc() -> ScalarBC:
    return ScalarBC({s: ("periodic", None) for s in WALL_SIDES})


def _eval_bc(g: BCValue, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if g is None:
        return np.zeros_like(x)
    if callable(g):
        return np.asarray(g(x, y), dtype=np.float64) + np.zeros_like(x)
    return np.full_like(x, float(g))


@dataclass
class FlowBC:
    """Velocity boundary conditions plus the derived Hodge problem data.

    walls maps each side to ("dirichlet", g) | ("neumann", g) | ("periodic",
    None) for the velocity; g is None, a (u, v) pair of constants, or a
    callable g(x, y, t) -> (u, v). The Hodge variable gets the complementary
    type per wall (Dirichlet velocity -> homogeneous Neumann Hodge, Neumann
    velocity -> homogeneous Dirichlet Hodge) unless overridden. On the
    immersed interface the velocity takes Dirichlet data (body velocity) and
    the Hodge variable homogeneous Neumann data by default.
    """

    walls: dict
    interface_velocity: Optional[Callable] = None
    hodge_interface: str = "neumann"
    hodge_walls: Optional[dict] = None

    def __post_init__(self):
        for side in WALL_SIDES:
            if side not in self.walls:
                raise ValueError(f"missing wall spec for '{side}'")
        if self.hodge_interface not in ("neumann", "dirichlet"):
            raise ValueError("hodge_interface must be 'neumann' or 'dirichlet'")

    def _component(self, g, comp: int, t: float):
        if g is None:
            return None
        if callable(g):
            return lambda x, y: np.asarray(g(x, y, t)[comp], dtype=np.float64) \
                + np.zeros_like(x)
        return float(g[comp])

    def velocity_bc(self, comp: int, t: float = 0.0,
                    interface_offset: Optional[np.ndarray] = None) -> ScalarBC:
        walls = {}
        for side in WALL_SIDES:
            kind, g = self.walls[side]
            walls[side] = (kind, self._component(g, comp, t))
        iface = None
        if self.interface_velocity is not None:
            iface = ("dirichlet", self._component(self.interface_velocity,
                                                  comp, t))
        return ScalarBC(walls, iface, interface_offset, pin_if_floating=False)

    def hodge_bc(self, has_interface: bool = False) -> ScalarBC:
        if self.hodge_walls is not None:
            walls = dict(self.hodge_walls)
        else:
            walls = {}
            for side in WALL_SIDES:
                kind = self.walls[side][0]
                if kind == "dirichlet":
                    walls[side] = ("neumann", None)
                elif kind == "neumann":
                    walls[side] = ("dirichlet", None)
                else:
                    walls[side] = ("periodic", None)
        iface = None
        if has_interface:
            iface = ("dirichlet", None) if self.hodge_interface == "dirichlet" \
                else ("neumann", None)
        return ScalarBC(walls, iface, pin_if_floating=True)

    def dirichlet_wall_sides(self) -> list:
        return [s for s in WALL_SIDES if self.walls[s][0] == "dirichlet"]

    @property
    def periodic_x(self) -> bool:
        return self.walls["left"][0] == "periodic"

    @property
    def periodic_y(self) -> bool:
        return self.walls["bottom"][0] == "periodic"


def l2_norm(tree: Quadtree, values: np.ndarray,
            mask: Optional[np.ndarray] = None,
            weighted: bool = True) -> float:
    """Discrete L2 norm, volume-weighted by nodal control areas by default.

    ``values`` may be a single field (n,) or a stacked vector field (2n,).
    """
    from .grid import node_volumes

    n = tree.n_nodes
    vol = node_volumes(tree) if weighted else np.ones(n)
    if mask is not None:
        vol = vol * mask
    vals = np.asarray(values)
    if vals.size == 2 * n:
        sq = vals[:n] ** 2 + vals[n:] ** 2
    else:
        sq = vals ** 2
    denom = vol.sum() if weighted else n
    return float(np.sqrt((vol * sq).sum() / denom))


# ----------------------------------------------------------------------
# stencil context: periodic folding and direction matrices
# ----------------------------------------------------------------------

class Stencils:
    """Per-tree neighbor data with optional periodic folding."""

    def __init__(self, tree: Quadtree, periodic_x: bool, periodic_y: bool):
        self.tree = tree
        self.periodic_x = periodic_x
        self.periodic_y = periodic_y
        tab = tree.neighborhood_table()
        n = tree.n_nodes
        nix, niy = tree.node_icoords()

        canon = np.arange(n, dtype=np.int64)
        if periodic_x or periodic_y:
            cx = np.where((nix == COORD_SPAN) & periodic_x, 0, nix)
            cy = np.where((niy == COORD_SPAN) & periodic_y, 0, niy)
            key = (cx << (31)) | cy
            pos = np.searchsorted(tree.node_key, key)
            ok = (pos < n) & (tree.node_key[np.clip(pos, 0, n - 1)] == key)
            if not ok.all():
                raise ValueError("periodic folding needs matching wall node sets")
            canon = pos.astype(np.int64)
        self.canon = canon
        self.is_canon = canon == np.arange(n)

        kind = tab.kind.copy()
        dist = tab.dist.copy()
        nbr = tab.nbr.copy()
        ghost_rows = [tuple(np.array(a, copy=True) for a in tab.ghost_rows[d])
                      for d in range(4)]

        def borrow(direction, on_max):
            # canonical min-wall nodes read their outward arm from the
            # max-wall alias partner
            src = np.flatnonzero(on_max & ~self.is_canon)
            dst = canon[src]
            kind[direction, dst] = kind[direction, src]
            dist[direction, dst] = dist[direction, src]
            nbr[direction, dst] = nbr[direction, src]
            rows, cols, wts = ghost_rows[direction]
            if rows.size:
                remap = np.full(n, -1, dtype=np.int64)
                remap[src] = dst
                moved = remap[rows] >= 0
                rows = np.where(moved, remap[np.clip(rows, 0, n - 1)], rows)
                ghost_rows[direction] = (rows, cols, wts)

        if periodic_x:
            borrow(LEFT, nix == COORD_SPAN)
        if periodic_y:
            borrow(BOTTOM, niy == COORD_SPAN)

        nbr = np.where(nbr >= 0, canon[np.clip(nbr, 0, n - 1)], -1)
        M = []
        M_lin = []
        for d in range(4):
            rows_d = np.flatnonzero((kind[d] == KIND_DIRECT) & self.is_canon)
            cols_d = nbr[d, rows_d]
            g_rows, g_cols, g_wts = ghost_rows[d]
            if g_rows.size:
                keep = self.is_canon[g_rows]
                g_rows = g_rows[keep]
                g_cols = canon[g_cols[keep]]
                g_wts = g_wts[keep]

            def build(rows_g, cols_g, wts_g):
                m = sp.coo_matrix(
                    (np.concatenate([np.ones(rows_d.size), wts_g]),
                     (np.concatenate([rows_d, rows_g]),
                      np.concatenate([cols_d, cols_g]))),
                    shape=(n, n)).tocsr()
                if not self.is_canon.all():
                    m = m[canon]  # alias rows mirror their canonical partner
                return m

            M.append(build(g_rows, g_cols, g_wts))
            # Linear variant: keep only the far-face interpolation pair
            # (positive weights); this averaging ghost is what keeps the
            # divergence operator, and with it the iterated projection,
            # stable on strongly non-graded trees.
            if g_rows.size:
                g5r = g_rows.reshape(-1, 5)
                g5c = g_cols.reshape(-1, 5)
                g5w = g_wts.reshape(-1, 5)
                M_lin.append(build(g5r[:, :2].ravel(), g5c[:, :2].ravel(),
                                   g5w[:, :2].ravel()))
            else:
                M_lin.append(M[-1])

        self.kind = kind
        self.dist = dist
        self.nbr = nbr
        self.M = M
        self.M_lin = M_lin
        self.h = [dist[i] for i in range(4)]


def stencils(tree: Quadtree, periodic_x: bool = False,
             periodic_y: bool = False) -> Stencils:
    key = ("stencils", periodic_x, periodic_y)
    st = tree._cache.get(key)
    if st is None:
        st = Stencils(tree, periodic_x, periodic_y)
        tree._cache[key] = st
    return st


# ----------------------------------------------------------------------
# ghost values
# ----------------------------------------------------------------------

def ghost_value(nb: Neighborhood, f: ScalarField) -> float:
    """Third-order ghost value of f in the node's hanging direction."""
    for d in range(4):
        if nb.kinds[d] == KIND_GHOST:
            return float(np.dot(nb.ghost_weights[d], f.values[nb.ghost_ids[d]]))
    raise ValueError("neighborhood has no ghost direction")


# ----------------------------------------------------------------------
# gradient / divergence
# ----------------------------------------------------------------------

def _one_sided_first(st: Stencils, ids: np.ndarray, d_have: int, sgn: float,
                     order: int):
    """COO rows of a one-sided first derivative into direction d_have."""
    n = st.tree.n_nodes
    nb1 = st.nbr[d_have][ids]
    use3 = np.zeros(ids.size, dtype=bool)
    if order >= 2:
        ok = (st.kind[d_have][ids] == KIND_DIRECT) & (nb1 >= 0)
        nb1c = np.clip(nb1, 0, n - 1)
        ok &= st.kind[d_have][nb1c] == KIND_DIRECT
        use3 = ok
    rows, cols, vals = [], [], []
    i2 = ids[~use3]
    if i2.size:
        h1 = st.h[d_have][i2]
        rows += [i2, i2]
        cols += [i2, st.nbr[d_have][i2]]
        vals += [-sgn / h1, sgn / h1]
    i3 = ids[use3]
    if i3.size:
        nba = nb1[use3]
        nbb = st.nbr[d_have][nba]
        r1 = st.h[d_have][i3]
        r2 = st.h[d_have][nba]
        rows += [i3, i3, i3]
        cols += [i3, nba, nbb]
        vals += [-sgn * (2 * r1 + r2) / (r1 * (r1 + r2)),
                 sgn * (r1 + r2) / (r1 * r2),
                 -sgn * r1 / (r2 * (r1 + r2))]
    return rows, cols, vals


def _coo(rows, cols, vals, n) -> sp.csr_matrix:
    if not rows:
        return sp.csr_matrix((n, n))
    return sp.coo_matrix(
        (np.concatenate([np.atleast_1d(v).astype(float) for v in vals]),
         (np.concatenate([np.atleast_1d(r) for r in rows]),
          np.concatenate([np.atleast_1d(c) for c in cols]))),
        shape=(n, n)).tocsr()


def _axis_gradient(st: Stencils, d_lo: int, d_hi: int, order: int):
    """Distance-weighted first derivative along one axis (exact on
    quadratics at interior nodes); one-sided rows at walls."""
    n = st.tree.n_nodes
    lo_b = st.kind[d_lo] == KIND_BOUNDARY
    hi_b = st.kind[d_hi] == KIND_BOUNDARY
    interior = ~lo_b & ~hi_b
    h_lo = np.where(lo_b, 1.0, np.nan_to_num(st.h[d_lo], nan=1.0))
    h_hi = np.where(hi_b, 1.0, np.nan_to_num(st.h[d_hi], nan=1.0))
    c_hi = np.where(interior, h_lo / ((h_lo + h_hi) * h_hi), 0.0)
    c_lo = np.where(interior, h_hi / ((h_lo + h_hi) * h_lo), 0.0)
    eye = sp.eye(n, format="csr")
    G = sp.diags(c_hi) @ (st.M[d_hi] - eye) + sp.diags(c_lo) @ (eye - st.M[d_lo])

    rows, cols, vals = [], [], []
    for d_miss, d_have, sgn in ((d_lo, d_hi, 1.0), (d_hi, d_lo, -1.0)):
        ids = np.flatnonzero((st.kind[d_miss] == KIND_BOUNDARY)
                             & (st.kind[d_have] != KIND_BOUNDARY)
                             & st.is_canon)
        if ids.size:
            r, c, v = _one_sided_first(st, ids, d_have, sgn, order)
            rows += r; cols += c; vals += v
    G = G + _coo(rows, cols, vals, n)
    if not st.is_canon.all():
        G = G[st.canon]
    return G.tocsr()


def gradient_matrices(tree: Quadtree, periodic_x: bool = False,
                      periodic_y: bool = False, one_sided_order: int = 2):
    key = ("grad", periodic_x, periodic_y, one_sided_order)
    cached = tree._cache.get(key)
    if cached is None:
        st = stencils(tree, periodic_x, periodic_y)
        cached = (_axis_gradient(st, LEFT, RIGHT, one_sided_order),
                  _axis_gradient(st, BOTTOM, TOP, one_sided_order))
        tree._cache[key] = cached
    return cached


def divergence_matrices(tree: Quadtree, periodic_x: bool = False,
                        periodic_y: bool = False):
    """Centered first-order divergence (u_hi - u_lo)/(h_lo + h_hi) per axis;
    one-sided at walls.

    Ghost values here use the linear (averaging) face interpolation: the
    quadratic ghost in the divergence path destabilizes the iterated
    projection on strongly non-graded trees, while the averaging one keeps
    every projection eigenvalue inside the closed unit disk.
    """
    key = ("div", periodic_x, periodic_y)
    cached = tree._cache.get(key)
    if cached is None:
        st = stencils(tree, periodic_x, periodic_y)
        n = tree.n_nodes
        eye = sp.eye(n, format="csr")
        parts = []
        for d_lo, d_hi in ((LEFT, RIGHT), (BOTTOM, TOP)):
            lo_b = st.kind[d_lo] == KIND_BOUNDARY
            hi_b = st.kind[d_hi] == KIND_BOUNDARY
            h_lo = np.where(lo_b, 0.0, np.nan_to_num(st.h[d_lo]))
            h_hi = np.where(hi_b, 0.0, np.nan_to_num(st.h[d_hi]))
            span = h_lo + h_hi
            c = np.where(span > 0, 1.0 / np.where(span > 0, span, 1.0), 0.0)
            vhi = sp.diags((~hi_b).astype(float)) @ st.M_lin[d_hi] \
                + sp.diags(hi_b.astype(float)) @ eye
            vlo = sp.diags((~lo_b).astype(float)) @ st.M_lin[d_lo] \
                + sp.diags(lo_b.astype(float)) @ eye
            D = sp.diags(c) @ (vhi - vlo)
            if not st.is_canon.all():
                D = D[st.canon]
            parts.append(D.tocsr())
        cached = tuple(parts)
        tree._cache[key] = cached
    return cached


def apply_gradient(tree: Quadtree, f: ScalarField,
                   bc: Optional[ScalarBC] = None) -> VectorField:
    """Nodal gradient; with a bc, Neumann walls impose the prescribed
    outward derivative on the wall-normal component."""
    vals = f.check(tree)
    px = bc.periodic_x if bc else False
    py = bc.periodic_y if bc else False
    gx, gy = gradient_matrices(tree, px, py)
    out_x = gx @ vals
    out_y = gy @ vals
    if bc is not None:
        walls = _wall_masks(tree)
        x, y = tree.node_positions()
        for side in WALL_SIDES:
            kind_g = bc.walls[side]
            if kind_g[0] != "neumann":
                continue
            ids = np.flatnonzero(walls[side])
            g = _eval_bc(kind_g[1], x[ids], y[ids])
            sign = -1.0 if side in ("left", "bottom") else 1.0
            if side in ("left", "right"):
                out_x[ids] = sign * g
            else:
                out_y[ids] = sign * g
    return VectorField(ScalarField(out_x, tree.version),
                       ScalarField(out_y, tree.version))


def apply_divergence(tree: Quadtree, w: VectorField, periodic_x: bool = False,
                     periodic_y: bool = False) -> ScalarField:
    u, v = w.check(tree)
    dx, dy = divergence_matrices(tree, periodic_x, periodic_y)
    return ScalarField(dx @ u + dy @ v, tree.version)


# ----------------------------------------------------------------------
# Poisson / Helmholtz assembly
# ----------------------------------------------------------------------

@dataclass
class SparseSystem:
    """Assembled (shift*I - scale*L) system with bc data folded in.

    Row i corresponds to node i (periodic aliases carry equality rows, solid
    levelset nodes carry identity rows). ``bc_rhs`` holds boundary
    contributions; the PDE right-hand side is added on flux rows via
    :meth:`rhs_with`.
    """

    matrix: sp.csr_matrix
    bc_rhs: np.ndarray
    row_kind: np.ndarray
    canon: np.ndarray
    pinned_node: int = -1

    @property
    def n(self) -> int:
        return self.bc_rhs.size

    def rhs_with(self, interior: Optional[np.ndarray] = None) -> np.ndarray:
        b = self.bc_rhs.copy()
        if interior is not None:
            flux = self.row_kind == ROW_FLUX
            b[flux] += interior[flux]
        return b

    def spread(self, x: np.ndarray) -> np.ndarray:
        """Copy canonical values onto periodic alias nodes."""
        return x[self.canon]

    def diagnostics(self) -> dict:
        d = self.matrix.diagonal()
        offsum = np.abs(self.matrix).sum(axis=1).A1 - np.abs(d)
        weak = int(np.sum(np.abs(d) < offsum * (1 - 1e-12)))
        return {"rows": self.n, "non_diagonally_dominant": weak}


def _wall_masks(tree: Quadtree):
    nix, niy = tree.node_icoords()
    return {"left": nix == 0, "right": nix == COORD_SPAN,
            "bottom": niy == 0, "top": niy == COORD_SPAN}


_MODE_NORM, _MODE_MIRROR, _MODE_CUT, _MODE_DROP, _MODE_OFF = 0, 1, 2, 3, 4

_DIR_STEP = {LEFT: (-1.0, 0.0), RIGHT: (1.0, 0.0),
             BOTTOM: (0.0, -1.0), TOP: (0.0, 1.0)}


def _closure_state(tree, st, bc, phi, flux, theta_floor):
    """Per-direction closure mode, effective arm length and boundary data
    for every flux row."""
    n = tree.n_nodes
    x, y = tree.node_positions()
    walls = _wall_masks(tree)

    mode = np.full((4, n), _MODE_NORM, dtype=np.int8)
    for d in range(4):
        mode[d, st.kind[d] == KIND_BOUNDARY] = _MODE_OFF
    h_eff = np.stack([np.nan_to_num(st.h[d], nan=1.0) for d in range(4)])
    g_cut = np.zeros((4, n))
    g_wall = np.zeros((4, n))

    iface = None if bc.interface is None else bc.interface[0]
    if phi is not None and iface is not None:
        solid_f = (phi >= 0.0).astype(float)
        for d in range(4):
            ok = flux & (mode[d] == _MODE_NORM)
            phi_nb = st.M[d] @ phi
            pattern = st.M[d].copy()
            pattern.data = np.abs(pattern.data)
            ghost_solid = (st.kind[d] == KIND_GHOST) & \
                ((pattern @ solid_f) > 1e-12)
            cut = ok & ((phi_nb >= 0.0) | ghost_solid)
            if not cut.any():
                continue
            ids = np.flatnonzero(cut)
            denom = phi[ids] - phi_nb[ids]
            theta = np.where(np.abs(denom) > 1e-300, phi[ids] / denom, 1.0)
            theta = np.clip(theta, theta_floor, 1.0)
            h_eff[d, ids] = theta * h_eff[d, ids]
            if iface == "dirichlet":
                mode[d, ids] = _MODE_CUT
                dxs, dys = _DIR_STEP[d]
                gv = _eval_bc(bc.interface[1],
                              x[ids] + dxs * h_eff[d, ids],
                              y[ids] + dys * h_eff[d, ids])
                if bc.interface_offset is not None:
                    gv = gv + bc.interface_offset[ids]
                g_cut[d, ids] = gv
            else:
                mode[d, ids] = _MODE_DROP

    for side in WALL_SIDES:
        kind_g = bc.walls[side]
        if kind_g[0] != "neumann":
            continue
        d = _SIDE_DIR[side]
        opp = _OPP[d]
        ids = np.flatnonzero(flux & (mode[d] == _MODE_OFF) & walls[side])
        if ids.size == 0:
            continue
        opp_special = np.isin(mode[opp, ids], (_MODE_CUT, _MODE_DROP))
        reg = ids[~opp_special]
        mode[d, reg] = _MODE_MIRROR
        h_eff[d, reg] = h_eff[opp, reg]
        g_wall[d, reg] = _eval_bc(kind_g[1], x[reg], y[reg])
        # interface reaches the wall: close this arm like the opposite one
        irr = ids[opp_special]
        mode[d, irr] = mode[opp, irr]
        h_eff[d, irr] = h_eff[opp, irr]
        g_cut[d, irr] = g_cut[opp, irr]

    return mode, h_eff, g_cut, g_wall


def assemble_poisson(tree: Quadtree, bc: ScalarBC,
                     levelset: Optional[ScalarField] = None,
                     helmholtz_shift: float = 0.0,
                     scale: float = 1.0,
                     theta_floor: float = 1e-3) -> SparseSystem:
    """Assemble (helmholtz_shift * I - scale * L_N) with boundary closures.

    With a levelset, nodes with phi >= 0 are carried as identity rows.
    A pin row replaces the first flux row whenever no Dirichlet data is
    present anywhere (all-Neumann/periodic Hodge problem).
    """
    if helmholtz_shift < 0:
        raise ValueError("helmholtz_shift must be non-negative")
    st = stencils(tree, bc.periodic_x, bc.periodic_y)
    n = tree.n_nodes
    x, y = tree.node_positions()
    walls = _wall_masks(tree)

    phi = None
    solid = np.zeros(n, dtype=bool)
    if levelset is not None:
        phi = levelset.check(tree)
        solid = phi >= 0.0
        if (~solid).sum() == 0:
            raise ValueError("empty fluid region")

    row_kind = np.full(n, ROW_FLUX, dtype=np.int8)
    row_kind[~st.is_canon] = ROW_ALIAS
    row_kind[st.is_canon & solid] = ROW_INACTIVE

    dir_val = np.zeros(n)
    for side in WALL_SIDES:
        kind_g = bc.walls[side]
        if kind_g[0] != "dirichlet":
            continue
        ids = np.flatnonzero(walls[side] & (row_kind == ROW_FLUX) | walls[side]
                             & (row_kind == ROW_DIRICHLET))
        row_kind[ids] = ROW_DIRICHLET
        dir_val[ids] = _eval_bc(kind_g[1], x[ids], y[ids])

    flux = row_kind == ROW_FLUX
    mode, h_eff, g_cut, g_wall = _closure_state(tree, st, bc, phi, flux,
                                                theta_floor)

    # Rows with no live flux arm degenerate to identity rows.
    live = np.zeros(n, dtype=int)
    for d in range(4):
        live += flux & np.isin(mode[d], (_MODE_NORM, _MODE_MIRROR, _MODE_CUT))
    row_kind[flux & (live == 0)] = ROW_INACTIVE
    flux = row_kind == ROW_FLUX

    pinned = -1
    has_dirichlet = (row_kind == ROW_DIRICHLET).any() or \
        (bc.interface is not None and bc.interface[0] == "dirichlet")
    if bc.pin_if_floating and not has_dirichlet:
        cand = np.flatnonzero(flux)
        if cand.size:
            pinned = int(cand[0])
            row_kind[pinned] = ROW_PIN
            flux = row_kind == ROW_FLUX

    bc_rhs = np.zeros(n)
    lap = sp.csr_matrix((n, n))
    eye = sp.eye(n, format="csr")
    for d_lo, d_hi in ((LEFT, RIGHT), (BOTTOM, TOP)):
        use_lo = flux & (mode[d_lo] != _MODE_OFF)
        use_hi = flux & (mode[d_hi] != _MODE_OFF)
        span = np.where(use_lo, h_eff[d_lo], 0.0) + np.where(use_hi, h_eff[d_hi], 0.0)
        inv_span = np.where(span > 0, 2.0 / np.where(span > 0, span, 1.0), 0.0)
        for d in (d_lo, d_hi):
            c = np.where(flux, inv_span / h_eff[d], 0.0)
            sel_norm = flux & (mode[d] == _MODE_NORM)
            sel_mir = flux & (mode[d] == _MODE_MIRROR)
            sel_cut = flux & (mode[d] == _MODE_CUT)
            if sel_norm.any():
                lap = lap + sp.diags(np.where(sel_norm, c, 0.0)) @ (st.M[d] - eye)
            if sel_mir.any():
                lap = lap + sp.diags(np.where(sel_mir, c, 0.0)) @ (st.M[_OPP[d]] - eye)
                bc_rhs += np.where(sel_mir, scale * 2.0 * g_wall[d] / h_eff[d], 0.0)
            if sel_cut.any():
                lap = lap - sp.diags(np.where(sel_cut, c, 0.0))
                bc_rhs += np.where(sel_cut, scale * c * g_cut[d], 0.0)

    A = sp.diags(np.where(flux, float(helmholtz_shift), 0.0)) - scale * lap

    ident = np.isin(row_kind, (ROW_DIRICHLET, ROW_INACTIVE, ROW_PIN))
    A = sp.diags((~ident).astype(float)) @ A + sp.diags(ident.astype(float))
    bc_rhs = np.where(ident, 0.0, bc_rhs)
    sel = row_kind == ROW_DIRICHLET
    bc_rhs[sel] = dir_val[sel]

    alias = row_kind == ROW_ALIAS
    if alias.any():
        ids = np.flatnonzero(alias)
        eq = sp.coo_matrix(
            (np.concatenate([np.ones(ids.size), -np.ones(ids.size)]),
             (np.concatenate([ids, ids]),
              np.concatenate([ids, st.canon[ids]]))), shape=(n, n)).tocsr()
        A = sp.diags((~alias).astype(float)) @ A + eq
        bc_rhs[ids] = 0.0

    return SparseSystem(A.tocsr(), bc_rhs, row_kind, st.canon, pinned)


def apply_laplacian(tree: Quadtree, f: ScalarField, bc: ScalarBC,
                    levelset: Optional[ScalarField] = None) -> ScalarField:
    """Evaluate L_N f with bc-consistent closures.

    Dirichlet-wall nodes get one-sided second-derivative rows (exact on
    quadratics) rather than identity rows, so the result samples the
    Laplacian everywhere in the fluid. Inhomogeneous closure constants
    (Neumann data, interface Dirichlet data) are folded in from the field's
    own boundary values, i.e. the closure is applied to f as given.
    """
    vals = f.check(tree)
    key = ("lap_apply", bc.signature(), None if levelset is None
           else levelset.version)
    cached = tree._cache.get(key)
    if cached is None:
        cached = _laplacian_apply_matrix(tree, bc, levelset)
        tree._cache[key] = cached
    A, solid = cached
    out = A @ vals
    out[solid] = 0.0
    return ScalarField(out, tree.version)


def _one_sided_second(st: Stencils, ids: np.ndarray, d_have: int):
    """COO rows of a one-sided second derivative toward d_have; falls back to
    a mirrored (zero outward derivative) closure without a second direct
    neighbor."""
    n = st.tree.n_nodes
    nb1 = st.nbr[d_have][ids]
    ok = (st.kind[d_have][ids] == KIND_DIRECT) & (nb1 >= 0)
    nb1c = np.clip(nb1, 0, n - 1)
    ok &= st.kind[d_have][nb1c] == KIND_DIRECT
    rows, cols, vals = [], [], []
    i3 = ids[ok]
    if i3.size:
        nba = nb1[ok]
        nbb = st.nbr[d_have][nba]
        r1 = st.h[d_have][i3]
        r2 = st.h[d_have][nba]
        rows += [i3, i3, i3]
        cols += [i3, nba, nbb]
        vals += [2.0 / (r1 * (r1 + r2)), -2.0 / (r1 * r2),
                 2.0 / (r2 * (r1 + r2))]
    i1 = ids[~ok]
    if i1.size:
        r1 = st.h[d_have][i1]
        rows += [i1, i1]
        cols += [i1, np.clip(st.nbr[d_have][i1], 0, n - 1)]
        vals += [-2.0 / r1**2, 2.0 / r1**2]
    return rows, cols, vals


def _laplacian_apply_matrix(tree, bc, levelset):
    n = tree.n_nodes
    stripped = _strip_dirichlet(bc)
    st = stencils(tree, bc.periodic_x, bc.periodic_y)
    solid = np.zeros(n, dtype=bool)
    phi = None
    if levelset is not None:
        phi = levelset.check(tree)
        solid = phi >= 0
    flux = st.is_canon & ~solid
    mode, h_eff, _, _ = _closure_state(tree, st, stripped, phi, flux, 1e-3)

    lap = sp.csr_matrix((n, n))
    eye = sp.eye(n, format="csr")
    for d_lo, d_hi in ((LEFT, RIGHT), (BOTTOM, TOP)):
        use_lo = flux & (mode[d_lo] != _MODE_OFF)
        use_hi = flux & (mode[d_hi] != _MODE_OFF)
        span = np.where(use_lo, h_eff[d_lo], 0.0) + np.where(use_hi, h_eff[d_hi], 0.0)
        inv_span = np.where(span > 0, 2.0 / np.where(span > 0, span, 1.0), 0.0)
        for d in (d_lo, d_hi):
            c = np.where(flux, inv_span / h_eff[d], 0.0)
            sel_norm = flux & (mode[d] == _MODE_NORM)
            sel_mir = flux & (mode[d] == _MODE_MIRROR)
            sel_cut = flux & (mode[d] == _MODE_CUT)
            if sel_norm.any():
                lap = lap + sp.diags(np.where(sel_norm, c, 0.0)) @ (st.M[d] - eye)
            if sel_mir.any():
                lap = lap + sp.diags(np.where(sel_mir, c, 0.0)) @ (st.M[_OPP[d]] - eye)
            if sel_cut.any():
                # apply mode: the cut value is not known here; treat the cut
                # arm like a dropped flux (homogeneous closure)
                pass

    # Dirichlet walls: replace mirrored closure with one-sided second
    # derivatives per axis, exact on quadratics.
    walls = _wall_masks(tree)
    on_dir = np.zeros(n, dtype=bool)
    for side in WALL_SIDES:
        if bc.walls[side][0] == "dirichlet":
            on_dir |= walls[side]
    on_dir &= flux
    ids_all = np.flatnonzero(on_dir)
    if ids_all.size:
        rows, cols, vals = [], [], []
        for d_lo, d_hi in ((LEFT, RIGHT), (BOTTOM, TOP)):
            lo_b = st.kind[d_lo][ids_all] == KIND_BOUNDARY
            hi_b = st.kind[d_hi][ids_all] == KIND_BOUNDARY
            both = ~lo_b & ~hi_b
            ib = ids_all[both]
            if ib.size:
                hl = st.h[d_lo][ib]
                hh = st.h[d_hi][ib]
                cl = 2.0 / ((hl + hh) * hl)
                ch = 2.0 / ((hl + hh) * hh)
                if (st.kind[d_lo][ib] == KIND_GHOST).any() or \
                   (st.kind[d_hi][ib] == KIND_GHOST).any():
                    raise NotImplementedError(
                        "hanging tangential arm on a Dirichlet wall")
                rows += [ib, ib, ib]
                cols += [ib, st.nbr[d_lo][ib], st.nbr[d_hi][ib]]
                vals += [-(cl + ch), cl, ch]
            r, c, v = _one_sided_second(st, ids_all[lo_b & ~hi_b], d_hi)
            rows += r; cols += c; vals += v
            r, c, v = _one_sided_second(st, ids_all[hi_b & ~lo_b], d_lo)
            rows += r; cols += c; vals += v
        patch = _coo(rows, cols, vals, n)
        lap = sp.diags((~on_dir).astype(float)) @ lap + patch

    lap = lap[st.canon]
    return lap.tocsr(), solid


def _strip_dirichlet(bc: ScalarBC) -> ScalarBC:
    walls = {}
    for side in WALL_SIDES:
        k = bc.walls[side]
        walls[side] = ("neumann", None) if k[0] == "dirichlet" else k
    return ScalarBC(walls, bc.interface, bc.interface_offset,
                    pin_if_floating=False)


def write_matrix_market(system: SparseSystem, path) -> None:
    coo = system.matrix.tocoo()
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i + 1} {j + 1} {v!r}\n")
