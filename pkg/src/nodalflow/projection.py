"""Collocated nodal projection: u_new = u - G_N L_N^{-1} D_N u.

The operator is not idempotent on quadtrees (the nodal Laplacian is not the
composition of the nodal divergence and gradient), so it is applied
iteratively with a relative update-norm stopping rule; the accumulated Hodge
field sums the per-iteration potentials so pressure reconstruction sees the
total removed gradient part.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import linalg
from .grid import COORD_SPAN, Quadtree
from .operators import (FlowBC, ScalarField, VectorField, apply_divergence,
                        apply_gradient, assemble_poisson, l2_norm, stencils,
                        _wall_masks)


@dataclass
class ProjectionConfig:
    eps_inner: float = 1e-3
    k_max: int = 5
    linear_tol: float = 1e-10
    linear_max_iter: int = 20000
    extension_order: int = 2

    def __post_init__(self):
        if self.eps_inner < 0 or self.k_max < 1:
            raise ValueError("eps_inner must be >= 0 and k_max >= 1")


def _extend_if_needed(tree, field, levelset, order, bandwidth=None):
    if levelset is None:
        return field
    from .levelset import extend_field

    return extend_field(tree, levelset, field, order=order,
                        bandwidth=bandwidth)


def _hodge_system(tree, hbc, levelset):
    key = ("hodge_sys", hbc.signature(),
           None if levelset is None else levelset.version)
    system = tree._cache.get(key)
    if system is None:
        system = assemble_poisson(tree, hbc, levelset,
                                  helmholtz_shift=0.0, scale=1.0)
        tree._cache[key] = system
    return system


def _left_null_vector(tree, key, system):
    """Left null vector z of the floating Laplacian (z^T L = 0), via one
    transpose solve against the pinned node's unit vector.

    Projecting right-hand sides onto range(L) = {b : z^T b = 0} before the
    pinned solve keeps every flux equation satisfied; the pin then only
    selects the additive constant. Absorbing the incompatibility in the
    pinned row instead leaves a point-source response there and pushes
    projection eigenvalues above one on non-graded trees.
    """
    cache_key = ("hodge_lnull", key)
    z = tree._cache.get(cache_key)
    if z is None:
        k = system.pinned_node
        ek = np.zeros(system.n)
        ek[k] = 1.0
        at = system.matrix.T.tocsr()
        w, rep = linalg.solve(at, ek, tol=1e-12, max_iter=50000)
        if not rep.converged and rep.residual > 1e-8:
            raise RuntimeError(
                f"left-null solve failed: residual {rep.residual:.3e}")
        z = w.copy()
        z[k] = 0.0
        tree._cache[cache_key] = z
    return z


def project_once(tree: Quadtree, w: VectorField, bc: FlowBC,
                 levelset: Optional[ScalarField] = None,
                 linear_tol: float = 1e-10,
                 linear_max_iter: int = 20000,
                 extension_order: int = 2,
                 hodge_guess: Optional[np.ndarray] = None
                 ) -> tuple[VectorField, ScalarField, linalg.SolveReport]:
    """One application of the nodal projection.

    Solves L_N phi = D_N w with the Hodge boundary conditions (homogeneous
    Neumann on Dirichlet-velocity walls and on the interface, homogeneous
    Dirichlet on outflow walls, pinned node when the problem floats) and
    subtracts G_N phi. With a levelset, fluid quantities are extended across
    the interface before differencing.
    """
    w.check(tree)
    px, py = bc.periodic_x, bc.periodic_y
    hbc = bc.hodge_bc(has_interface=levelset is not None)

    w_eff = w
    if levelset is not None:
        w_eff = VectorField(
            _extend_if_needed(tree, w.u, levelset, extension_order),
            _extend_if_needed(tree, w.v, levelset, extension_order))

    div = apply_divergence(tree, w_eff, px, py)
    system = _hodge_system(tree, hbc, levelset)
    rhs = system.rhs_with(-div.values)
    if system.pinned_node >= 0:
        z = _left_null_vector(
            tree, (hbc.signature(),
                   None if levelset is None else levelset.version), system)
        zz = float(z @ z)
        if zz > 0:
            rhs = rhs - z * (float(z @ rhs) / zz)
    sol, report = linalg.solve(system, rhs, tol=linear_tol,
                               max_iter=linear_max_iter, x0=hodge_guess)
    if not report.converged and report.residual > max(1e-6, linear_tol * 1e3):
        raise RuntimeError(
            f"hodge solve failed: residual {report.residual:.3e} "
            f"after {report.iterations} iterations")
    phi = ScalarField(system.spread(sol), tree.version)

    phi_eff = _extend_if_needed(tree, phi, levelset, extension_order)
    grad = apply_gradient(tree, phi_eff, hbc)
    out = VectorField(ScalarField(w.u.values - grad.u.values, tree.version),
                      ScalarField(w.v.values - grad.v.values, tree.version))
    return out, phi, report


def project_iterate(tree: Quadtree, w: VectorField, bc: FlowBC,
                    cfg: ProjectionConfig,
                    levelset: Optional[ScalarField] = None
                    ) -> tuple[VectorField, ScalarField, int]:
    """Iterated projection with the relative L2 update-norm stopping rule."""
    fluid = None
    if levelset is not None:
        fluid = (levelset.check(tree) < 0).astype(float)
        fluid2 = np.concatenate([fluid, fluid])
    u = w
    hodge_total = np.zeros(tree.n_nodes)
    iters = 0
    guess = None
    for _ in range(cfg.k_max):
        u_new, phi, _ = project_once(
            tree, u, bc, levelset, linear_tol=cfg.linear_tol,
            linear_max_iter=cfg.linear_max_iter,
            extension_order=cfg.extension_order, hodge_guess=guess)
        hodge_total += phi.values
        iters += 1
        upd = u_new.stacked() - u.stacked()
        if fluid is not None:
            upd = upd * fluid2
        nrm_upd = l2_norm(tree, upd)
        nrm_u = l2_norm(tree, u_new.stacked() if fluid is None
                        else u_new.stacked() * fluid2)
        u = u_new
        if nrm_upd <= cfg.eps_inner * max(nrm_u, 1e-300):
            break
    return u, ScalarField(hodge_total, tree.version), iters


def tangential_wall_mask(tree: Quadtree, bc: FlowBC) -> np.ndarray:
    """Stacked (u, v) mask zeroing tangential components on Dirichlet walls:
    u on horizontal walls, v on vertical walls."""
    n = tree.n_nodes
    walls = _wall_masks(tree)
    keep = np.ones(2 * n)
    for side in bc.dirichlet_wall_sides():
        if side in ("bottom", "top"):
            keep[:n][walls[side]] = 0.0
        else:
            keep[n:][walls[side]] = 0.0
    return keep


def build_projection_operator(tree: Quadtree, bc: FlowBC,
                              levelset: Optional[ScalarField] = None,
                              zero_tangential: bool = False,
                              linear_tol: float = 1e-12,
                              max_dim: int = 4096):
    """Matrix-free projection over stacked (u, v) canonical-node vectors.

    With ``zero_tangential`` the input's tangential components on
    Dirichlet-velocity walls are zeroed before projecting (no-slip variant),
    which introduces zero eigenvalues carried by wall basis vectors.
    """
    st = stencils(tree, bc.periodic_x, bc.periodic_y)
    canon_ids = np.flatnonzero(st.is_canon)
    nc = canon_ids.size
    dim = 2 * nc
    if dim > max_dim:
        raise ValueError(f"operator dimension {dim} above cap {max_dim}")
    n = tree.n_nodes
    mask = tangential_wall_mask(tree, bc) if zero_tangential else None

    def apply(vec: np.ndarray) -> np.ndarray:
        if vec.shape != (dim,):
            raise ValueError("stacked canonical (u, v) vector expected")
        full = np.zeros(2 * n)
        full[:n][canon_ids] = vec[:nc]
        full[n:][canon_ids] = vec[nc:]
        full[:n] = full[:n][st.canon]
        full[n:] = full[n:][st.canon]
        if mask is not None:
            full = full * mask
        w = VectorField.from_stacked(tree, full)
        out, _, _ = project_once(tree, w, bc, levelset,
                                 linear_tol=linear_tol)
        s = out.stacked()
        return np.concatenate([s[:n][canon_ids], s[n:][canon_ids]])

    return apply, dim


def stability_series(tree: Quadtree, w0: VectorField, bc: FlowBC,
                     levelset: Optional[ScalarField] = None,
                     n_iters: int = 40,
                     linear_tol: float = 1e-12) -> dict:
    """Successive projections of w0; returns per-iteration distances to the
    final iterate in both volume-weighted and unweighted L2 norms."""
    fluid2 = None
    if levelset is not None:
        f = (levelset.check(tree) < 0).astype(float)
        fluid2 = np.concatenate([f, f])
    iterates = [w0.stacked()]
    u = w0
    for _ in range(n_iters):
        u, _, _ = project_once(tree, u, bc, levelset, linear_tol=linear_tol)
        iterates.append(u.stacked())
    final = iterates[-1]
    var_w, var_u = [], []
    for k in range(n_iters):
        d = iterates[k] - final
        if fluid2 is not None:
            d = d * fluid2
        var_w.append(l2_norm(tree, d, weighted=True))
        var_u.append(l2_norm(tree, d, weighted=False))
    norm0 = l2_norm(tree, iterates[0] if fluid2 is None
                    else iterates[0] * fluid2)
    return {"weighted": np.array(var_w), "unweighted": np.array(var_u),
            "norm0": norm0}
