"""Equality-constrained flux solve via the block KKT system.

For fixed hyperparameters and vertex values, the unobserved fluxes minimize
``F.T @ Khat @ F`` subject to conservation at every unobserved vertex.  The
blocks follow the row-major vectorization layout: ``vec`` stacks the rows of
the ``E_un x N_data`` flux matrix, ``Khat`` is the block diagonal of the
*inverse* regularized kernel matrices, ``D0hat = D0[un_edges, un_vertices]
(x) I_N``, and ``b = -D0[obs_edges, un_vertices].T @ F_obs``.  The closed
form through the Schur complement ``S = D0hat.T @ Khat^-1 @ D0hat`` is

    F = Khat^-1 @ D0hat @ S^-1 @ b,      lambda = -S^-1 @ b,

where ``Khat^-1`` is simply the block diagonal of the un-inverted kernel
matrices, so no second inversion is ever performed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve

from .errors import ValidationError
from .graph import DirectedGraph
from .kernel import EdgeModel, NoiseModel, factor_spd, kernel_matrix

# Singular-Schur fallback: eigenvalues below this relative cutoff are treated
# as zero by the pseudo-inverse.
_PINV_RCOND = 1e-12


def unanchored_components(g: DirectedGraph) -> list[list[int]]:
    """Groups of unobserved vertices whose conservation rows are redundant.

    Connected components of the unobserved-edge subgraph that never touch an
    observed vertex carry a constant null direction of the Schur matrix (their
    rows sum to zero), so the Schur complement is structurally singular
    whenever such a component exists -- the series circuit included.  Returns
    the components as lists of *local* unobserved-vertex indices.
    """
    local = _local_vertex_index(g)
    v_un = g.num_unobserved_vertices
    parent = list(range(v_un))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj

    anchored = np.zeros(v_un, dtype=bool)
    touched = np.zeros(v_un, dtype=bool)
    for e in g.unobserved_edges:
        a, b = g.edges[e]
        la, lb = local[a], local[b]
        if la >= 0 and lb >= 0:
            union(la, lb)
            touched[la] = touched[lb] = True
        elif la >= 0:
            anchored[la] = True
            touched[la] = True
        elif lb >= 0:
            anchored[lb] = True
            touched[lb] = True
    groups: dict[int, list[int]] = {}
    group_anchored: dict[int, bool] = {}
    for i in range(v_un):
        r = find(i)
        groups.setdefault(r, []).append(i)
        group_anchored[r] = group_anchored.get(r, False) or anchored[i]
    return [sorted(members) for r, members in sorted(groups.items()) if not group_anchored[r]]


def solve_schur(
    schur: np.ndarray,
    b_vec: np.ndarray,
    n_data: int,
    unanchored: list[list[int]],
    feas_tol: float = 1e-8,
) -> tuple[np.ndarray, bool, bool]:
    """Pseudo-inverse solve of ``schur @ beta = b_vec`` with the structural
    null space handled exactly.

    The null space is spanned by per-component constants (one direction per
    unanchored component and data column), so instead of thresholding
    eigenvalues the matrix is augmented with ``s * Z Z^T`` on those known
    directions, Cholesky-factored at full conditioning, and the null
    component of the solution is projected off afterwards.  This reproduces
    the minimum-norm least-squares solution for feasible and infeasible
    right-hand sides alike.  Returns ``(beta, degenerate, infeasible)``:
    ``degenerate`` records that the null space was nontrivial, ``infeasible``
    that the rhs had mass on it (conservation cannot be met exactly, e.g.
    noisy observations).
    """
    dim = schur.shape[0]
    if dim == 0:
        return np.zeros(0), False, False
    if not unanchored:
        try:
            c = cho_factor(schur, lower=True, check_finite=False)
            return cho_solve(c, b_vec), False, False
        except np.linalg.LinAlgError:
            return _eigh_pinv_solve(schur, b_vec), True, False

    b_mat = b_vec.reshape(-1, n_data)
    imbalance = 0.0
    for members in unanchored:
        imbalance = max(imbalance, float(np.max(np.abs(b_mat[members].sum(axis=0)))))
    infeasible = imbalance > feas_tol * max(1.0, float(np.max(np.abs(b_vec))))

    shift = max(float(np.trace(schur)) / dim, 1.0)
    augmented = schur.copy()
    for members in unanchored:
        w = shift / len(members)
        for j in range(n_data):
            idx = np.asarray(members) * n_data + j
            augmented[np.ix_(idx, idx)] += w
    try:
        c = cho_factor(augmented, lower=True, check_finite=False)
        beta = cho_solve(c, b_vec)
    except np.linalg.LinAlgError:
        return _eigh_pinv_solve(schur, b_vec), True, infeasible
    beta_mat = beta.reshape(-1, n_data).copy()
    for members in unanchored:
        beta_mat[members] -= beta_mat[members].mean(axis=0)
    return beta_mat.reshape(-1), True, infeasible


def _eigh_pinv_solve(schur: np.ndarray, b_vec: np.ndarray) -> np.ndarray:
    w, vecs = np.linalg.eigh(schur)
    cutoff = _PINV_RCOND * max(float(w[-1]), 0.0)
    inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    return vecs @ (inv * (vecs.T @ b_vec))


@dataclass
class KktAssembly:
    """Dense blocks of the conservation KKT system.

    ``khat`` holds the inverse regularized kernel blocks; ``kernel_blocks``
    retains the un-inverted blocks (= ``khat``'s inverse) for the closed-form
    back-substitution.
    """

    khat: np.ndarray
    d0hat: np.ndarray
    b: np.ndarray
    b_vec: np.ndarray
    kernel_blocks: list[np.ndarray]
    n_data: int
    unobserved_edges: np.ndarray
    unobserved_vertices: np.ndarray
    unanchored_components: list[list[int]]


@dataclass
class FluxSolution:
    """Solved unobserved fluxes with multipliers and solve diagnostics."""

    flux_un: np.ndarray
    multipliers: np.ndarray
    schur: np.ndarray
    singular_schur: bool = False
    kkt_residual: float = 0.0
    constraint_residual: float = 0.0


def edge_inputs(
    g: DirectedGraph, u_full: np.ndarray, encoding: str
) -> list[np.ndarray]:
    """Per-edge N x d kernel inputs from the full V x N vertex-value matrix.

    ``gradient`` feeds the scalar difference ``u[target] - u[source]``;
    ``endpoints`` feeds the raw pair ``(u[source], u[target])``.
    """
    u_full = np.asarray(u_full, dtype=float)
    if u_full.ndim == 1:
        u_full = u_full[:, None]
    if u_full.shape[0] != g.num_vertices:
        raise ValidationError(
            f"vertex values have {u_full.shape[0]} rows, expected {g.num_vertices}"
        )
    out = []
    for a, b in g.edges:
        if encoding == "gradient":
            out.append((u_full[b] - u_full[a])[:, None])
        elif encoding == "endpoints":
            out.append(np.column_stack([u_full[a], u_full[b]]))
        else:
            raise ValidationError(f"unknown encoding {encoding!r}")
    return out


def assemble_rhs(g: DirectedGraph, flux_obs: np.ndarray) -> np.ndarray:
    """Constraint right-hand side ``b = -D0[obs_edges, un_vertices].T @ F_obs``.

    Shape V_un x N: minus the divergence the observed fluxes already deposit
    at each unobserved vertex.
    """
    flux_obs = np.atleast_2d(np.asarray(flux_obs, dtype=float))
    obs_edges = g.observed_edges
    if flux_obs.shape[0] != len(obs_edges):
        raise ValidationError(
            f"F_obs has {flux_obs.shape[0]} rows, expected {len(obs_edges)}"
        )
    n_data = flux_obs.shape[1]
    local = _local_vertex_index(g)
    b = np.zeros((g.num_unobserved_vertices, n_data))
    for row, e in enumerate(obs_edges):
        a, t = g.edges[e]
        if local[t] >= 0:
            b[local[t]] -= flux_obs[row]
        if local[a] >= 0:
            b[local[a]] += flux_obs[row]
    return b


def _local_vertex_index(g: DirectedGraph) -> np.ndarray:
    local = np.full(g.num_vertices, -1, dtype=int)
    local[g.unobserved_vertices] = np.arange(g.num_unobserved_vertices)
    return local


def assemble_kkt(
    g: DirectedGraph,
    edge_models: Sequence[EdgeModel],
    noise: NoiseModel,
    u_full: np.ndarray,
    flux_obs: np.ndarray,
) -> KktAssembly:
    """Build the dense KKT blocks for the current vertex values.

    ``edge_models`` is indexed by global edge id; ``u_full`` supplies values
    (observed data or current iterates) for every vertex.
    """
    if len(edge_models) != g.num_edges:
        raise ValidationError(
            f"{len(edge_models)} edge models for {g.num_edges} edges"
        )
    inputs = edge_inputs(g, u_full, edge_models[0].encoding)
    n_data = inputs[0].shape[0]
    un_edges = g.unobserved_edges
    un_vertices = g.unobserved_vertices
    local = _local_vertex_index(g)

    kernel_blocks = []
    inverse_blocks = []
    for e in un_edges:
        block = kernel_matrix(inputs[e], edge_models[e].lengthscale, noise.noise_variance)
        f = factor_spd(block, context={"edge": int(e)})
        kernel_blocks.append(block + f.jitter * np.eye(n_data))
        inverse_blocks.append(f.solve(np.eye(n_data)))

    e_un = len(un_edges)
    v_un = len(un_vertices)
    if e_un:
        khat = block_diag(*inverse_blocks)
    else:
        khat = np.zeros((0, 0))
    d0_sub = np.zeros((e_un, v_un))
    for row, e in enumerate(un_edges):
        a, t = g.edges[e]
        if local[a] >= 0:
            d0_sub[row, local[a]] = -1.0
        if local[t] >= 0:
            d0_sub[row, local[t]] = 1.0
    d0hat = np.kron(d0_sub, np.eye(n_data))

    b = assemble_rhs(g, flux_obs)
    if b.shape[1] != n_data:
        raise ValidationError(
            f"F_obs has {b.shape[1]} columns, vertex values have {n_data}"
        )
    return KktAssembly(
        khat=khat,
        d0hat=d0hat,
        b=b,
        b_vec=b.reshape(-1),
        kernel_blocks=kernel_blocks,
        n_data=n_data,
        unobserved_edges=un_edges,
        unobserved_vertices=un_vertices,
        unanchored_components=unanchored_components(g),
    )


def solve_flux(a: KktAssembly) -> FluxSolution:
    """Closed-form solve of the assembled KKT system.

    A singular Schur matrix (unobserved subgraph with a component seeing no
    observed flux) falls back to the pseudo-inverse and flags the solution as
    non-unique; the flux itself stays well-defined because the Schur null
    space coincides with the null space of ``D0hat``.
    """
    n = a.n_data
    e_un = len(a.unobserved_edges)
    v_un = len(a.unobserved_vertices)
    if e_un == 0:
        return FluxSolution(
            flux_un=np.zeros((0, n)),
            multipliers=np.zeros((v_un, n)),
            schur=np.zeros((v_un * n, v_un * n)),
        )

    kinv = block_diag(*a.kernel_blocks)  # inverse of khat by construction
    schur = a.d0hat.T @ kinv @ a.d0hat
    schur = 0.5 * (schur + schur.T)

    beta, used_pinv, infeasible = solve_schur(
        schur, a.b_vec, n, a.unanchored_components
    )
    flux_vec = kinv @ (a.d0hat @ beta)
    lam_vec = -beta

    # Stationarity holds by construction; the primal residual is the honest check.
    constraint = a.d0hat.T @ flux_vec - a.b_vec
    stationarity = a.khat @ flux_vec + a.d0hat @ lam_vec
    kkt_residual = float(
        max(
            np.max(np.abs(stationarity)) if stationarity.size else 0.0,
            np.max(np.abs(constraint)) if constraint.size and not infeasible else 0.0,
        )
    )
    return FluxSolution(
        flux_un=flux_vec.reshape(e_un, n),
        multipliers=lam_vec.reshape(v_un, n) if v_un else np.zeros((0, n)),
        schur=schur,
        singular_schur=bool(used_pinv or len(a.unanchored_components) or infeasible),
        kkt_residual=kkt_residual,
        constraint_residual=float(np.max(np.abs(constraint))) if constraint.size else 0.0,
    )


def full_flux(g: DirectedGraph, flux_obs: np.ndarray, flux_un: np.ndarray) -> np.ndarray:
    """Scatter observed and solved fluxes back to global edge order (E x N)."""
    flux_obs = np.atleast_2d(np.asarray(flux_obs, dtype=float))
    flux_un = np.atleast_2d(np.asarray(flux_un, dtype=float))
    n = flux_obs.shape[1] if flux_obs.size else flux_un.shape[1]
    out = np.zeros((g.num_edges, n))
    out[g.observed_edges] = flux_obs
    if flux_un.size:
        out[g.unobserved_edges] = flux_un
    return out
