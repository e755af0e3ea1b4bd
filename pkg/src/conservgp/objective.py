"""Reduced training objective and its analytic gradient.

With the constrained fluxes eliminated through the Schur complement, the
loss over hyperparameters ``theta = (log ell_e, log sigma2)`` and interior
potentials ``u_un`` is

    L = sum_{e observed}   F_e.T @ A_e^-1 @ F_e        (data_fit_observed)
      + sum_{columns}      b.T @ S^-1 @ b              (data_fit_constrained)
      + sum_{all edges}    logdet A_e                  (complexity)

where ``A_e = K_e(X_e, X_e) + sigma2 * I`` on the edge's encoded inputs,
``S = sum_{e unobserved} (c_e c_e.T) (x) A_e`` with ``c_e`` the edge's
incidence column restricted to unobserved vertices, and
``b = -D0[obs_edges, un_vertices].T @ F_obs`` (independent of ``u_un``).

Gradients are exact matrix calculus, never finite differences:

    d(F.T A^-1 F)   = -alpha.T dA alpha,          alpha = A^-1 F
    d(b.T S^-1 b)   = -beta.T dS beta  = -sum_e gamma_e.T dA_e gamma_e,
                      beta = S^-1 b,   gamma_e = (c_e.T (x) I) beta
    d(logdet A)     = tr(A^-1 dA)

so every term reduces to a weight matrix ``M_e = A_e^-1 - z_e z_e.T``
(``z_e = alpha_e`` or ``gamma_e``) contracted against ``dA_e``.  For the RBF
kernel, ``dA/dlog ell = K * d2 / ell`` elementwise, ``dA/dlog sigma2 =
sigma2 * I``, and input perturbations touch one row/column of ``A_e`` at a
time, which collapses to the Hadamard form used in ``_input_gradient``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import ObservationSet
from .errors import NumericalError, ValidationError
from .graph import DirectedGraph
from .kernel import ENCODINGS, factor_spd, pairwise_sq_dists
from .solver import solve_schur, unanchored_components


@dataclass
class HyperParams:
    """Log-parameterized kernel hyperparameters: one length scale per edge,
    one shared noise variance."""

    log_lengthscales: np.ndarray
    log_noise_variance: float

    def copy(self) -> "HyperParams":
        return HyperParams(self.log_lengthscales.copy(), float(self.log_noise_variance))


@dataclass
class LossBreakdown:
    data_fit_observed: float
    data_fit_constrained: float
    complexity: float
    total: float
    singular_schur: bool = False
    jitter_events: int = 0


@dataclass
class LossGradient:
    log_lengthscales: np.ndarray
    log_noise_variance: float
    u_un: np.ndarray


def full_vertex_values(g: DirectedGraph, u_obs: np.ndarray, u_un: np.ndarray) -> np.ndarray:
    u_obs = np.atleast_2d(np.asarray(u_obs, dtype=float))
    u_un = np.atleast_2d(np.asarray(u_un, dtype=float))
    n = u_obs.shape[1]
    if g.num_unobserved_vertices and u_un.shape != (g.num_unobserved_vertices, n):
        raise ValidationError(
            f"u_un shape {u_un.shape}, expected ({g.num_unobserved_vertices}, {n})"
        )
    u = np.empty((g.num_vertices, n))
    u[g.observed_vertices] = u_obs
    if g.num_unobserved_vertices:
        u[g.unobserved_vertices] = u_un
    return u


class _EdgeTerm:
    """Per-edge intermediates shared between the loss and gradient passes."""

    __slots__ = ("inputs", "sq_dists", "gram", "factor", "lengthscale", "alpha")

    def __init__(self, inputs, sq_dists, gram, factor, lengthscale, alpha=None):
        self.inputs = inputs
        self.sq_dists = sq_dists
        self.gram = gram
        self.factor = factor
        self.lengthscale = lengthscale
        self.alpha = alpha


def _evaluate(
    g: DirectedGraph,
    params: HyperParams,
    u_un: np.ndarray,
    obs: ObservationSet,
    encoding: str,
    want_gradient: bool,
):
    if encoding not in ENCODINGS:
        raise ValidationError(f"unknown encoding {encoding!r}")
    if params.log_lengthscales.shape != (g.num_edges,):
        raise ValidationError(
            f"{params.log_lengthscales.shape[0]} length scales for {g.num_edges} edges"
        )
    if not np.all(np.isfinite(params.log_lengthscales)) or not np.isfinite(
        params.log_noise_variance
    ):
        raise NumericalError("non-finite hyperparameters")
    obs.validate_against(g)

    n = obs.n_data
    sigma2 = float(np.exp(params.log_noise_variance))
    u_full = full_vertex_values(g, obs.u_obs, u_un)
    un_vertices = g.unobserved_vertices
    v_un = len(un_vertices)
    local = np.full(g.num_vertices, -1, dtype=int)
    local[un_vertices] = np.arange(v_un)

    obs_row = np.full(g.num_edges, -1, dtype=int)
    obs_row[g.observed_edges] = np.arange(g.num_observed_edges)

    eye = np.eye(n)
    terms: list[_EdgeTerm] = []
    data_obs = 0.0
    complexity = 0.0
    jitter_events = 0

    for e, (a, b) in enumerate(g.edges):
        if encoding == "gradient":
            x = (u_full[b] - u_full[a])[:, None]
        else:
            x = np.column_stack([u_full[a], u_full[b]])
        d2 = pairwise_sq_dists(x)
        ell = float(np.exp(params.log_lengthscales[e]))
        gram = np.exp(-d2 / ell)
        f = factor_spd(gram + sigma2 * eye, context={"edge": e})
        if f.jitter > 0:
            jitter_events += 1
        complexity += f.logdet
        term = _EdgeTerm(x, d2, gram, f, ell)
        if g.edge_observed[e]:
            flux = obs.flux_obs[obs_row[e]]
            term.alpha = f.solve(flux)
            data_obs += float(flux @ term.alpha)
        terms.append(term)

    # Constrained data fit through the Schur complement.
    un_edges = g.unobserved_edges
    b_mat = np.zeros((v_un, n))
    for e in g.observed_edges:
        a, t = g.edges[e]
        flux = obs.flux_obs[obs_row[e]]
        if local[t] >= 0:
            b_mat[local[t]] -= flux
        if local[a] >= 0:
            b_mat[local[a]] += flux
    b_vec = b_mat.reshape(-1)

    singular_schur = False
    beta_mat = np.zeros((v_un, n))
    data_con = 0.0
    if v_un and len(un_edges):
        schur = np.zeros((v_un * n, v_un * n))
        for e in un_edges:
            a, t = g.edges[e]
            block = terms[e].gram + (sigma2 + terms[e].factor.jitter) * eye
            la, lt = local[a], local[t]
            if la >= 0:
                schur[la * n : (la + 1) * n, la * n : (la + 1) * n] += block
            if lt >= 0:
                schur[lt * n : (lt + 1) * n, lt * n : (lt + 1) * n] += block
            if la >= 0 and lt >= 0:
                schur[la * n : (la + 1) * n, lt * n : (lt + 1) * n] -= block
                schur[lt * n : (lt + 1) * n, la * n : (la + 1) * n] -= block
        beta, used_pinv, infeasible = solve_schur(
            schur, b_vec, n, unanchored_components(g)
        )
        singular_schur = bool(used_pinv or infeasible)
        data_con = float(b_vec @ beta)
        beta_mat = beta.reshape(v_un, n)
    elif v_un and np.max(np.abs(b_vec), initial=0.0) > 0:
        # No unobserved edges to carry the imbalance: constraint infeasible.
        singular_schur = True

    breakdown = LossBreakdown(
        data_fit_observed=data_obs,
        data_fit_constrained=data_con,
        complexity=complexity,
        total=data_obs + data_con + complexity,
        singular_schur=singular_schur,
        jitter_events=jitter_events,
    )
    if not np.isfinite(breakdown.total):
        raise NumericalError("non-finite loss", context={"breakdown": breakdown})
    if not want_gradient:
        return breakdown, None

    grad_ell = np.zeros(g.num_edges)
    grad_noise = 0.0
    grad_u = np.zeros((v_un, n))

    for e, (a, b) in enumerate(g.edges):
        term = terms[e]
        if g.edge_observed[e]:
            z = term.alpha
        else:
            # gamma_e: beta contracted with the edge's incidence column.
            z = np.zeros(n)
            if local[b] >= 0:
                z = z + beta_mat[local[b]]
            if local[a] >= 0:
                z = z - beta_mat[local[a]]
        a_inv = term.factor.solve(eye)
        m = a_inv - np.outer(z, z)
        h = m * term.gram
        grad_ell[e] = float(np.sum(h * term.sq_dists)) / term.lengthscale
        grad_noise += sigma2 * float(np.trace(m))

        if v_un == 0 or (local[a] < 0 and local[b] < 0):
            continue
        dx = _input_gradient(term, h)
        if encoding == "gradient":
            if local[b] >= 0:
                grad_u[local[b]] += dx[:, 0]
            if local[a] >= 0:
                grad_u[local[a]] -= dx[:, 0]
        else:
            if local[a] >= 0:
                grad_u[local[a]] += dx[:, 0]
            if local[b] >= 0:
                grad_u[local[b]] += dx[:, 1]

    gradient = LossGradient(
        log_lengthscales=grad_ell,
        log_noise_variance=float(grad_noise),
        u_un=grad_u,
    )
    return breakdown, gradient


def _input_gradient(term: _EdgeTerm, h: np.ndarray) -> np.ndarray:
    # dL/dX[j, m] = 2 sum_k M[j,k] * dK[j,k]/dX[j,m] with
    # dK[j,k]/dX[j,m] = (-2/ell) K[j,k] (X[j,m]-X[k,m]); collapses to the
    # Hadamard form below with H = M * K.
    x = term.inputs
    row_sums = h.sum(axis=1)
    return (-4.0 / term.lengthscale) * (x * row_sums[:, None] - h @ x)


def loss(
    g: DirectedGraph,
    params: HyperParams,
    u_un: np.ndarray,
    obs: ObservationSet,
    encoding: str = "gradient",
) -> LossBreakdown:
    breakdown, _ = _evaluate(g, params, u_un, obs, encoding, want_gradient=False)
    return breakdown


def loss_gradient(
    g: DirectedGraph,
    params: HyperParams,
    u_un: np.ndarray,
    obs: ObservationSet,
    encoding: str = "gradient",
) -> LossGradient:
    _, gradient = _evaluate(g, params, u_un, obs, encoding, want_gradient=True)
    return gradient


def loss_and_gradient(
    g: DirectedGraph,
    params: HyperParams,
    u_un: np.ndarray,
    obs: ObservationSet,
    encoding: str = "gradient",
) -> tuple[LossBreakdown, LossGradient]:
    breakdown, gradient = _evaluate(g, params, u_un, obs, encoding, want_gradient=True)
    return breakdown, gradient
