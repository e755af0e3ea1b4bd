"""Out-of-sample evaluation: posterior prediction, conservation-consistent
interior inference, and rigorous error bounds.

Given fresh boundary potentials, the interior potentials are recovered by
Newton root-finding on the interior divergence of the predicted fluxes,
``divergence(f(u))[unobserved vertices] = 0``.  The Newton step is damped by
backtracking on the residual norm, optionally projected into the physical box
``[0, max boundary potential]``, and seeded restarts kick in when a solve
stalls; a singular Jacobian falls back to the pseudo-inverse and is flagged.
The result is a boundary-potential -> edge-flux map over the whole graph.

Error bounds per edge at query input x:

    MSE(x)       <= sigma(x)^2 ||f||_K^2 + sigma_eps^2 ||phi(x)||_2^2
    |f - fhat|   <= sigma(x) ||f||_K + sigma_eps ||phi(x)||_2 sqrt(2 log(2/delta))

with ``phi(x) = K(x, X) A^-1`` and ``sigma(x)`` the posterior standard
deviation.  The unknown RKHS norm ``||f||_K`` is estimated by the trained
regressor's own norm (times a configurable safety factor); the bounds take
the inferred interior inputs as exact, so interior coverage is optimistic by
construction -- boundary edges are the calibrated surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import poisson_oracle
from .errors import ValidationError
from .graph import graph_divergence
from .kernel import factor_spd
from .trainer import TrainedSurrogate


@dataclass
class NewtonOptions:
    """Controls for the interior-potential root solve.

    The edge maps revert to zero far from their training inputs, which makes
    "all fluxes vanish" a spurious conservation root with a large basin, and
    conservation admits multiple genuine roots besides; the initial guess
    decides which one Newton finds.  ``informed`` (default, 1-D gradient
    encoding) seeds from a Dirichlet solve weighted by each edge map's own
    fitted slope -- the model's equivalent linear network -- and falls back
    to ``nearest`` (the trained interior state of the closest training
    column) for 2-D encodings.  Restarts walk the ladder informed ->
    nearest -> harmonic -> seeded uniform draws.
    """

    max_iter: int = 100
    tol: float = 1e-10
    scaled_tol: bool = True
    damping_factor: float = 0.5
    max_backtracks: int = 20
    box: bool = False
    restarts: int = 5
    seed: int = 0
    init: str = "informed"  # informed | nearest | harmonic | mean | uniform

    def __post_init__(self):
        if self.init not in ("informed", "nearest", "harmonic", "mean", "uniform"):
            raise ValidationError(f"unknown init policy {self.init!r}")


@dataclass
class InferenceResult:
    """Batched inference output; arrays are indexed by test column."""

    u_full: np.ndarray
    flux_full: np.ndarray
    newton_iters: np.ndarray
    residual_norm: np.ndarray
    converged: np.ndarray
    jacobian_singular: np.ndarray
    restarts_used: np.ndarray

    @property
    def n_columns(self) -> int:
        return self.u_full.shape[1]


@dataclass
class BoundReport:
    sigma_x: float
    phi_norm: float
    rkhs_norm_estimate: float
    delta: float
    mse_bound: float
    pointwise_bound: float


@dataclass
class _EdgePredictor:
    inputs: np.ndarray
    targets: np.ndarray
    lengthscale: float
    factor: object
    alpha: np.ndarray
    rkhs_sq: float

    def cross(self, queries: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        diff = q[:, None, :] - self.inputs[None, :, :]
        return np.exp(-np.einsum("mnk,mnk->mn", diff, diff) / self.lengthscale)

    def mean(self, queries: np.ndarray) -> np.ndarray:
        return self.cross(queries) @ self.alpha

    def mean_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = self.cross(x[None, :])[0]
        w = k * self.alpha
        grad = (-2.0 / self.lengthscale) * (x * w.sum() - self.inputs.T @ w)
        return float(k @ self.alpha), grad


class _Predictor:
    """Cached per-edge factorizations for a trained surrogate."""

    def __init__(self, model: TrainedSurrogate):
        self.model = model
        self.graph = model.graph
        self.noise_variance = model.noise.noise_variance
        self.edges: list[_EdgePredictor] = []
        n = model.n_data
        eye = np.eye(n)
        for e, em in enumerate(model.edges):
            x = np.atleast_2d(np.asarray(em.training_inputs, dtype=float))
            gram = np.exp(
                -_sq_dist_matrix(x) / em.lengthscale
            )
            f = factor_spd(gram + self.noise_variance * eye, context={"edge": e})
            alpha = f.solve(em.training_targets)
            rkhs_sq = float(alpha @ (gram @ alpha))
            self.edges.append(
                _EdgePredictor(
                    inputs=x,
                    targets=np.asarray(em.training_targets, dtype=float),
                    lengthscale=em.lengthscale,
                    factor=f,
                    alpha=alpha,
                    rkhs_sq=max(rkhs_sq, 0.0),
                )
            )
        self.slope_weights = self._fit_slope_weights() if model.encoding == "gradient" else None

    def _fit_slope_weights(self) -> np.ndarray:
        # Least-squares slope of each edge's (input, flux) training pairs;
        # the negated slope is the edge weight of the model's own equivalent
        # linear network (flux convention runs against the encoded gradient).
        weights = np.ones(self.graph.num_edges)
        for e, pred in enumerate(self.edges):
            x = pred.inputs[:, 0]
            y = pred.targets
            vx = x - x.mean()
            denom = float(vx @ vx)
            slope = float(vx @ (y - y.mean())) / denom if denom > 1e-12 else 0.0
            weights[e] = min(max(-slope, 1e-6), 1e6)
        return weights


def _sq_dist_matrix(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _predictor(model: TrainedSurrogate) -> _Predictor:
    cache = model._predictor_cache
    if cache is None:
        cache = _Predictor(model)
        model._predictor_cache = cache
    return cache


def encode_edge_input(u_a: float, u_b: float, encoding: str) -> np.ndarray:
    if encoding == "gradient":
        return np.array([u_b - u_a])
    return np.array([u_a, u_b])


def predict_edge(model: TrainedSurrogate, e: int, x) -> tuple[float, float]:
    """Posterior mean and variance (floored at 0) for edge ``e`` at input x."""
    pred = _edge_predictor(model, e)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = pred.cross(x[None, :])[0]
    mean = float(k @ pred.alpha)
    var = 1.0 - float(k @ pred.factor.solve(k))
    return mean, max(var, 0.0)


def _edge_predictor(model: TrainedSurrogate, e: int) -> _EdgePredictor:
    p = _predictor(model)
    if not (0 <= e < len(p.edges)):
        raise ValidationError(f"unknown edge id {e}")
    return p.edges[e]


def error_bounds(
    model: TrainedSurrogate, e: int, x, delta: float, rkhs_safety: float = 1.0
) -> BoundReport:
    """Mean-squared and pointwise error bounds at confidence ``1 - delta``."""
    if not (0 < delta < 1):
        raise ValidationError(f"delta must lie in (0, 1), got {delta}")
    pred = _edge_predictor(model, e)
    p = _predictor(model)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = pred.cross(x[None, :])[0]
    phi = pred.factor.solve(k)
    phi_norm = float(np.linalg.norm(phi))
    var = max(1.0 - float(k @ phi), 0.0)
    sigma_x = math.sqrt(var)
    rkhs = rkhs_safety * math.sqrt(pred.rkhs_sq)
    noise_var = p.noise_variance
    tail = math.sqrt(2.0 * math.log(2.0 / delta))
    return BoundReport(
        sigma_x=sigma_x,
        phi_norm=phi_norm,
        rkhs_norm_estimate=rkhs,
        delta=delta,
        mse_bound=var * rkhs**2 + noise_var * phi_norm**2,
        pointwise_bound=sigma_x * rkhs + math.sqrt(noise_var) * phi_norm * tail,
    )


def _edge_fluxes(p: _Predictor, u: np.ndarray, encoding: str) -> np.ndarray:
    g = p.graph
    flux = np.empty(g.num_edges)
    for e, (a, b) in enumerate(g.edges):
        x = encode_edge_input(u[a], u[b], encoding)
        flux[e] = p.edges[e].mean(x[None, :])[0]
    return flux


def _jacobian(p: _Predictor, u: np.ndarray, encoding: str, local: np.ndarray, v_un: int) -> np.ndarray:
    g = p.graph
    jac = np.zeros((v_un, v_un))
    for e, (a, b) in enumerate(g.edges):
        la, lb = local[a], local[b]
        if la < 0 and lb < 0:
            continue
        x = encode_edge_input(u[a], u[b], encoding)
        _, gx = p.edges[e].mean_and_grad(x)
        if encoding == "gradient":
            df_da, df_db = -gx[0], gx[0]
        else:
            df_da, df_db = gx[0], gx[1]
        # Divergence rows: +1 at the target, -1 at the source.
        for lv, sign in ((lb, 1.0), (la, -1.0)):
            if lv < 0:
                continue
            if la >= 0:
                jac[lv, la] += sign * df_da
            if lb >= 0:
                jac[lv, lb] += sign * df_db
    return jac


def infer_potentials(
    model: TrainedSurrogate,
    boundary: np.ndarray,
    flux_obs: np.ndarray | None = None,
    options: NewtonOptions | None = None,
) -> InferenceResult:
    """Infer interior potentials for each boundary column by Newton.

    ``boundary`` has one row per observed vertex (id order) and one column
    per test case.  ``flux_obs`` is accepted for interface symmetry with the
    training data and is not used by the solve (fluxes everywhere come from
    the trained edge maps).  Non-convergence is never silent: the best
    iterate is returned with ``converged=False`` and its residual.
    """
    del flux_obs
    opts = options or NewtonOptions()
    p = _predictor(model)
    g = p.graph
    boundary = np.asarray(boundary, dtype=float)
    if boundary.ndim == 1:
        boundary = boundary[:, None]
    if boundary.shape[0] != g.num_observed_vertices:
        raise ValidationError(
            f"boundary has {boundary.shape[0]} rows, expected "
            f"{g.num_observed_vertices} observed vertices"
        )
    n_cols = boundary.shape[1]
    v_un = g.num_unobserved_vertices
    local = np.full(g.num_vertices, -1, dtype=int)
    local[g.unobserved_vertices] = np.arange(v_un)

    u_full = np.zeros((g.num_vertices, n_cols))
    flux_full = np.zeros((g.num_edges, n_cols))
    iters = np.zeros(n_cols, dtype=int)
    residuals = np.zeros(n_cols)
    converged = np.zeros(n_cols, dtype=bool)
    singular = np.zeros(n_cols, dtype=bool)
    restarts_used = np.zeros(n_cols, dtype=int)

    rng = np.random.default_rng(opts.seed)
    for j in range(n_cols):
        col = boundary[:, j]
        u, flux, info = _solve_column(p, model.encoding, col, opts, rng, local, v_un)
        u_full[:, j] = u
        flux_full[:, j] = flux
        iters[j] = info["iters"]
        residuals[j] = info["residual"]
        converged[j] = info["converged"]
        singular[j] = info["singular"]
        restarts_used[j] = info["restarts"]
    return InferenceResult(
        u_full=u_full,
        flux_full=flux_full,
        newton_iters=iters,
        residual_norm=residuals,
        converged=converged,
        jacobian_singular=singular,
        restarts_used=restarts_used,
    )


def _initial_guess(
    p: "_Predictor",
    col: np.ndarray,
    policy: str,
    rng: np.random.Generator,
) -> np.ndarray:
    model = p.model
    g = model.graph
    if g.num_unobserved_vertices == 0:
        return np.zeros(0)
    if policy == "informed" and p.slope_weights is not None:
        u_full, _ = poisson_oracle(g, p.slope_weights, col)
        return u_full[g.unobserved_vertices, 0]
    if policy in ("informed", "nearest") and model.u_un_hat.size and model.boundary_values.size:
        # Interior state of the training column with the closest boundary.
        dists = np.linalg.norm(model.boundary_values - col[:, None], axis=0)
        return model.u_un_hat[:, int(np.argmin(dists))].copy()
    if policy in ("informed", "nearest", "harmonic"):
        u_full, _ = poisson_oracle(g, np.ones(g.num_edges), col)
        return u_full[g.unobserved_vertices, 0]
    if policy == "mean":
        return np.full(g.num_unobserved_vertices, float(col.mean()))
    lo, hi = float(col.min()), float(col.max())
    return lo + (hi - lo) * rng.random(g.num_unobserved_vertices)


_RESTART_LADDER = ("informed", "nearest", "harmonic")


def _solve_column(p, encoding, col, opts, rng, local, v_un):
    best = None
    ladder = [opts.init] + [pol for pol in _RESTART_LADDER if pol != opts.init]
    for attempt in range(opts.restarts + 1):
        policy = ladder[attempt] if attempt < len(ladder) else "uniform"
        u_un = _initial_guess(p, col, policy, rng)
        outcome = _newton(p, encoding, col, u_un, opts, local, v_un)
        outcome["restarts"] = attempt
        if best is None or outcome["residual"] < best["residual"]:
            best = outcome
        if outcome["converged"]:
            break
    return best["u"], best["flux"], best


def _newton(p, encoding, col, u_un, opts, local, v_un):
    g = p.graph
    u = np.zeros(g.num_vertices)
    u[g.observed_vertices] = col
    box_hi = float(col.max())

    def apply_box(vec):
        return np.clip(vec, 0.0, box_hi) if opts.box else vec

    u_un = apply_box(u_un)
    u[g.unobserved_vertices] = u_un

    def residual_of(u_vec):
        flux = _edge_fluxes(p, u_vec, encoding)
        res = graph_divergence(g, flux)[g.unobserved_vertices]
        return flux, res

    flux, res = residual_of(u)
    res_norm = float(np.max(np.abs(res))) if res.size else 0.0
    singular = False
    it = 0
    for it in range(opts.max_iter + 1):
        scale = max(1.0, float(np.max(np.abs(flux)))) if opts.scaled_tol else 1.0
        if res_norm <= opts.tol * scale or v_un == 0:
            return {
                "u": u, "flux": flux, "iters": it, "residual": res_norm,
                "converged": True, "singular": singular,
            }
        if it == opts.max_iter:
            break
        jac = _jacobian(p, u, encoding, local, v_un)
        step = None
        if np.all(np.isfinite(jac)):
            try:
                if np.linalg.cond(jac) < 1e12:
                    step = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError:
                step = None
        if step is None or not np.all(np.isfinite(step)):
            singular = True
            step = np.linalg.pinv(jac, rcond=1e-10) @ (-res)

        # Backtracking on the residual norm.
        t = 1.0
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            u_try = u.copy()
            u_try[g.unobserved_vertices] = apply_box(
                u[g.unobserved_vertices] + t * step
            )
            flux_try, res_try = residual_of(u_try)
            res_try_norm = float(np.max(np.abs(res_try))) if res_try.size else 0.0
            if res_try_norm < res_norm:
                u, flux, res, res_norm = u_try, flux_try, res_try, res_try_norm
                accepted = True
                break
            t *= opts.damping_factor
        if not accepted:
            break  # stalled; caller may restart
    return {
        "u": u, "flux": flux, "iters": it, "residual": res_norm,
        "converged": False, "singular": singular,
    }


def d2n_evaluate(
    model: TrainedSurrogate,
    boundary: np.ndarray,
    options: NewtonOptions | None = None,
) -> InferenceResult:
    """Boundary potentials in, fluxes on every edge out (the learned map)."""
    return infer_potentials(model, boundary, options=options)


def predict_with_bounds(
    model: TrainedSurrogate,
    boundary: np.ndarray,
    delta: float = 0.05,
    options: NewtonOptions | None = None,
    rkhs_safety: float = 1.0,
):
    """Batched prediction table: per edge and test column, the posterior mean,
    standard deviation, weight-vector norm, and pointwise bound.

    Returns ``(result, means, sigmas, phi_norms, bounds)`` where ``result`` is
    the :class:`InferenceResult` and the arrays have shape (E, n_columns).
    """
    if not (0 < delta < 1):
        raise ValidationError(f"delta must lie in (0, 1), got {delta}")
    p = _predictor(model)
    g = p.graph
    result = infer_potentials(model, boundary, options=options)
    n_cols = result.n_columns
    means = np.zeros((g.num_edges, n_cols))
    sigmas = np.zeros((g.num_edges, n_cols))
    phi_norms = np.zeros((g.num_edges, n_cols))
    bounds = np.zeros((g.num_edges, n_cols))
    tail = math.sqrt(2.0 * math.log(2.0 / delta))
    noise_std = math.sqrt(p.noise_variance)
    for e, (a, b) in enumerate(g.edges):
        pred = p.edges[e]
        if model.encoding == "gradient":
            queries = (result.u_full[b] - result.u_full[a])[:, None]
        else:
            queries = np.column_stack([result.u_full[a], result.u_full[b]])
        kq = pred.cross(queries)  # (n_cols, N)
        means[e] = kq @ pred.alpha
        phi = pred.factor.solve(kq.T)  # (N, n_cols)
        var = np.maximum(1.0 - np.einsum("mn,nm->m", kq, phi), 0.0)
        sigmas[e] = np.sqrt(var)
        phi_norms[e] = np.linalg.norm(phi, axis=0)
        rkhs = rkhs_safety * math.sqrt(pred.rkhs_sq)
        bounds[e] = sigmas[e] * rkhs + noise_std * phi_norms[e] * tail
    # The fluxes reported by the root solve are exactly these means; keep the
    # conservation-consistent copy.
    return result, means, sigmas, phi_norms, bounds
