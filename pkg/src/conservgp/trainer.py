"""Full-batch first-order training loop with step-decayed Adam.

Optimizes the reduced objective over ``(log ell_e, log sigma2, u_un)``.
Length scales start at the log of the median pairwise distance between each
edge's encoded training inputs, the noise variance at ``exp(-20)``, and the
interior potentials uniformly inside the observed boundary range per data
column.  The best-loss checkpoint is retained, so a run never returns worse
parameters than it visited.  Runs are bit-reproducible for a fixed seed and
thread count 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .datasets import Dataset, ObservationSet, poisson_oracle
from .errors import NumericalError, SchemaError, ValidationError
from .graph import DirectedGraph, build_graph
from .kernel import ENCODINGS, EdgeModel, NoiseModel
from .objective import HyperParams, LossBreakdown, full_vertex_values, loss_and_gradient
from .runio import decode_matrix, encode_matrix, fingerprint, read_json, write_json
from .solver import assemble_kkt, edge_inputs, solve_flux

MODEL_SCHEMA = "conserv-gp/v1"

LOG_LENGTHSCALE_BOUNDS = (-30.0, 30.0)


@dataclass
class TrainConfig:
    epochs: int = 200_000
    lr0: float = 1e-3
    decay_factor: float = 0.98
    decay_every: int = 10_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_noise_init: float = -20.0
    convergence_tol: float | None = 1e-9
    convergence_window: int = 1000
    checkpoint_every: int = 1000
    trace_every: int = 10
    u_init: str = "informed"  # informed | harmonic | uniform

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ValidationError("lr0 must be positive")
        if not (0 < self.decay_factor <= 1):
            raise ValidationError("decay_factor must be in (0, 1]")
        if self.u_init not in ("informed", "harmonic", "uniform"):
            raise ValidationError(f"unknown u_init policy {self.u_init!r}")

    def learning_rate(self, epoch: int) -> float:
        return self.lr0 * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class TrainedSurrogate:
    """Trained per-edge GPs plus the inferred interior potentials."""

    graph: DirectedGraph
    encoding: str
    edges: list[EdgeModel]
    noise: NoiseModel
    u_un_hat: np.ndarray
    boundary_values: np.ndarray
    loss_trace_epochs: np.ndarray
    loss_trace: np.ndarray
    config: TrainConfig
    dataset_fingerprint: str = ""
    diagnostics: dict = field(default_factory=dict)
    _predictor_cache: object = field(default=None, repr=False, compare=False)

    @property
    def hyperparams(self) -> HyperParams:
        return HyperParams(
            log_lengthscales=np.array([m.log_lengthscale for m in self.edges]),
            log_noise_variance=self.noise.log_noise_variance,
        )

    @property
    def n_data(self) -> int:
        return self.edges[0].training_inputs.shape[0]


def init_params(
    g: DirectedGraph,
    obs: ObservationSet,
    config: TrainConfig,
    encoding: str = "gradient",
) -> tuple[HyperParams, np.ndarray]:
    """Median-distance length scales, exp(log_noise_init) noise, u_un guess.

    The interior-potential guess matters: a start where each edge's cached
    inputs are inconsistent with its fluxes blows the misfit term up by
    1/noise_variance and drives the length scales into a spiky local basin
    the optimizer cannot leave.  Policies:

    - ``informed`` (default): fit the best linear conservative network to the
      observed boundary data (least squares over log edge weights with a
      Dirichlet solve inside) and take its interior potentials.  This makes
      every edge's data functionally consistent at epoch 0; the interior
      values are an equivalent-network representation, not a claim about the
      unobservable truth.
    - ``harmonic``: unit-weight Dirichlet interpolation of the boundary.
    - ``uniform``: seeded uniform draws inside each column's observed range.

    Length scales fall back to 1 (with a warning) when fewer than two
    distinct inputs exist on an edge.
    """
    obs.validate_against(g)
    rng = np.random.default_rng(config.seed)
    n = obs.n_data
    v_un = g.num_unobserved_vertices
    u_un0 = np.zeros((v_un, n))
    if v_un and config.u_init == "informed":
        u_full0, _ = fit_linear_network(g, obs)
        u_un0 = u_full0[g.unobserved_vertices]
    elif v_un and config.u_init == "harmonic":
        u_harm, _ = poisson_oracle(g, np.ones(g.num_edges), obs.u_obs)
        u_un0 = u_harm[g.unobserved_vertices]
    elif v_un:
        lo = obs.u_obs.min(axis=0)
        hi = obs.u_obs.max(axis=0)
        u_un0 = lo + (hi - lo) * rng.random((v_un, n))

    u_full = full_vertex_values(g, obs.u_obs, u_un0)
    inputs = edge_inputs(g, u_full, encoding)
    log_ells = np.zeros(g.num_edges)
    for e, x in enumerate(inputs):
        log_ells[e] = _median_log_lengthscale(x, edge=e)
    params = HyperParams(
        log_lengthscales=log_ells,
        log_noise_variance=float(config.log_noise_init),
    )
    return params, u_un0


def fit_linear_network(
    g: DirectedGraph, obs: ObservationSet, max_nfev: int = 60
) -> tuple[np.ndarray, np.ndarray]:
    """Boundary-equivalent linear network fit for the informed initial guess.

    Minimizes the observed-edge flux residuals of a weighted Dirichlet solve
    over log edge weights.  The fit reproduces the boundary data of linear
    ground truth essentially exactly; interior weights along cycles are not
    identifiable from boundary data and land on an equivalent configuration.
    Returns ``(u_full, weights)``; falls back to the unit-weight solve if the
    optimizer cannot improve on it.
    """
    def residuals(theta):
        weights = np.exp(np.clip(theta, -12.0, 12.0))
        u_full, flux = poisson_oracle(g, weights, obs.u_obs)
        return (flux[g.observed_edges] - obs.flux_obs).ravel()

    x0 = np.zeros(g.num_edges)
    try:
        fit = least_squares(residuals, x0, method="trf", max_nfev=max_nfev)
        theta = fit.x if fit.cost <= 0.5 * float(residuals(x0) @ residuals(x0)) else x0
    except (np.linalg.LinAlgError, NumericalError):
        theta = x0
    weights = np.exp(np.clip(theta, -12.0, 12.0))
    u_full, _ = poisson_oracle(g, weights, obs.u_obs)
    return u_full, weights


def _median_log_lengthscale(x: np.ndarray, edge: int) -> float:
    n = x.shape[0]
    if n < 2:
        warnings.warn(
            f"edge {edge}: fewer than 2 training inputs, falling back to lengthscale 1"
        )
        return 0.0
    diffs = x[:, None, :] - x[None, :, :]
    dists = np.sqrt(np.einsum("ijk,ijk->ij", diffs, diffs))
    med = float(np.median(dists[np.triu_indices(n, k=1)]))
    # Numerically-zero spreads (a dead edge in the initial guess) must not
    # produce a collapsed length scale the optimizer can never lift again.
    if med <= 1e-12 * (1.0 + float(np.max(np.abs(x)))):
        warnings.warn(
            f"edge {edge}: zero median pairwise distance, falling back to lengthscale 1"
        )
        return 0.0
    return float(np.log(med))


def train(
    g: DirectedGraph,
    obs: ObservationSet,
    config: TrainConfig | None = None,
    encoding: str = "gradient",
    dataset_fingerprint: str = "",
) -> TrainedSurrogate:
    """Run Adam to convergence (or the epoch budget) and return the best
    checkpoint.

    Raises :class:`NumericalError` carrying the epoch index and a parameter
    snapshot if the loss ever goes non-finite.
    """
    config = config or TrainConfig()
    params, u_un = init_params(g, obs, config, encoding)
    n = obs.n_data
    v_un = g.num_unobserved_vertices
    n_edges = g.num_edges

    p = np.concatenate(
        [params.log_lengthscales, [params.log_noise_variance], u_un.ravel()]
    )
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    lo, hi = LOG_LENGTHSCALE_BOUNDS

    def unpack(vec: np.ndarray) -> tuple[HyperParams, np.ndarray]:
        hp = HyperParams(
            log_lengthscales=vec[:n_edges],
            log_noise_variance=float(vec[n_edges]),
        )
        return hp, vec[n_edges + 1 :].reshape(v_un, n)

    best_total = np.inf
    best_epoch = -1
    best_p = p.copy()
    trace_epochs: list[int] = []
    trace_totals: list[float] = []
    history = np.empty(config.epochs)
    clamp_events = 0
    jitter_events = 0
    stop_reason = "epoch_budget"
    epoch = 0

    for epoch in range(config.epochs):
        hp, uu = unpack(p)
        try:
            breakdown, grad = loss_and_gradient(g, hp, uu, obs, encoding)
        except NumericalError as exc:
            exc.context.update(epoch=epoch, parameters=p.copy())
            raise
        total = breakdown.total
        history[epoch] = total
        jitter_events += breakdown.jitter_events
        if epoch % config.trace_every == 0:
            trace_epochs.append(epoch)
            trace_totals.append(total)
        if total < best_total:
            best_total = total
            best_epoch = epoch
            best_p = p.copy()
        if epoch % config.checkpoint_every == 0:
            if not np.all(np.isfinite(p)):
                raise NumericalError(
                    "non-finite parameters", context={"epoch": epoch, "parameters": p.copy()}
                )

        gvec = np.concatenate(
            [grad.log_lengthscales, [grad.log_noise_variance], grad.u_un.ravel()]
        )
        lr = config.learning_rate(epoch)
        m = config.adam_beta1 * m + (1 - config.adam_beta1) * gvec
        v = config.adam_beta2 * v + (1 - config.adam_beta2) * gvec * gvec
        m_hat = m / (1 - config.adam_beta1 ** (epoch + 1))
        v_hat = v / (1 - config.adam_beta2 ** (epoch + 1))
        p = p - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        clipped = np.clip(p[:n_edges], lo, hi)
        if not np.array_equal(clipped, p[:n_edges]):
            clamp_events += 1
            p[:n_edges] = clipped

        if (
            config.convergence_tol is not None
            and epoch >= config.convergence_window
            and epoch % config.convergence_window == 0
        ):
            prev = history[epoch - config.convergence_window]
            if abs(total - prev) <= config.convergence_tol * max(1.0, abs(prev)):
                stop_reason = "converged"
                break

    hp_best, uu_best = unpack(best_p)
    final = loss_and_gradient(g, hp_best, uu_best, obs, encoding)[0]
    trace_epochs.append(best_epoch)
    trace_totals.append(best_total)

    diagnostics = {
        "best_epoch": int(best_epoch),
        "best_loss": float(best_total),
        "final_breakdown": {
            "data_fit_observed": final.data_fit_observed,
            "data_fit_constrained": final.data_fit_constrained,
            "complexity": final.complexity,
            "total": final.total,
        },
        "epochs_run": int(epoch + 1),
        "stop_reason": stop_reason,
        "clamp_events": int(clamp_events),
        "jitter_events": int(jitter_events),
        "singular_schur": bool(final.singular_schur),
    }
    return _finalize(
        g, obs, encoding, hp_best, uu_best, config,
        np.array(trace_epochs), np.array(trace_totals),
        dataset_fingerprint, diagnostics,
    )


def _finalize(
    g, obs, encoding, params, u_un, config, trace_epochs, trace_totals,
    dataset_fingerprint, diagnostics,
) -> TrainedSurrogate:
    # Edge targets: observed edges keep their data, unobserved edges carry the
    # conservation-constrained closed-form fluxes at the optimum.
    u_full = full_vertex_values(g, obs.u_obs, u_un)
    inputs = edge_inputs(g, u_full, encoding)
    noise = NoiseModel(log_noise_variance=params.log_noise_variance)
    edge_models = [
        EdgeModel(
            log_lengthscale=float(params.log_lengthscales[e]),
            encoding=encoding,
            training_inputs=inputs[e],
        )
        for e in range(g.num_edges)
    ]
    assembly = assemble_kkt(g, edge_models, noise, u_full, obs.flux_obs)
    solution = solve_flux(assembly)
    diagnostics["singular_schur"] = bool(
        diagnostics.get("singular_schur") or solution.singular_schur
    )
    obs_row = {int(e): i for i, e in enumerate(g.observed_edges)}
    un_row = {int(e): i for i, e in enumerate(g.unobserved_edges)}
    for e, model in enumerate(edge_models):
        if e in obs_row:
            model.training_targets = obs.flux_obs[obs_row[e]].copy()
        else:
            model.training_targets = solution.flux_un[un_row[e]].copy()
    return TrainedSurrogate(
        graph=g,
        encoding=encoding,
        edges=edge_models,
        noise=noise,
        u_un_hat=u_un.copy(),
        boundary_values=np.asarray(obs.u_obs, dtype=float).copy(),
        loss_trace_epochs=trace_epochs,
        loss_trace=trace_totals,
        config=config,
        dataset_fingerprint=dataset_fingerprint,
        diagnostics=diagnostics,
    )


def train_dataset(ds: Dataset, config: TrainConfig | None = None) -> TrainedSurrogate:
    """Train straight from a loaded dataset, recording its fingerprint."""
    return train(
        ds.graph,
        ds.observations,
        config=config,
        encoding=ds.encoding,
        dataset_fingerprint=ds.fingerprint(),
    )


def model_payload(model: TrainedSurrogate) -> dict:
    cfg = asdict(model.config)
    return {
        "schema": MODEL_SCHEMA,
        "encoding": model.encoding,
        "topology": model.graph.topology_payload(),
        "log_noise_variance": float(model.noise.log_noise_variance),
        "edge_models": [
            {
                "log_lengthscale": float(em.log_lengthscale),
                "inputs": encode_matrix(em.training_inputs),
                "targets": [float(t) for t in em.training_targets],
            }
            for em in model.edges
        ],
        "u_un_hat": encode_matrix(model.u_un_hat),
        "boundary_values": encode_matrix(model.boundary_values),
        "config": cfg,
        "dataset_fingerprint": model.dataset_fingerprint,
        "loss_trace": {
            "epochs": [int(e) for e in model.loss_trace_epochs],
            "totals": [float(t) for t in model.loss_trace],
        },
        "diagnostics": model.diagnostics,
    }


def save_model(model: TrainedSurrogate, path: Path | str) -> None:
    write_json(path, model_payload(model))


def model_fingerprint(model: TrainedSurrogate) -> str:
    return fingerprint(model_payload(model))


def load_model(path: Path | str) -> TrainedSurrogate:
    payload = read_json(path)
    if not isinstance(payload, dict) or payload.get("schema") != MODEL_SCHEMA:
        raise SchemaError(
            f"{path}: schema {payload.get('schema') if isinstance(payload, dict) else None!r}, "
            f"expected {MODEL_SCHEMA!r}"
        )
    topo = payload["topology"]
    num_vertices = int(topo["num_vertices"])
    edges = [tuple(int(v) for v in e) for e in topo["edges"]]
    observed_vertices = set(int(v) for v in topo["observed_vertices"])
    observed_edges = set(int(e) for e in topo["observed_edges"])
    g = build_graph(
        edges,
        vertex_observed=[v in observed_vertices for v in range(num_vertices)],
        edge_observed=[e in observed_edges for e in range(len(edges))],
    )
    encoding = payload["encoding"]
    if encoding not in ENCODINGS:
        raise SchemaError(f"{path}: unknown encoding {encoding!r}")
    edge_blocks = payload["edge_models"]
    if len(edge_blocks) != g.num_edges:
        raise SchemaError(
            f"{path}: {len(edge_blocks)} edge models for {g.num_edges} edges"
        )
    edge_models = []
    for e, blk in enumerate(edge_blocks):
        inputs = decode_matrix(blk["inputs"], name=f"edge {e} inputs")
        targets = np.asarray(blk["targets"], dtype=float)
        if targets.shape[0] != inputs.shape[0]:
            raise SchemaError(f"{path}: edge {e} targets/inputs length mismatch")
        edge_models.append(
            EdgeModel(
                log_lengthscale=float(blk["log_lengthscale"]),
                encoding=encoding,
                training_inputs=inputs,
                training_targets=targets,
            )
        )
    cfg_block = dict(payload.get("config", {}))
    config = TrainConfig(**cfg_block) if cfg_block else TrainConfig()
    trace = payload.get("loss_trace", {"epochs": [], "totals": []})
    return TrainedSurrogate(
        graph=g,
        encoding=encoding,
        edges=edge_models,
        noise=NoiseModel(log_noise_variance=float(payload["log_noise_variance"])),
        u_un_hat=decode_matrix(payload["u_un_hat"], name="u_un_hat"),
        boundary_values=decode_matrix(payload["boundary_values"], name="boundary_values"),
        loss_trace_epochs=np.asarray(trace["epochs"], dtype=int),
        loss_trace=np.asarray(trace["totals"], dtype=float),
        config=config,
        dataset_fingerprint=payload.get("dataset_fingerprint", ""),
        diagnostics=dict(payload.get("diagnostics", {})),
    )
