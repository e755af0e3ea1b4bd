"""Model evaluation against held-out boundary data, plus the per-epoch
timing probe.

The bound-calibration table compares realized errors to the pointwise bound
on the observed (boundary) edges: interior errors are measured too, but the
bounds there take inferred inputs as exact and are reported separately.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .datasets import Dataset, GeneratorConfig, generate
from .errors import ValidationError
from .graph import graph_divergence
from .inference import NewtonOptions, predict_with_bounds, InferenceResult
from .objective import loss_and_gradient
from .trainer import TrainConfig, TrainedSurrogate, init_params


@dataclass
class EvaluationReport:
    delta: float
    edge_mse: np.ndarray
    edge_rel_l2: np.ndarray
    observed_rel_l2: float
    conservation_scaled: np.ndarray
    converged: np.ndarray
    ratio_edges: np.ndarray
    ratio_columns: np.ndarray
    ratio_abs_error: np.ndarray
    ratio_bound: np.ndarray
    log2_ratios: np.ndarray
    exceedance_fraction: float
    median_log2_ratio: float
    means: np.ndarray
    sigmas: np.ndarray
    bounds: np.ndarray
    truth_flux: np.ndarray | None
    result: InferenceResult

    @property
    def n_columns(self) -> int:
        return self.means.shape[1]


def evaluate_model(
    model: TrainedSurrogate,
    test_ds: Dataset,
    delta: float = 0.05,
    options: NewtonOptions | None = None,
    rkhs_safety: float = 1.0,
) -> EvaluationReport:
    """Run inference on the test boundaries and score against ground truth."""
    if test_ds.graph.topology_payload() != model.graph.topology_payload():
        raise ValidationError("test dataset topology differs from the trained model's")
    g = model.graph
    boundary = test_ds.observations.u_obs
    result, means, sigmas, phi_norms, bounds = predict_with_bounds(
        model, boundary, delta=delta, options=options, rkhs_safety=rkhs_safety
    )
    n_cols = means.shape[1]

    if test_ds.ground_truth is not None:
        truth = test_ds.ground_truth.flux_full
    else:
        truth = np.full((g.num_edges, n_cols), np.nan)
        truth[g.observed_edges] = test_ds.observations.flux_obs

    errors = means - truth
    edge_mse = np.nanmean(errors**2, axis=1)
    denom = np.sqrt(np.nansum(truth**2, axis=1))
    num = np.sqrt(np.nansum(errors**2, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        edge_rel_l2 = np.where(denom > 0, num / denom, np.nan)

    obs_edges = g.observed_edges
    obs_err = errors[obs_edges]
    obs_truth = truth[obs_edges]
    denom_all = float(np.sqrt(np.nansum(obs_truth**2)))
    observed_rel_l2 = (
        float(np.sqrt(np.nansum(obs_err**2))) / denom_all if denom_all > 0 else np.nan
    )

    div = graph_divergence(g, result.flux_full)[g.unobserved_vertices]
    if div.size:
        per_col_res = np.max(np.abs(div), axis=0)
    else:
        per_col_res = np.zeros(n_cols)
    scale = np.maximum(1.0, np.max(np.abs(result.flux_full), axis=0))
    conservation_scaled = per_col_res / scale

    # Bound calibration on the observed edges.
    ratio_edges = np.repeat(obs_edges, n_cols)
    ratio_columns = np.tile(np.arange(n_cols), len(obs_edges))
    abs_err = np.abs(obs_err).reshape(-1)
    bnd = bounds[obs_edges].reshape(-1)
    valid = np.isfinite(abs_err) & (bnd > 0)
    with np.errstate(divide="ignore"):
        log2_ratios = np.where(valid, np.log2(np.maximum(abs_err, 1e-300) / np.where(bnd > 0, bnd, 1.0)), np.nan)
    exceed = abs_err > bnd
    exceedance = float(np.mean(exceed[valid])) if valid.any() else np.nan
    median_log2 = float(np.median(log2_ratios[valid])) if valid.any() else np.nan

    return EvaluationReport(
        delta=delta,
        edge_mse=edge_mse,
        edge_rel_l2=edge_rel_l2,
        observed_rel_l2=observed_rel_l2,
        conservation_scaled=conservation_scaled,
        converged=result.converged,
        ratio_edges=ratio_edges,
        ratio_columns=ratio_columns,
        ratio_abs_error=abs_err,
        ratio_bound=bnd,
        log2_ratios=log2_ratios,
        exceedance_fraction=exceedance,
        median_log2_ratio=median_log2,
        means=means,
        sigmas=sigmas,
        bounds=bounds,
        truth_flux=truth,
        result=result,
    )


@dataclass
class BenchPoint:
    n_data: int
    seconds_per_epoch: float


def bench_per_epoch(
    base: GeneratorConfig,
    n_list: tuple[int, ...] = (5, 10, 20, 40),
    epochs: int = 5,
    warmup: int = 2,
) -> tuple[list[BenchPoint], float]:
    """Per-epoch wall time of the training objective+gradient vs sample count.

    The topology is held fixed across sample counts (the generator draws it
    before the samples, so a shared seed pins it).  Returns the timing points
    and the log-log slope fitted across them.
    """
    points: list[BenchPoint] = []
    for n in n_list:
        cfg = replace(base, n_samples=int(n))
        ds = generate(cfg)
        params, u_un = init_params(
            ds.graph, ds.observations, TrainConfig(seed=cfg.seed), ds.encoding
        )
        for _ in range(warmup):
            loss_and_gradient(ds.graph, params, u_un, ds.observations, ds.encoding)
        t0 = time.perf_counter()
        for _ in range(epochs):
            loss_and_gradient(ds.graph, params, u_un, ds.observations, ds.encoding)
        dt = (time.perf_counter() - t0) / epochs
        points.append(BenchPoint(n_data=int(n), seconds_per_epoch=dt))
    xs = np.log([p.n_data for p in points])
    ys = np.log([p.seconds_per_epoch for p in points])
    exponent = float(np.polyfit(xs, ys, 1)[0])
    return points, exponent
