"""Command-line front end: generate, train, predict, evaluate.

Exit codes: 0 success, 1 numerical failure, 2 usage/config error.

BLAS thread pools read their environment at import time, so the thread limit
(``--threads`` or ``CONSERV_GP_THREADS``) is applied here before any
numerical module loads; ``--threads 1`` is the bit-reproducibility mode.
"""

from __future__ import annotations

import os
import sys
import time
from pathlib import Path


def _requested_threads() -> str | None:
    argv = sys.argv[1:]
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--threads="):
            return arg.split("=", 1)[1]
    return os.environ.get("CONSERV_GP_THREADS")


def _pin_threads() -> None:
    n = _requested_threads()
    if not n:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)


_pin_threads()

import click

from . import __version__
from .errors import NumericalError, SchemaError, ValidationError

EXIT_NUMERICAL = 1
EXIT_CONFIG = 2

PRESETS = {
    "toy-series": dict(kind="toy_series", n_vertices=4),
    "resistor-network": dict(
        kind="resistor_network", n_vertices=20, extra_edges=3, boundary_fraction=0.3
    ),
    # Size preset: 107 vertices / 130 edges (17 boundary, 24 interior chords).
    "resistor-107": dict(
        kind="resistor_network", n_vertices=107, extra_edges=24,
        boundary_fraction=17 / 107,
    ),
}


def _guarded(fn):
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (SchemaError, ValidationError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


def _write_manifest(out_dir: Path, command: str, config: dict, timings: dict,
                    seed=None, dataset_fingerprint=None, model_fingerprint=None,
                    warnings_count: int = 0) -> None:
    from .runio import write_json

    payload = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "dataset_fingerprint": dataset_fingerprint,
        "model_fingerprint": model_fingerprint,
        "tool_version": __version__,
        "timings_s": {k: round(v, 6) for k, v in timings.items()},
        "warnings": warnings_count,
    }
    write_json(out_dir / "manifest.json", payload)


@click.group()
@click.version_option(version=__version__, prog_name="conservgp")
def main():
    """Conservation-constrained GP flux surrogates on directed graphs."""


@main.command()
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="toy-series",
              show_default=True, help="Topology/size preset.")
@click.option("--samples", type=int, default=10, show_default=True,
              help="Number of training columns.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--vertices", type=int, default=None, help="Override preset vertex count.")
@click.option("--extra-edges", type=int, default=None, help="Override preset chord count.")
@click.option("--boundary-fraction", type=float, default=None)
@click.option("--boundary-sampling", type=click.Choice(["gaussian", "uniform_range"]),
              default="gaussian", show_default=True)
@click.option("--boundary-std", type=float, default=1.0, show_default=True,
              help="Std of the centered Gaussian boundary draws.")
@click.option("--noise-std", type=float, default=0.0, show_default=True,
              help="Additive observation noise.")
@click.option("--encoding", type=click.Choice(["gradient", "endpoints"]),
              default="gradient", show_default=True)
@click.option("--resample-of", type=click.Path(exists=True, dir_okay=False),
              default=None,
              help="Draw fresh boundary columns on an existing dataset's graph.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
              help="Output directory for dataset.json + manifest.json.")
@_guarded
def generate(preset, samples, seed, vertices, extra_edges, boundary_fraction,
             boundary_sampling, boundary_std, noise_std, encoding, resample_of, out_dir):
    """Generate a synthetic dataset with exact conservation ground truth."""
    from . import datasets
    from .runio import write_json

    t0 = time.perf_counter()
    out = Path(out_dir)
    if resample_of:
        base = datasets.load_dataset(resample_of)
        ds = datasets.resample(base, n_samples=samples, seed=seed)
        config = {"resample_of": str(resample_of), "samples": samples, "seed": seed}
    else:
        kwargs = dict(PRESETS[preset])
        if vertices is not None:
            kwargs["n_vertices"] = vertices
        if extra_edges is not None:
            kwargs["extra_edges"] = extra_edges
        if boundary_fraction is not None:
            kwargs["boundary_fraction"] = boundary_fraction
        cfg = datasets.GeneratorConfig(
            n_samples=samples, seed=seed, boundary_sampling=boundary_sampling,
            boundary_std=boundary_std, noise_std=noise_std, encoding=encoding,
            **kwargs,
        )
        ds = datasets.generate(cfg)
        config = {"preset": preset, **{k: str(v) for k, v in kwargs.items()},
                  "samples": samples, "seed": seed, "noise_std": noise_std,
                  "boundary_sampling": boundary_sampling, "boundary_std": boundary_std,
                  "encoding": encoding}
    datasets.save_dataset(ds, out / "dataset.json")
    _write_manifest(
        out, "generate", config, {"generate": time.perf_counter() - t0},
        seed=seed, dataset_fingerprint=ds.fingerprint(),
    )
    click.echo(f"dataset: {out / 'dataset.json'} "
               f"(V={ds.graph.num_vertices}, E={ds.graph.num_edges}, "
               f"N={ds.observations.n_data})")


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Training dataset (conserv-gp-data/v1).")
@click.option("--encoding", type=click.Choice(["gradient", "endpoints"]), default=None,
              help="Kernel input encoding; defaults to the dataset's declaration.")
@click.option("--epochs", type=int, default=200_000, show_default=True)
@click.option("--lr0", type=float, default=1e-3, show_default=True)
@click.option("--decay-factor", type=float, default=0.98, show_default=True)
@click.option("--decay-every", type=int, default=10_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--noise-init", type=float, default=-20.0, show_default=True,
              help="Initial log noise variance.")
@click.option("--tol", type=float, default=1e-9, show_default=True,
              help="Relative loss-change early-stop tolerance over 1000 epochs "
                   "(0 disables).")
@click.option("--threads", type=int, default=None,
              help="BLAS thread cap; 1 gives bit-reproducible runs.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_guarded
def train(data_path, encoding, epochs, lr0, decay_factor, decay_every, seed,
          noise_init, tol, threads, out_dir):
    """Train the surrogate and persist the best checkpoint."""
    from . import datasets, trainer
    from .runio import write_csv

    out = Path(out_dir)
    t0 = time.perf_counter()
    ds = datasets.load_dataset(data_path)
    if encoding is not None:
        ds.encoding = encoding
    config = trainer.TrainConfig(
        epochs=epochs, lr0=lr0, decay_factor=decay_factor, decay_every=decay_every,
        seed=seed, log_noise_init=noise_init,
        convergence_tol=tol if tol > 0 else None,
    )
    load_time = time.perf_counter() - t0
    t1 = time.perf_counter()
    model = trainer.train_dataset(ds, config)
    train_time = time.perf_counter() - t1

    trainer.save_model(model, out / "model.json")
    write_csv(
        out / "loss_trace.csv",
        ["epoch", "total"],
        zip(model.loss_trace_epochs, model.loss_trace),
    )
    _write_manifest(
        out, "train",
        {"data": str(data_path), "encoding": ds.encoding,
         "epochs": epochs, "lr0": lr0, "decay_factor": decay_factor,
         "decay_every": decay_every, "noise_init": noise_init, "tol": tol,
         "threads": threads},
        {"load": load_time, "train": train_time},
        seed=seed,
        dataset_fingerprint=model.dataset_fingerprint,
        model_fingerprint=trainer.model_fingerprint(model),
    )
    d = model.diagnostics
    click.echo(
        f"model: {out / 'model.json'} (best loss {d['best_loss']:.6g} "
        f"at epoch {d['best_epoch']}, {d['epochs_run']} epochs, {d['stop_reason']})"
    )


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--boundary", "boundary_path", type=click.Path(exists=True, dir_okay=False),
              required=True,
              help="Dataset file supplying boundary potentials (u_obs block).")
@click.option("--delta", type=float, default=0.05, show_default=True,
              help="Bound confidence parameter (0.05 = 95% confidence).")
@click.option("--max-iter", type=int, default=100, show_default=True)
@click.option("--newton-tol", type=float, default=1e-10, show_default=True)
@click.option("--box/--no-box", default=False, show_default=True,
              help="Project interior potentials into [0, max boundary].")
@click.option("--restarts", type=int, default=5, show_default=True)
@click.option("--rkhs-safety", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_guarded
def predict(model_path, boundary_path, delta, max_iter, newton_tol, box, restarts,
            rkhs_safety, seed, threads, out_dir):
    """Predict fluxes with uncertainty for new boundary potentials."""
    from . import datasets, inference, trainer
    from .runio import write_csv

    out = Path(out_dir)
    t0 = time.perf_counter()
    model = trainer.load_model(model_path)
    boundary_ds = datasets.load_dataset(boundary_path)
    if boundary_ds.graph.topology_payload() != model.graph.topology_payload():
        raise ValidationError("boundary file topology differs from the trained model's")
    options = inference.NewtonOptions(
        max_iter=max_iter, tol=newton_tol, box=box, restarts=restarts, seed=seed
    )
    result, means, sigmas, phi_norms, bounds = inference.predict_with_bounds(
        model, boundary_ds.observations.u_obs, delta=delta, options=options,
        rkhs_safety=rkhs_safety,
    )
    infer_time = time.perf_counter() - t0

    rows = []
    for j in range(result.n_columns):
        for e in range(model.graph.num_edges):
            rows.append((
                j, e, means[e, j], sigmas[e, j], phi_norms[e, j], bounds[e, j],
                bool(result.converged[j]),
            ))
    write_csv(
        out / "predictions.csv",
        ["column", "edge", "mean", "sigma", "phi_norm", "pointwise_bound", "converged"],
        rows,
    )
    write_csv(
        out / "potentials.csv",
        ["column", "vertex", "value"],
        (
            (j, v, result.u_full[v, j])
            for j in range(result.n_columns)
            for v in range(model.graph.num_vertices)
        ),
    )
    n_warn = int((~result.converged).sum())
    _write_manifest(
        out, "predict",
        {"model": str(model_path), "boundary": str(boundary_path), "delta": delta,
         "max_iter": max_iter, "newton_tol": newton_tol, "box": box,
         "restarts": restarts, "rkhs_safety": rkhs_safety, "threads": threads},
        {"predict": infer_time},
        seed=seed,
        dataset_fingerprint=boundary_ds.fingerprint(),
        model_fingerprint=trainer.model_fingerprint(model),
        warnings_count=n_warn,
    )
    msg = f"predictions: {out / 'predictions.csv'} ({result.n_columns} columns)"
    if n_warn:
        msg += f"; warning: {n_warn} non-converged columns"
    click.echo(msg)


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False),
              required=True,
              help="Reference dataset (training file); supplies the graph, "
                   "conductances, and sampling policy.")
@click.option("--test-data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Explicit test dataset; otherwise fresh columns are drawn.")
@click.option("--test-columns", type=int, default=500, show_default=True)
@click.option("--test-seed", type=int, default=1234, show_default=True)
@click.option("--delta", type=float, default=0.05, show_default=True)
@click.option("--rkhs-safety", type=float, default=1.0, show_default=True)
@click.option("--box/--no-box", default=False, show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="Render PNG figures alongside the CSV tables.")
@click.option("--bench-epochs", is_flag=True, default=False,
              help="Instead of accuracy evaluation, time training epochs for "
                   "N_data in {5,10,20,40} and fit the scaling exponent.")
@click.option("--threads", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_guarded
def evaluate(model_path, data_path, test_data, test_columns, test_seed, delta,
             rkhs_safety, box, figures, bench_epochs, threads, out_dir):
    """Score a trained model: MSE, conservation, bound coverage, histogram data."""
    from . import datasets, evaluation, trainer
    from .runio import write_csv, write_json

    import numpy as np

    out = Path(out_dir)
    t0 = time.perf_counter()
    ds = datasets.load_dataset(data_path)

    if bench_epochs:
        base = datasets.GeneratorConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in (ds.generator or {}).items()
        }) if ds.generator else datasets.GeneratorConfig()
        points, exponent = evaluation.bench_per_epoch(base)
        write_csv(
            out / "bench.csv",
            ["n_data", "seconds_per_epoch"],
            ((p.n_data, p.seconds_per_epoch) for p in points),
        )
        write_json(out / "metrics.json", {
            "mode": "bench-epochs",
            "scaling_exponent": exponent,
            "points": [
                {"n_data": p.n_data, "seconds_per_epoch": p.seconds_per_epoch}
                for p in points
            ],
        })
        if figures:
            from . import figures as figmod

            figmod.render_bench(points, exponent, out / "bench.png")
        _write_manifest(
            out, "evaluate",
            {"mode": "bench-epochs", "data": str(data_path), "threads": threads},
            {"bench": time.perf_counter() - t0},
            seed=test_seed,
        )
        click.echo(f"bench: scaling exponent {exponent:.3f} -> {out / 'bench.csv'}")
        return

    from . import inference

    model = trainer.load_model(model_path)
    if test_data:
        test_ds = datasets.load_dataset(test_data)
    else:
        test_ds = datasets.resample(ds, n_samples=test_columns, seed=test_seed)
    options = inference.NewtonOptions(box=box, seed=test_seed)
    report = evaluation.evaluate_model(
        model, test_ds, delta=delta, options=options, rkhs_safety=rkhs_safety
    )
    eval_time = time.perf_counter() - t0

    write_csv(
        out / "per_edge_mse.csv",
        ["edge", "observed", "mse", "rel_l2"],
        (
            (e, bool(model.graph.edge_observed[e]), report.edge_mse[e],
             report.edge_rel_l2[e])
            for e in range(model.graph.num_edges)
        ),
    )
    write_csv(
        out / "conservation.csv",
        ["column", "scaled_residual", "converged"],
        (
            (j, report.conservation_scaled[j], bool(report.converged[j]))
            for j in range(report.n_columns)
        ),
    )
    write_csv(
        out / "ratios.csv",
        ["edge", "column", "abs_error", "bound", "log2_ratio"],
        zip(report.ratio_edges, report.ratio_columns, report.ratio_abs_error,
            report.ratio_bound, report.log2_ratios),
    )
    finite = report.log2_ratios[np.isfinite(report.log2_ratios)]
    if finite.size:
        counts, edges_ = np.histogram(finite, bins=40)
        write_csv(
            out / "histogram.csv",
            ["bin_left", "bin_right", "count"],
            ((edges_[i], edges_[i + 1], int(counts[i])) for i in range(len(counts))),
        )
    metrics = {
        "delta": delta,
        "test_columns": report.n_columns,
        "observed_rel_l2": report.observed_rel_l2,
        "exceedance_fraction": report.exceedance_fraction,
        "median_log2_ratio": report.median_log2_ratio,
        "max_scaled_conservation_residual": float(report.conservation_scaled.max())
        if report.conservation_scaled.size else 0.0,
        "converged_fraction": float(report.converged.mean()),
    }
    write_json(out / "metrics.json", metrics)

    if figures:
        from . import figures as figmod

        figmod.render_log2_histogram(report.log2_ratios, out / "histogram.png")
        first_obs = int(model.graph.observed_edges[0])
        if model.encoding == "gradient":
            a, b = model.graph.edges[first_obs]
            test_inputs = report.result.u_full[b] - report.result.u_full[a]
            truth = (report.truth_flux[first_obs]
                     if report.truth_flux is not None else None)
            figmod.render_d2n_band(
                model, first_obs, out / f"d2n_edge{first_obs}.png", delta=delta,
                test_inputs=test_inputs,
                test_predictions=report.means[first_obs],
                test_truth=truth,
            )
    _write_manifest(
        out, "evaluate",
        {"model": str(model_path), "data": str(data_path),
         "test_data": str(test_data) if test_data else None,
         "test_columns": test_columns, "delta": delta,
         "rkhs_safety": rkhs_safety, "box": box, "threads": threads},
        {"evaluate": eval_time},
        seed=test_seed,
        dataset_fingerprint=test_ds.fingerprint(),
        model_fingerprint=trainer.model_fingerprint(model),
        warnings_count=int((~report.converged).sum()),
    )
    click.echo(
        f"evaluate: rel_l2={report.observed_rel_l2:.4g} "
        f"exceedance={report.exceedance_fraction:.4g} "
        f"median_log2={report.median_log2_ratio:.3g} -> {out / 'metrics.json'}"
    )


if __name__ == "__main__":
    main()
