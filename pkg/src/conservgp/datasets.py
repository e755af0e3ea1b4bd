"""Synthetic conservation-law datasets and their on-disk format.

Ground truth comes from a weighted graph-Laplacian Dirichlet solve: boundary
potentials are prescribed, interior potentials satisfy exact conservation,
and the flux on edge (a, b) is ``conductance * (u[a] - u[b])`` -- positive
along the edge orientation when potential drops from source to target.  Note
the kernels elsewhere consume the opposite-signed quantity
``u[target] - u[source]``; keeping both conventions explicit here is what
prevents sign bugs downstream.

Datasets are stored as a single JSON document, schema tag
``conserv-gp-data/v1``, with column-major numeric blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import NumericalError, SchemaError, ValidationError
from .graph import DirectedGraph, build_graph, graph_divergence
from .kernel import ENCODINGS
from .runio import decode_matrix, encode_matrix, fingerprint, read_json, write_json

DATASET_SCHEMA = "conserv-gp-data/v1"

GENERATOR_KINDS = ("toy_series", "resistor_network")
BOUNDARY_SAMPLING = ("gaussian", "uniform_range")


@dataclass
class ObservationSet:
    """Observed vertex potentials (V_obs x N) and edge fluxes (E_obs x N)."""

    u_obs: np.ndarray
    flux_obs: np.ndarray

    def __post_init__(self):
        self.u_obs = np.atleast_2d(np.asarray(self.u_obs, dtype=float))
        self.flux_obs = np.atleast_2d(np.asarray(self.flux_obs, dtype=float))
        if self.u_obs.shape[1] != self.flux_obs.shape[1]:
            raise ValidationError(
                f"u_obs has {self.u_obs.shape[1]} columns, "
                f"F_obs has {self.flux_obs.shape[1]}"
            )

    @property
    def n_data(self) -> int:
        return self.u_obs.shape[1]

    def validate_against(self, g: DirectedGraph) -> None:
        if self.u_obs.shape[0] != g.num_observed_vertices:
            raise ValidationError(
                f"u_obs has {self.u_obs.shape[0]} rows, "
                f"graph has {g.num_observed_vertices} observed vertices"
            )
        if self.flux_obs.shape[0] != g.num_observed_edges:
            raise ValidationError(
                f"F_obs has {self.flux_obs.shape[0]} rows, "
                f"graph has {g.num_observed_edges} observed edges"
            )


@dataclass
class GroundTruth:
    """Exact solution fields kept alongside synthetic observations."""

    u_full: np.ndarray
    flux_full: np.ndarray
    conductances: np.ndarray


@dataclass
class Dataset:
    graph: DirectedGraph
    observations: ObservationSet
    encoding: str = "gradient"
    units: str = ""
    ground_truth: GroundTruth | None = None
    generator: dict | None = None

    def validate(self) -> None:
        if self.encoding not in ENCODINGS:
            raise ValidationError(f"unknown encoding {self.encoding!r}")
        self.observations.validate_against(self.graph)
        if self.ground_truth is not None:
            gt = self.ground_truth
            if gt.u_full.shape != (self.graph.num_vertices, self.observations.n_data):
                raise ValidationError("ground-truth u_full shape mismatch")
            if gt.flux_full.shape != (self.graph.num_edges, self.observations.n_data):
                raise ValidationError("ground-truth F_full shape mismatch")
            div = graph_divergence(self.graph, gt.flux_full)
            interior = div[self.graph.unobserved_vertices]
            if interior.size and np.max(np.abs(interior)) > 1e-10:
                raise ValidationError(
                    "ground-truth fluxes violate conservation at interior vertices "
                    f"(max residual {np.max(np.abs(interior)):.3e})"
                )

    def fingerprint(self) -> str:
        return fingerprint(_dataset_payload(self))


@dataclass
class GeneratorConfig:
    """Knobs for the synthetic generators.

    ``toy_series`` ignores the topology fields and always produces the
    four-vertex series circuit with both end vertices and end edges observed.
    ``resistor_network`` builds a random interior spanning tree, adds
    ``extra_edges`` interior chords, and attaches each boundary vertex by a
    single observed edge (so boundary vertices have degree 1).
    """

    kind: str = "toy_series"
    n_vertices: int = 4
    extra_edges: int = 0
    conductance_log_range: tuple[float, float] = (0.1, 10.0)
    boundary_fraction: float = 0.25
    n_samples: int = 10
    boundary_sampling: str = "gaussian"
    boundary_std: float = 1.0
    boundary_range: tuple[float, float] = (1.0, 256.0)
    noise_std: float = 0.0
    seed: int = 0
    encoding: str = "gradient"

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValidationError(f"unknown generator kind {self.kind!r}")
        if self.boundary_sampling not in BOUNDARY_SAMPLING:
            raise ValidationError(
                f"unknown boundary sampling {self.boundary_sampling!r}"
            )
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        lo, hi = self.conductance_log_range
        if lo <= 0 or hi <= 0:
            raise ValidationError("conductance range must be positive")


def poisson_oracle(
    g: DirectedGraph, conductances: np.ndarray, boundary_values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the weighted-Laplacian Dirichlet problem on the graph.

    Parameters
    ----------
    conductances : (E,) positive edge weights.
    boundary_values : (V_obs,) or (V_obs, M) potentials on the observed
        vertices, in observed-vertex id order.

    Returns
    -------
    (u_full, flux_full) with shapes (V, M) and (E, M).  Interior divergence
    is exact to solver precision; flux on edge (a, b) is
    ``conductance * (u[a] - u[b])``.
    """
    cond = np.asarray(conductances, dtype=float)
    if cond.shape != (g.num_edges,):
        raise ValidationError(
            f"conductances shape {cond.shape}, expected ({g.num_edges},)"
        )
    if np.any(cond <= 0):
        raise ValidationError("conductances must be positive")
    bvals = np.asarray(boundary_values, dtype=float)
    if bvals.ndim == 1:
        bvals = bvals[:, None]
    obs = g.observed_vertices
    if obs.size == 0:
        raise ValidationError("boundary set is empty")
    if bvals.shape[0] != obs.size:
        raise ValidationError(
            f"boundary values have {bvals.shape[0]} rows, expected {obs.size}"
        )

    laplacian = np.zeros((g.num_vertices, g.num_vertices))
    for e, (a, b) in enumerate(g.edges):
        w = cond[e]
        laplacian[a, a] += w
        laplacian[b, b] += w
        laplacian[a, b] -= w
        laplacian[b, a] -= w

    interior = g.unobserved_vertices
    u_full = np.zeros((g.num_vertices, bvals.shape[1]))
    u_full[obs] = bvals
    if interior.size:
        l_ii = laplacian[np.ix_(interior, interior)]
        l_ib = laplacian[np.ix_(interior, obs)]
        try:
            u_full[interior] = np.linalg.solve(l_ii, -l_ib @ bvals)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "reduced Laplacian is singular (disconnected interior)"
            ) from exc
    flux_full = cond[:, None] * (u_full[g.sources] - u_full[g.targets])
    return u_full, flux_full


def toy_series_graph() -> DirectedGraph:
    """The 4-vertex, 3-edge series circuit with observed ends."""
    return build_graph(
        [(0, 1), (1, 2), (2, 3)],
        vertex_observed=[True, False, False, True],
        edge_observed=[True, False, True],
    )


def _resistor_network_graph(cfg: GeneratorConfig, rng: np.random.Generator) -> DirectedGraph:
    n_boundary = max(2, int(round(cfg.boundary_fraction * cfg.n_vertices)))
    n_interior = cfg.n_vertices - n_boundary
    if n_interior < 1:
        raise ValidationError(
            f"boundary fraction {cfg.boundary_fraction} leaves no interior vertices"
        )
    # Interior vertices take ids 0..n_interior-1; boundary vertices follow.
    edges: list[tuple[int, int]] = []
    for v in range(1, n_interior):
        parent = int(rng.integers(0, v))
        edges.append((parent, v) if rng.random() < 0.5 else (v, parent))
    existing = {frozenset(e) for e in edges}
    attempts = 0
    added = 0
    while added < cfg.extra_edges:
        attempts += 1
        if attempts > 200 * (cfg.extra_edges + 1):
            raise ValidationError(
                f"cannot place {cfg.extra_edges} extra edges among "
                f"{n_interior} interior vertices"
            )
        a, b = (int(x) for x in rng.integers(0, n_interior, size=2))
        if a == b or frozenset((a, b)) in existing:
            continue
        edges.append((a, b))
        existing.add(frozenset((a, b)))
        added += 1
    n_internal_edges = len(edges)
    for k in range(n_boundary):
        boundary_vertex = n_interior + k
        anchor = int(rng.integers(0, n_interior))
        # Oriented boundary -> interior so positive flux means inflow.
        edges.append((boundary_vertex, anchor))
    vertex_observed = [False] * n_interior + [True] * n_boundary
    edge_observed = [False] * n_internal_edges + [True] * n_boundary
    return build_graph(edges, vertex_observed, edge_observed)


def _sample_boundary(cfg: GeneratorConfig, n_boundary: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.boundary_sampling == "gaussian":
        return rng.normal(0.0, cfg.boundary_std, size=(n_boundary, cfg.n_samples))
    lo, hi = cfg.boundary_range
    return rng.uniform(lo, hi, size=(n_boundary, cfg.n_samples))


def generate(cfg: GeneratorConfig) -> Dataset:
    """Seeded, deterministic dataset synthesis with retained ground truth."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "toy_series":
        g = toy_series_graph()
        conductances = np.ones(g.num_edges)
    else:
        g = _resistor_network_graph(cfg, rng)
        lo, hi = cfg.conductance_log_range
        conductances = np.exp(
            rng.uniform(np.log(lo), np.log(hi), size=g.num_edges)
        )
    n_boundary = g.num_observed_vertices
    if n_boundary < 2:
        raise ValidationError("generated graph has fewer than 2 boundary vertices")

    boundary = _sample_boundary(cfg, n_boundary, rng)
    u_full, flux_full = poisson_oracle(g, conductances, boundary)

    u_obs = u_full[g.observed_vertices].copy()
    flux_obs = flux_full[g.observed_edges].copy()
    if cfg.noise_std > 0:
        u_obs += rng.normal(0.0, cfg.noise_std, size=u_obs.shape)
        flux_obs += rng.normal(0.0, cfg.noise_std, size=flux_obs.shape)

    ds = Dataset(
        graph=g,
        observations=ObservationSet(u_obs, flux_obs),
        encoding=cfg.encoding,
        units="dimensionless",
        ground_truth=GroundTruth(u_full, flux_full, conductances),
        generator=asdict(cfg),
    )
    ds.validate()
    return ds


def resample(ds: Dataset, n_samples: int, seed: int) -> Dataset:
    """Fresh boundary draws on an existing dataset's graph and conductances.

    Used to produce test columns that share the training topology.  Requires
    the ground-truth block (for the conductances) and the generator snapshot
    (for the boundary sampling policy).
    """
    if ds.ground_truth is None or ds.generator is None:
        raise ValidationError(
            "resampling needs a dataset with ground truth and generator metadata"
        )
    base = dict(ds.generator)
    base.update(n_samples=n_samples, seed=seed)
    cfg = GeneratorConfig(**{k: _tupled(k, v) for k, v in base.items()})
    rng = np.random.default_rng(seed)
    boundary = _sample_boundary(cfg, ds.graph.num_observed_vertices, rng)
    u_full, flux_full = poisson_oracle(ds.graph, ds.ground_truth.conductances, boundary)
    u_obs = u_full[ds.graph.observed_vertices].copy()
    flux_obs = flux_full[ds.graph.observed_edges].copy()
    if cfg.noise_std > 0:
        u_obs += rng.normal(0.0, cfg.noise_std, size=u_obs.shape)
        flux_obs += rng.normal(0.0, cfg.noise_std, size=flux_obs.shape)
    out = Dataset(
        graph=ds.graph,
        observations=ObservationSet(u_obs, flux_obs),
        encoding=ds.encoding,
        units=ds.units,
        ground_truth=GroundTruth(u_full, flux_full, ds.ground_truth.conductances),
        generator=asdict(cfg),
    )
    out.validate()
    return out


def _tupled(key: str, value):
    if key in ("conductance_log_range", "boundary_range") and isinstance(value, list):
        return tuple(value)
    return value


def _dataset_payload(ds: Dataset) -> dict:
    payload = {
        "schema": DATASET_SCHEMA,
        "units": ds.units,
        "encoding": ds.encoding,
        "topology": ds.graph.topology_payload(),
        "u_obs": encode_matrix(ds.observations.u_obs),
        "F_obs": encode_matrix(ds.observations.flux_obs),
    }
    if ds.ground_truth is not None:
        payload["ground_truth"] = {
            "u_full": encode_matrix(ds.ground_truth.u_full),
            "F_full": encode_matrix(ds.ground_truth.flux_full),
            "conductances": [float(c) for c in ds.ground_truth.conductances],
        }
    if ds.generator is not None:
        payload["generator"] = _jsonable(ds.generator)
    return payload


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def export_block_csv(ds: Dataset, block: str, path: Path | str) -> None:
    """Write one of the dataset's matrix blocks as a plotting-ready CSV.

    ``block`` is one of ``u_obs``, ``F_obs``, ``u_full``, ``F_full``,
    ``conductances``; full-precision values, one header row, one matrix row
    per line (columns are data samples).
    """
    from .runio import export_matrix_csv

    blocks: dict[str, np.ndarray] = {
        "u_obs": ds.observations.u_obs,
        "F_obs": ds.observations.flux_obs,
    }
    if ds.ground_truth is not None:
        blocks["u_full"] = ds.ground_truth.u_full
        blocks["F_full"] = ds.ground_truth.flux_full
        blocks["conductances"] = ds.ground_truth.conductances[:, None]
    if block not in blocks:
        raise ValidationError(
            f"unknown block {block!r}; available: {sorted(blocks)}"
        )
    arr = blocks[block]
    header = [f"col{j}" for j in range(arr.shape[1])]
    export_matrix_csv(path, arr, header=header)


def save_dataset(ds: Dataset, path: Path | str) -> None:
    ds.validate()
    write_json(path, _dataset_payload(ds))


def load_dataset(path: Path | str) -> Dataset:
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise SchemaError(f"{path}: dataset file must be a JSON object")
    if payload.get("schema") != DATASET_SCHEMA:
        raise SchemaError(
            f"{path}: schema {payload.get('schema')!r}, expected {DATASET_SCHEMA!r}"
        )
    for key in ("topology", "u_obs", "F_obs"):
        if key not in payload:
            raise SchemaError(f"{path}: missing required block {key!r}")
    topo = payload["topology"]
    try:
        num_vertices = int(topo["num_vertices"])
        edges = [tuple(int(v) for v in e) for e in topo["edges"]]
        observed_vertices = set(int(v) for v in topo["observed_vertices"])
        observed_edges = set(int(e) for e in topo["observed_edges"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed topology block ({exc})") from exc
    g = build_graph(
        edges,
        vertex_observed=[v in observed_vertices for v in range(num_vertices)],
        edge_observed=[e in observed_edges for e in range(len(edges))],
    )
    obs = ObservationSet(
        decode_matrix(payload["u_obs"], name="u_obs"),
        decode_matrix(payload["F_obs"], name="F_obs"),
    )
    ground_truth = None
    if "ground_truth" in payload:
        gt = payload["ground_truth"]
        ground_truth = GroundTruth(
            decode_matrix(gt["u_full"], name="u_full"),
            decode_matrix(gt["F_full"], name="F_full"),
            np.asarray(gt["conductances"], dtype=float),
        )
    ds = Dataset(
        graph=g,
        observations=obs,
        encoding=payload.get("encoding", "gradient"),
        units=payload.get("units", ""),
        ground_truth=ground_truth,
        generator=payload.get("generator"),
    )
    ds.validate()
    return ds
