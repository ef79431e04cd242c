"""Concrete invertible simulator over a latent graph.

Every latent and observable node gets a bijective mixing function (stacked
orthogonal-linear layers with a leaky elementwise nonlinearity) applied to
the concatenation of its parent values; exogenous nodes carry i.i.d. standard
normal noise.  Dimensions follow the additive rule: a node is as wide as its
parents combined, so each mixing function is square and exactly invertible.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from latentlab.graph import LatentGraph, NodeId, NodeKind, derive_dims, validate_graph
from latentlab.locate import SharedInfo


def _node_stream(seed: int, node_id: NodeId, purpose: int) -> np.random.Generator:
    # Stream depends on (seed, node id, purpose) only, never on iteration order.
    digest = hashlib.blake2b(node_id.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), purpose, int.from_bytes(digest, "big")])
    )


def _random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def _leaky_inv(y: np.ndarray, slope: float) -> np.ndarray:
    return np.where(y >= 0, y, y / slope)


@dataclass(frozen=True)
class MixingFunction:
    """Bijection ``concat(parent blocks) -> node value``.

    Each layer applies a square orthogonal matrix, adds the bias, and passes
    the result through a leaky elementwise nonlinearity with slope in (0, 1].
    Parent blocks are concatenated with non-exogenous parents sorted by id
    and the exogenous parent last.
    """

    input_order: tuple[NodeId, ...]
    block_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    slope: float

    def __post_init__(self):
        if not 0.0 < self.slope <= 1.0:
            raise ValueError(f"slope must be in (0, 1], got {self.slope}")

    @property
    def dim(self) -> int:
        return int(sum(self.block_sizes))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected input width {self.dim}, got {x.shape[-1]}")
        for w, b in zip(self.weights, self.biases):
            x = _leaky(x @ w.T + b, self.slope)
        return x

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.dim:
            raise ValueError(f"expected value width {self.dim}, got {y.shape[-1]}")
        for w, b in zip(reversed(self.weights), reversed(self.biases)):
            y = (_leaky_inv(y, self.slope) - b) @ w
        return y

    def split(self, x: np.ndarray) -> dict[NodeId, np.ndarray]:
        """Break a concatenated input back into per-parent blocks."""
        out: dict[NodeId, np.ndarray] = {}
        offset = 0
        for parent, size in zip(self.input_order, self.block_sizes):
            out[parent] = x[..., offset:offset + size]
            offset += size
        return out

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Forward Jacobian at a single input point."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a point of shape ({self.dim},), got {x.shape}")
        jac = np.eye(self.dim)
        for w, b in zip(self.weights, self.biases):
            pre = x @ w.T + b
            scale = np.where(pre >= 0, 1.0, self.slope)
            jac = (scale[:, None] * w) @ jac
            x = _leaky(pre, self.slope)
        return jac


@dataclass(frozen=True)
class ScmSpec:
    """A graph with node dimensions and one mixing function per non-exogenous
    node; immutable and fully determined by its build arguments."""

    graph: LatentGraph
    dims: dict[NodeId, int]
    mixers: dict[NodeId, MixingFunction]
    seed: int
    layers: int
    alpha: float


@dataclass(frozen=True)
class Dataset:
    """Samples over every node coordinate: ``values`` is ``n`` rows by the
    total width, ``column_spans`` maps each node to its (offset, length),
    and ``layout`` records the observable order used downstream."""

    values: np.ndarray
    column_spans: dict[NodeId, tuple[int, int]]
    layout: tuple[NodeId, ...]

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def columns(self, v: NodeId) -> np.ndarray:
        offset, length = self.column_spans[v]
        return self.values[:, offset:offset + length]

    def stack(self, nodes: Iterable[NodeId]) -> np.ndarray:
        """Column concatenation over ``nodes`` in the given order."""
        nodes = list(nodes)
        if not nodes:
            return np.empty((self.n, 0))
        return np.hstack([self.columns(v) for v in nodes])


def _canonical_parent_order(g: LatentGraph, v: NodeId) -> list[NodeId]:
    parents = g.parents(v)
    exo = sorted(p for p in parents if g.kind(p) is NodeKind.EXOGENOUS)
    rest = sorted(p for p in parents if g.kind(p) is not NodeKind.EXOGENOUS)
    return rest + exo


def build_scm(
    g: LatentGraph,
    exo_dims: Mapping[NodeId, int] | None = None,
    layers: int = 2,
    alpha: float = 0.2,
    seed: int = 0,
    bias: bool = False,
) -> ScmSpec:
    """Derive dimensions and construct every mixing function.

    Deterministic given all arguments and invariant to the input order of the
    graph's node and edge lists.
    """
    report = validate_graph(g)
    if not report.ok:
        raise ValueError("invalid graph: " + "; ".join(report.violations))
    if layers < 1:
        raise ValueError("at least one layer is required")
    dims = derive_dims(g, exo_dims)
    mixers: dict[NodeId, MixingFunction] = {}
    for v in g.topo_order():
        if g.kind(v) is NodeKind.EXOGENOUS:
            continue
        order = _canonical_parent_order(g, v)
        sizes = tuple(dims[p] for p in order)
        dim = dims[v]
        rng = _node_stream(seed, v, purpose=0)
        weights = tuple(_random_orthogonal(dim, rng) for _ in range(layers))
        biases = tuple(
            0.1 * rng.standard_normal(dim) if bias else np.zeros(dim) for _ in range(layers)
        )
        mixers[v] = MixingFunction(
            input_order=tuple(order),
            block_sizes=sizes,
            weights=weights,
            biases=biases,
            slope=alpha,
        )
    return ScmSpec(graph=g, dims=dims, mixers=mixers, seed=seed, layers=layers, alpha=alpha)


def sample(scm: ScmSpec, n: int, seed: int = 0) -> Dataset:
    """Draw ``n`` rows by ancestral evaluation: exogenous coordinates are
    i.i.d. standard normal, every other node applies its mixing function to
    its parents.  Deterministic given the seed and order-invariant."""
    if n < 0:
        raise ValueError("sample count must be non-negative")
    g = scm.graph
    values: dict[NodeId, np.ndarray] = {}
    for v in g.topo_order():
        if g.kind(v) is NodeKind.EXOGENOUS:
            rng = _node_stream(seed, v, purpose=1)
            values[v] = rng.standard_normal((n, scm.dims[v]))
        else:
            mixer = scm.mixers[v]
            x = np.hstack([values[p] for p in mixer.input_order]) if n else np.empty((0, mixer.dim))
            values[v] = mixer.forward(x)

    spans: dict[NodeId, tuple[int, int]] = {}
    offset = 0
    ordered = sorted(g.node_ids)
    for v in ordered:
        spans[v] = (offset, scm.dims[v])
        offset += scm.dims[v]
    matrix = np.empty((n, offset))
    for v in ordered:
        start, length = spans[v]
        matrix[:, start:start + length] = values[v]
    return Dataset(values=matrix, column_spans=spans, layout=tuple(g.layout))


def invert_node(scm: ScmSpec, v: NodeId, value: np.ndarray) -> dict[NodeId, np.ndarray]:
    """Exact inverse of one node's mixing function, split into parent blocks."""
    if v not in scm.mixers:
        raise ValueError(f"{v!r} has no mixing function (exogenous or unknown)")
    mixer = scm.mixers[v]
    value = np.asarray(value, dtype=float)
    if value.shape[-1] != scm.dims[v]:
        raise ValueError(f"expected width {scm.dims[v]} for {v}, got {value.shape[-1]}")
    return mixer.split(mixer.inverse(value))


def invert_observables(scm: ScmSpec, observed: Mapping[NodeId, np.ndarray]) -> dict[NodeId, np.ndarray]:
    """Recover every node value (latents and noise included) from the full
    observable vector by walking the graph bottom-up."""
    g = scm.graph
    missing = set(g.observables) - set(observed)
    if missing:
        raise ValueError(f"missing observable values: {sorted(missing)}")
    values: dict[NodeId, np.ndarray] = {
        v: np.asarray(observed[v], dtype=float) for v in g.observables
    }
    for v in reversed(g.topo_order()):
        if g.kind(v) is NodeKind.EXOGENOUS:
            continue
        if v not in values:
            raise ValueError(f"value of {v!r} is not determined by the observables")
        for parent, block in invert_node(scm, v, values[v]).items():
            values.setdefault(parent, block)
    return values


def jacobian_min_singular_value(scm: ScmSpec, v: NodeId, point: np.ndarray) -> float:
    """Smallest singular value of the node's forward Jacobian at a point;
    bounded below by slope**layers by construction."""
    if v not in scm.mixers:
        raise ValueError(f"{v!r} has no mixing function (exogenous or unknown)")
    jac = scm.mixers[v].jacobian(np.asarray(point, dtype=float))
    return float(np.linalg.svd(jac, compute_uv=False)[-1])


def extract_blocks(
    ds: Dataset, info: SharedInfo
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Column blocks (C, S_m, S_mc, X_masked, X_visible), each concatenated
    in sorted node-id order."""
    for v in sorted(info.c | info.s_m | info.s_mc | info.mask.masked):
        if v not in ds.column_spans:
            raise KeyError(f"node {v!r} not present in the dataset")
    masked = sorted(info.mask.masked)
    visible = sorted(set(ds.layout) - info.mask.masked)
    return (
        ds.stack(sorted(info.c)),
        ds.stack(sorted(info.s_m)),
        ds.stack(sorted(info.s_mc)),
        ds.stack(masked),
        ds.stack(visible),
    )


# -- on-disk format ------------------------------------------------------------


def save_dataset(ds: Dataset, basepath: str | Path, seed: int | None = None, csv_max_rows: int = 1000) -> dict[str, Path]:
    """Write ``<base>.bin`` (float64, column-major) plus a ``<base>.json``
    header; small datasets also get a ``<base>.csv``."""
    base = Path(basepath)
    base.parent.mkdir(parents=True, exist_ok=True)
    bin_path = base.with_suffix(".bin")
    bin_path.write_bytes(np.asfortranarray(ds.values).tobytes(order="F"))
    header = {
        "n": ds.n,
        "total_dim": int(ds.values.shape[1]),
        "dtype": "float64",
        "order": "F",
        "column_spans": {v: list(span) for v, span in sorted(ds.column_spans.items())},
        "layout": list(ds.layout),
        "seed": seed,
    }
    json_path = base.with_suffix(".json")
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    written = {"bin": bin_path, "json": json_path}
    if ds.n <= csv_max_rows:
        csv_path = base.with_suffix(".csv")
        names = [
            f"{v}[{i}]"
            for v, (offset, length) in sorted(ds.column_spans.items(), key=lambda kv: kv[1][0])
            for i in range(length)
        ]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for row in ds.values:
                writer.writerow([repr(float(x)) for x in row])
        written["csv"] = csv_path
    return written


def load_dataset(basepath: str | Path) -> Dataset:
    base = Path(basepath)
    header = json.loads(base.with_suffix(".json").read_text())
    n, total = header["n"], header["total_dim"]
    raw = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype=np.float64)
    values = raw.reshape((n, total), order=header["order"]).copy()
    spans = {v: (int(a), int(b)) for v, (a, b) in header["column_spans"].items()}
    return Dataset(values=values, column_spans=spans, layout=tuple(header["layout"]))
