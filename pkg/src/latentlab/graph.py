"""Hierarchical latent-variable DAGs with reachability and d-separation queries.

A graph has three node kinds: latent variables, observable variables (the
"pixels"), and exogenous noise variables.  Observables are sinks, never
connected to each other, and every latent/observable has exactly one
exogenous parent.  The ``layout`` is the fixed pixel order used by mask
sampling.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

NodeId = str


class NodeKind(str, Enum):
    LATENT = "latent"
    OBSERVABLE = "observable"
    EXOGENOUS = "exogenous"


class UnknownNodeError(KeyError):
    """Raised when an operation references a node id not in the graph."""


@dataclass(frozen=True)
class Mask:
    """A subset of observable node ids designated as masked."""

    masked: frozenset[NodeId]

    def __init__(self, masked: Iterable[NodeId]):
        object.__setattr__(self, "masked", frozenset(masked))

    def __iter__(self):
        return iter(sorted(self.masked))

    def __len__(self):
        return len(self.masked)

    def visible(self, g: "LatentGraph") -> frozenset[NodeId]:
        """Complement of the mask within ``g``'s observables."""
        return frozenset(g.observables) - self.masked


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = ()


class LatentGraph:
    """Immutable DAG over latent, observable, and exogenous nodes.

    ``nodes`` is an ordered list of ``(id, kind)`` pairs, ``edges`` a
    collection of ``(parent, child)`` pairs, and ``layout`` the ordered list
    of observable ids.  Construction only requires edge endpoints to be
    declared nodes; all structural invariants (acyclicity, observables as
    sinks, exogenous wiring, layout permutation) are checked by
    :func:`validate_graph` and reported as data rather than raised.
    """

    def __init__(
        self,
        nodes: Iterable[tuple[NodeId, NodeKind | str]],
        edges: Iterable[tuple[NodeId, NodeId]],
        layout: Sequence[NodeId],
    ):
        kinds: dict[NodeId, NodeKind] = {}
        for node_id, kind in nodes:
            if not node_id:
                raise ValueError("node ids must be non-empty strings")
            if node_id in kinds:
                raise ValueError(f"duplicate node id {node_id!r}")
            kinds[node_id] = NodeKind(kind)
        parent_map: dict[NodeId, set[NodeId]] = {v: set() for v in kinds}
        child_map: dict[NodeId, set[NodeId]] = {v: set() for v in kinds}
        edge_set: set[tuple[NodeId, NodeId]] = set()
        for parent, child in edges:
            for endpoint in (parent, child):
                if endpoint not in kinds:
                    raise UnknownNodeError(f"edge endpoint {endpoint!r} is not a declared node")
            edge_set.add((parent, child))
            parent_map[child].add(parent)
            child_map[parent].add(child)
        self._kinds = kinds
        self._parents = {v: frozenset(ps) for v, ps in parent_map.items()}
        self._children = {v: frozenset(cs) for v, cs in child_map.items()}
        self.edges = frozenset(edge_set)
        self.layout = tuple(layout)
        self._topo: tuple[NodeId, ...] | None = None
        self._levels: dict[NodeId, int | None] | None = None

    # -- basic queries ------------------------------------------------

    @property
    def node_ids(self) -> tuple[NodeId, ...]:
        return tuple(self._kinds)

    def __contains__(self, v: NodeId) -> bool:
        return v in self._kinds

    def kind(self, v: NodeId) -> NodeKind:
        self._require(v)
        return self._kinds[v]

    def nodes_of_kind(self, kind: NodeKind) -> tuple[NodeId, ...]:
        return tuple(v for v, k in self._kinds.items() if k is kind)

    @property
    def latents(self) -> tuple[NodeId, ...]:
        return self.nodes_of_kind(NodeKind.LATENT)

    @property
    def observables(self) -> tuple[NodeId, ...]:
        return self.nodes_of_kind(NodeKind.OBSERVABLE)

    @property
    def exogenous(self) -> tuple[NodeId, ...]:
        return self.nodes_of_kind(NodeKind.EXOGENOUS)

    def parents(self, v: NodeId) -> frozenset[NodeId]:
        """All parents of ``v``, including its exogenous parent."""
        self._require(v)
        return self._parents[v]

    def children(self, v: NodeId) -> frozenset[NodeId]:
        self._require(v)
        return self._children[v]

    def _require(self, v: NodeId) -> None:
        if v not in self._kinds:
            raise UnknownNodeError(f"unknown node id {v!r}")

    # -- reachability --------------------------------------------------

    def ancestors(self, v: NodeId) -> set[NodeId]:
        """Proper ancestors of ``v`` (``v`` excluded, exogenous included)."""
        self._require(v)
        return self._reach(v, self._parents)

    def descendants(self, v: NodeId) -> set[NodeId]:
        """Proper descendants of ``v`` (``v`` excluded)."""
        self._require(v)
        return self._reach(v, self._children)

    def ancestors_of_set(self, targets: Iterable[NodeId]) -> set[NodeId]:
        """Union of proper ancestors over ``targets`` (a target appears only
        if it is an ancestor of another target)."""
        targets = set(targets)
        for t in targets:
            self._require(t)
        seen: set[NodeId] = set()
        queue = deque(targets)
        while queue:
            v = queue.popleft()
            for p in self._parents[v]:
                if p not in seen:
                    seen.add(p)
                    queue.append(p)
        return seen

    def _reach(self, start: NodeId, step: Mapping[NodeId, frozenset[NodeId]]) -> set[NodeId]:
        seen: set[NodeId] = set()
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for w in step[v]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        seen.discard(start)
        return seen

    def is_ancestor_of_any(self, v: NodeId, targets: Iterable[NodeId]) -> bool:
        """True iff a directed path leads from ``v`` to some target (proper:
        a node does not count as its own ancestor)."""
        targets = set(targets)
        for t in targets:
            self._require(t)
        return bool(self.descendants(v) & targets)

    def directed_path_nodes(self, src: NodeId, targets: Iterable[NodeId]) -> set[NodeId]:
        """All nodes other than ``src`` lying on a directed path from ``src``
        to some target, targets themselves included when reached."""
        targets = set(targets)
        for t in targets:
            self._require(t)
        down = self.descendants(src)
        up = self.ancestors_of_set(targets)
        return down & (up | targets)

    # -- order and depth ------------------------------------------------

    def topo_order(self) -> tuple[NodeId, ...]:
        """Parents-before-children order (ties broken by node id).

        Raises ValueError when the edge relation has a cycle.
        """
        if self._topo is None:
            in_deg = {v: len(self._parents[v]) for v in self._kinds}
            ready = sorted(v for v, d in in_deg.items() if d == 0)
            order: list[NodeId] = []
            while ready:
                v = ready.pop(0)
                order.append(v)
                opened = []
                for c in self._children[v]:
                    in_deg[c] -= 1
                    if in_deg[c] == 0:
                        opened.append(c)
                if opened:
                    ready = sorted(ready + opened)
            if len(order) != len(self._kinds):
                raise ValueError("graph has a cycle; no topological order exists")
            self._topo = tuple(order)
        return self._topo

    def topo_depth(self, v: NodeId) -> int:
        """Level of a latent: length of its longest directed path down to an
        observable.  A latent whose children are all observables has level 1.
        """
        if self.kind(v) is not NodeKind.LATENT:
            raise ValueError(f"topo_depth is defined for latent nodes, got {v!r}")
        depth = self._level_map().get(v)
        return 0 if depth is None else depth

    def _level_map(self) -> dict[NodeId, int | None]:
        # None marks nodes with no directed path to any observable.
        if self._levels is None:
            levels: dict[NodeId, int | None] = {}
            for v in reversed(self.topo_order()):
                if self._kinds[v] is NodeKind.OBSERVABLE:
                    levels[v] = 0
                else:
                    below = [levels[c] for c in self._children[v] if levels.get(c) is not None]
                    levels[v] = 1 + max(below) if below else None
            self._levels = levels
        return self._levels

    def __repr__(self) -> str:
        return (
            f"LatentGraph(latents={len(self.latents)}, observables={len(self.observables)}, "
            f"exogenous={len(self.exogenous)}, edges={len(self.edges)})"
        )


# -- validation ----------------------------------------------------------


def validate_graph(g: LatentGraph) -> ValidationReport:
    """Check every structural invariant; violations are returned, not raised."""
    violations: list[str] = []

    cycle = _find_cycle(g)
    if cycle:
        violations.append("cycle: " + " -> ".join(cycle))

    for parent, child in sorted(g.edges):
        p_kind, c_kind = g.kind(parent), g.kind(child)
        if p_kind is NodeKind.OBSERVABLE and c_kind is NodeKind.OBSERVABLE:
            violations.append(f"edge between observables: {parent} -> {child}")
        elif p_kind is NodeKind.OBSERVABLE:
            violations.append(f"observable has out-edge: {parent} -> {child}")
        if c_kind is NodeKind.EXOGENOUS:
            violations.append(f"exogenous node has in-edge: {parent} -> {child}")

    for v in g.node_ids:
        kind = g.kind(v)
        if kind is NodeKind.EXOGENOUS:
            out = len(g.children(v))
            if out != 1:
                violations.append(f"exogenous node {v} has out-degree {out}, expected 1")
        else:
            exo_parents = [p for p in g.parents(v) if g.kind(p) is NodeKind.EXOGENOUS]
            if len(exo_parents) != 1:
                violations.append(
                    f"{kind.value} node {v} has {len(exo_parents)} exogenous parents, expected 1"
                )

    observables = set(g.observables)
    layout = list(g.layout)
    if len(set(layout)) != len(layout) or set(layout) != observables:
        violations.append(
            f"layout is not a permutation of the observables: layout={layout}, "
            f"observables={sorted(observables)}"
        )

    return ValidationReport(ok=not violations, violations=tuple(violations))


def _find_cycle(g: LatentGraph) -> list[NodeId] | None:
    white, gray, black = 0, 1, 2
    color = {v: white for v in g.node_ids}
    stack_path: list[NodeId] = []

    def visit(v: NodeId) -> list[NodeId] | None:
        color[v] = gray
        stack_path.append(v)
        for c in sorted(g.children(v)):
            if color[c] == gray:
                i = stack_path.index(c)
                return stack_path[i:] + [c]
            if color[c] == white:
                found = visit(c)
                if found:
                    return found
        stack_path.pop()
        color[v] = black
        return None

    for v in g.node_ids:
        if color[v] == white:
            found = visit(v)
            if found:
                return found
    return None


# -- d-separation ---------------------------------------------------------


def d_separated(
    g: LatentGraph,
    a: Iterable[NodeId],
    b: Iterable[NodeId],
    z: Iterable[NodeId],
) -> bool:
    """True iff every undirected path between ``a`` and ``b`` is blocked by
    ``z``: chains/forks block when their middle node is conditioned on,
    colliders block unless the collider or one of its descendants is.

    The three sets must be pairwise disjoint.
    """
    a, b, z = set(a), set(b), set(z)
    for v in a | b | z:
        if v not in g:
            raise UnknownNodeError(f"unknown node id {v!r}")
    if a & b or a & z or b & z:
        raise ValueError("d-separation requires pairwise disjoint node sets")
    if not a or not b:
        return True

    # Upward closure of z: nodes that are in z or have a descendant in z.
    z_up = set(z)
    queue = deque(z)
    while queue:
        v = queue.popleft()
        for p in g.parents(v):
            if p not in z_up:
                z_up.add(p)
                queue.append(p)

    # Walk active trails from `a`; a state is (node, direction of arrival).
    up, down = 0, 1
    visited: set[tuple[NodeId, int]] = set()
    agenda: deque[tuple[NodeId, int]] = deque((v, up) for v in a)
    while agenda:
        v, direction = agenda.popleft()
        if (v, direction) in visited:
            continue
        visited.add((v, direction))
        if v not in z and v in b:
            return False
        if direction == up and v not in z:
            for p in g.parents(v):
                agenda.append((p, up))
            for c in g.children(v):
                agenda.append((c, down))
        elif direction == down:
            if v not in z:
                for c in g.children(v):
                    agenda.append((c, down))
            if v in z_up:
                for p in g.parents(v):
                    agenda.append((p, up))
    return True


# -- dimensions -------------------------------------------------------------


def derive_dims(
    g: LatentGraph,
    exo_dims: Mapping[NodeId, int] | None = None,
    default: int = 1,
) -> dict[NodeId, int]:
    """Dimension of every node under the additive rule: exogenous nodes get
    their assigned width (``default`` unless overridden), every other node
    the sum of its parents' widths."""
    exo_dims = dict(exo_dims or {})
    dims: dict[NodeId, int] = {}
    for v in g.topo_order():
        if g.kind(v) is NodeKind.EXOGENOUS:
            d = int(exo_dims.get(v, default))
            if d <= 0:
                raise ValueError(f"exogenous dimension for {v} must be positive, got {d}")
            dims[v] = d
        else:
            if not g.parents(v):
                raise ValueError(f"non-exogenous node {v} has no parents; dimensions undefined")
            dims[v] = sum(dims[p] for p in g.parents(v))
    return dims


# -- file format -------------------------------------------------------------

EXOGENOUS_PREFIX = "eps_"


def graph_from_dict(data: Mapping) -> LatentGraph:
    """Build a graph from its dict form.  With ``implicit_exogenous`` set,
    every latent/observable lacking an exogenous parent gets a synthetic
    ``eps_<id>`` parent node."""
    nodes = [(str(n["id"]), NodeKind(str(n["kind"]).lower())) for n in data["nodes"]]
    edges = [(str(p), str(c)) for p, c in data["edges"]]
    layout = [str(v) for v in data.get("layout", [])]
    if data.get("implicit_exogenous", False):
        kinds = dict(nodes)
        with_exo = {
            c for p, c in edges if kinds.get(p) is NodeKind.EXOGENOUS
        }
        for node_id, kind in list(nodes):
            if kind is NodeKind.EXOGENOUS or node_id in with_exo:
                continue
            eps = EXOGENOUS_PREFIX + node_id
            if eps in kinds:
                raise ValueError(f"synthetic exogenous id {eps!r} collides with a declared node")
            nodes.append((eps, NodeKind.EXOGENOUS))
            edges.append((eps, node_id))
    return LatentGraph(nodes, edges, layout)


def graph_to_dict(g: LatentGraph) -> dict:
    return {
        "nodes": [{"id": v, "kind": g.kind(v).value} for v in g.node_ids],
        "edges": [[p, c] for p, c in sorted(g.edges)],
        "layout": list(g.layout),
        "implicit_exogenous": False,
    }


def load_graph(path: str | Path) -> LatentGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_dict(json.load(fh))


def save_graph(g: LatentGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(g), fh, indent=2, sort_keys=True)
        fh.write("\n")
