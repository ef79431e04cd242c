"""Locating the latent information shared across a mask.

For a mask over the observables, the shared set ``c`` is the minimal set of
latent variables carrying all statistical dependence between the masked and
visible parts.  ``locate_c`` finds it by backtracking from the masked
observables and pruning; ``locate_smc`` collects the visible-side-specific
remainder; ``brute_force_minimal_c`` is an independent oracle that searches
all latent subsets in order of total dimension.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping

from latentlab.graph import (
    LatentGraph,
    Mask,
    NodeId,
    NodeKind,
    UnknownNodeError,
    d_separated,
    derive_dims,
    validate_graph,
)


@dataclass(frozen=True)
class SharedInfo:
    """The located triple for one mask: shared latents ``c``, masked-side
    noise ``s_m`` (exogenous only), and a visible-side remainder ``s_mc``
    (exogenous members plus latent spouses of ``c``)."""

    c: frozenset[NodeId]
    s_m: frozenset[NodeId]
    s_mc: frozenset[NodeId]
    mask: Mask

    def __post_init__(self):
        if self.c & self.s_m or self.c & self.s_mc or self.s_m & self.s_mc:
            raise ValueError("c, s_m, s_mc must be pairwise disjoint")


@dataclass(frozen=True)
class ConditionReport:
    """Outcome of the structural checks for one (mask, SharedInfo) pair."""

    invertible_masked: bool
    invertible_visible: bool
    recoverable_from_masked: bool
    independence_ok: bool
    total_dim_c: int
    minimal_ok: bool | None = None
    witnesses: tuple[str, ...] = ()

    @property
    def all_ok(self) -> bool:
        flags = (
            self.invertible_masked,
            self.invertible_visible,
            self.recoverable_from_masked,
            self.independence_ok,
        )
        return all(flags) and self.minimal_ok is not False


@dataclass(frozen=True)
class OracleResult:
    """Minimal shared set found by exhaustive search.  ``ties`` lists any
    other latent subsets of equal total dimension that also satisfy all
    conditions; an empty tuple means the minimum is unique."""

    c: frozenset[NodeId]
    s_m: frozenset[NodeId]
    total_dim: int
    ties: tuple[frozenset[NodeId], ...] = ()


def _split_mask(g: LatentGraph, mask: Mask) -> tuple[set[NodeId], set[NodeId]]:
    observables = set(g.observables)
    masked = set(mask.masked)
    if not masked <= observables:
        raise ValueError(f"mask contains non-observable ids: {sorted(masked - observables)}")
    visible = observables - masked
    if not masked or not visible:
        raise ValueError("both the mask and its complement must be non-empty")
    return masked, visible


def _require_valid(g: LatentGraph) -> None:
    report = validate_graph(g)
    if not report.ok:
        raise ValueError("invalid graph: " + "; ".join(report.violations))


def locate_c(g: LatentGraph, mask: Mask) -> tuple[frozenset[NodeId], frozenset[NodeId]]:
    """Find the shared latent set ``c`` and masked-side noise ``s_m``.

    Selection walks up from every masked observable: exogenous parents are
    collected into ``s_m``, latent parents that can reach a visible
    observable join the candidate set, and everything else is backtracked
    further.  Pruning then drops any candidate with another pre-pruning
    candidate on one of its directed paths to the visible side.  Both stages
    are order-independent.
    """
    _require_valid(g)
    masked, visible = _split_mask(g, mask)

    reaches_visible = g.ancestors_of_set(visible)
    candidates: set[NodeId] = set()
    s_m: set[NodeId] = set()
    processed: set[NodeId] = set()
    frontier: set[NodeId] = set(masked)
    while frontier:
        v = frontier.pop()
        if v in processed:
            continue
        processed.add(v)
        for p in g.parents(v):
            if g.kind(p) is NodeKind.EXOGENOUS:
                s_m.add(p)
            elif p in reaches_visible:
                candidates.add(p)
            else:
                frontier.add(p)

    pruned = {
        d
        for d in candidates
        if not (g.directed_path_nodes(d, visible) & (candidates - {d}))
    }
    return frozenset(pruned), frozenset(s_m)


def locate_smc(g: LatentGraph, mask: Mask, c: Iterable[NodeId]) -> frozenset[NodeId]:
    """Collect one valid visible-side remainder ``s_mc`` for a given ``c``.

    Backtracks from every visible observable.  A node with a parent in ``c``
    contributes all its non-``c`` parents (the spouses, plus its own noise)
    and those are not backtracked further; otherwise exogenous parents are
    collected and latent parents backtracked.  The result is not unique in
    general; this returns the one induced by that reading.
    """
    _require_valid(g)
    _, visible = _split_mask(g, mask)
    c = frozenset(c)
    non_latent = [v for v in c if g.kind(v) is not NodeKind.LATENT]
    if non_latent:
        raise ValueError(f"c must contain latents only, got {sorted(non_latent)}")

    s_mc: set[NodeId] = set()
    processed: set[NodeId] = set()
    frontier: set[NodeId] = set(visible)
    while frontier:
        v = frontier.pop()
        if v in processed:
            continue
        processed.add(v)
        parents = g.parents(v)
        if parents & c:
            s_mc |= parents - c
        else:
            for p in parents:
                if g.kind(p) is NodeKind.EXOGENOUS:
                    s_mc.add(p)
                else:
                    frontier.add(p)
    return frozenset(s_mc)


def locate_shared_info(g: LatentGraph, mask: Mask) -> SharedInfo:
    """Run both searches and bundle the triple with its mask."""
    c, s_m = locate_c(g, mask)
    s_mc = locate_smc(g, mask, c)
    return SharedInfo(c=c, s_m=s_m, s_mc=s_mc, mask=mask)


def information_closure(g: LatentGraph, known: Iterable[NodeId]) -> set[NodeId]:
    """Least fixpoint of what a set of known node values determines.

    Two rules: knowing a node reveals all its parents (each generating step
    is invertible), and knowing all parents of a node reveals the node
    (forward evaluation).  Exogenous nodes enter only via the first rule.
    """
    closure: set[NodeId] = set()
    agenda: deque[NodeId] = deque()
    missing = {v: len(g.parents(v)) for v in g.node_ids}

    def add(v: NodeId) -> None:
        if v not in closure:
            closure.add(v)
            agenda.append(v)

    for v in known:
        if v not in g:
            raise UnknownNodeError(f"unknown node id {v!r}")
        add(v)
    while agenda:
        v = agenda.popleft()
        for p in g.parents(v):
            add(p)
        for child in g.children(v):
            missing[child] -= 1
            if missing[child] == 0:
                add(child)
    return closure


def verify_conditions(
    g: LatentGraph,
    mask: Mask,
    info: SharedInfo,
    dims: Mapping[NodeId, int] | None = None,
) -> ConditionReport:
    """Check the four structural conditions on a triple, plus minimality
    against the exhaustive oracle when a dimension map is supplied.

    All failures are reported as witnesses; nothing raises.
    """
    masked, visible = _split_mask(g, mask)
    witnesses: list[str] = []

    bad_c = {v for v in info.c if g.kind(v) is not NodeKind.LATENT}
    if bad_c:
        witnesses.append(f"c contains non-latent nodes: {sorted(bad_c)}")
    bad_sm = {v for v in info.s_m if g.kind(v) is not NodeKind.EXOGENOUS}
    if bad_sm:
        witnesses.append(f"s_m contains non-exogenous nodes: {sorted(bad_sm)}")

    closure_masked_side = information_closure(g, info.c | info.s_m)
    invertible_masked = masked <= closure_masked_side
    if not invertible_masked:
        witnesses.append(
            f"masked observables not determined by c + s_m: {sorted(masked - closure_masked_side)}"
        )

    closure_visible_side = information_closure(g, info.c | info.s_mc)
    invertible_visible = visible <= closure_visible_side
    if not invertible_visible:
        witnesses.append(
            f"visible observables not determined by c + s_mc: {sorted(visible - closure_visible_side)}"
        )

    closure_of_masked = information_closure(g, masked)
    recoverable = (info.c | info.s_m) <= closure_of_masked
    if not recoverable:
        witnesses.append(
            "c + s_m not recoverable from the masked observables: "
            f"{sorted((info.c | info.s_m) - closure_of_masked)}"
        )

    other = info.c | info.s_mc
    if info.s_m & other:
        independence_ok = False
        witnesses.append(f"s_m overlaps c + s_mc: {sorted(info.s_m & other)}")
    else:
        independence_ok = bool(
            not info.s_m or not other or d_separated(g, info.s_m, other, set())
        )
        if not independence_ok:
            witnesses.append("s_m is d-connected to c + s_mc given the empty set")

    effective_dims = dict(dims) if dims is not None else derive_dims(g)
    total_dim_c = sum(effective_dims[v] for v in info.c)

    minimal_ok: bool | None = None
    if dims is not None:
        oracle = brute_force_minimal_c(g, mask, dims)
        minimal_ok = total_dim_c == oracle.total_dim
        if not minimal_ok:
            witnesses.append(
                f"c has total dimension {total_dim_c}, minimum is {oracle.total_dim} "
                f"(achieved by {sorted(oracle.c)})"
            )

    return ConditionReport(
        invertible_masked=invertible_masked,
        invertible_visible=invertible_visible,
        recoverable_from_masked=recoverable,
        independence_ok=independence_ok,
        total_dim_c=total_dim_c,
        minimal_ok=minimal_ok,
        witnesses=tuple(witnesses),
    )


def brute_force_minimal_c(
    g: LatentGraph,
    mask: Mask,
    dims: Mapping[NodeId, int],
    max_latents: int = 12,
) -> OracleResult:
    """Exhaustive search for the minimal shared set, independent of the
    backtracking algorithm.

    Latent subsets are tried in order of (total dimension, lexicographic
    members).  For each candidate ``C'`` the masked-side noise is forced to
    ``S' = exogenous ancestors of the mask minus closure(C')`` and the
    candidate is accepted when the mask is determined by ``C' + S'``, the
    pair is recoverable from the mask, and ``S'`` is d-separated from
    ``C' + visible``.  Same-dimension alternatives are reported as ties.
    """
    _require_valid(g)
    masked, visible = _split_mask(g, mask)
    latents = sorted(g.latents)
    if len(latents) > max_latents:
        raise ValueError(
            f"graph has {len(latents)} latents, above the exhaustive-search cap {max_latents}"
        )

    exo_anc_masked = {
        v for v in (g.ancestors_of_set(masked) | masked) if g.kind(v) is NodeKind.EXOGENOUS
    }

    def satisfies(candidate: frozenset[NodeId]) -> tuple[bool, frozenset[NodeId]]:
        s_prime = frozenset(exo_anc_masked - information_closure(g, candidate))
        combined = information_closure(g, candidate | s_prime)
        if not masked <= combined:
            return False, s_prime
        if not (candidate | s_prime) <= information_closure(g, masked):
            return False, s_prime
        other = candidate | visible
        if s_prime and not d_separated(g, s_prime, other, set()):
            return False, s_prime
        return True, s_prime

    subsets = sorted(
        (frozenset(latents[i] for i in range(len(latents)) if bits >> i & 1) for bits in range(1 << len(latents))),
        key=lambda s: (sum(dims[v] for v in s), tuple(sorted(s))),
    )

    best: OracleResult | None = None
    ties: list[frozenset[NodeId]] = []
    for candidate in subsets:
        total = sum(dims[v] for v in candidate)
        if best is not None and total > best.total_dim:
            break
        ok, s_prime = satisfies(candidate)
        if not ok:
            continue
        if best is None:
            best = OracleResult(c=candidate, s_m=s_prime, total_dim=total)
        else:
            ties.append(candidate)
    if best is None:
        raise RuntimeError("exhaustive search found no satisfying subset; graph invariants violated")
    if ties:
        best = OracleResult(c=best.c, s_m=best.s_m, total_dim=best.total_dim, ties=tuple(ties))
    return best


def level_stats(
    g: LatentGraph,
    c: Iterable[NodeId],
    dims: Mapping[NodeId, int] | None = None,
) -> dict[str, float]:
    """Aggregate the levels (longest path down to an observable) and total
    dimension of a latent set; all zeros for the empty set."""
    c = sorted(set(c))
    non_latent = [v for v in c if g.kind(v) is not NodeKind.LATENT]
    if non_latent:
        raise ValueError(f"level stats are defined for latents only, got {non_latent}")
    if not c:
        return {"max_level": 0, "mean_level": 0.0, "total_dim": 0}
    effective_dims = dict(dims) if dims is not None else derive_dims(g)
    levels = [g.topo_depth(v) for v in c]
    return {
        "max_level": max(levels),
        "mean_level": sum(levels) / len(levels),
        "total_dim": sum(effective_dims[v] for v in c),
    }
