"""Per-domain visit hypergraphs and their stochastic augmented views.

One hypergraph per domain: nodes are the domain's vocabulary codes, one
hyperedge per training-split visit whose domain code set is nonempty.
Hyperedges are built from the training split only because the hyperedge
embeddings double as the retrieval pool at recommendation time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np

from .corpus import DOMAINS, Domain, EHRCorpus
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Hypergraph:
    domain: Domain
    num_nodes: int
    hyperedges: tuple[tuple[int, ...], ...]
    visit_ref: tuple[tuple[str, int], ...]
    skipped_visits: int = 0

    def __post_init__(self):
        if len(self.hyperedges) != len(self.visit_ref):
            raise DataError("hyperedges and visit_ref must align")
        for edge in self.hyperedges:
            if len(edge) == 0:
                raise DataError("empty hyperedge")

    @property
    def num_hyperedges(self) -> int:
        return len(self.hyperedges)

    @cached_property
    def _node_to_edges(self) -> tuple[tuple[int, ...], ...]:
        buckets: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for j, edge in enumerate(self.hyperedges):
            for i in edge:
                buckets[i].append(j)
        return tuple(tuple(b) for b in buckets)

    @cached_property
    def incidence_pairs(self) -> np.ndarray:
        """All (node, hyperedge) incidences as an int array of shape [P, 2]."""
        pairs = [(i, j) for j, edge in enumerate(self.hyperedges) for i in edge]
        if not pairs:
            return np.zeros((0, 2), dtype=np.int64)
        return np.asarray(pairs, dtype=np.int64)

    def incident_hyperedges(self, node: int) -> frozenset[int]:
        if not 0 <= node < self.num_nodes:
            raise DataError(f"node index {node} out of range [0, {self.num_nodes})")
        return frozenset(self._node_to_edges[node])

    def incident_nodes(self, hyperedge: int) -> frozenset[int]:
        if not 0 <= hyperedge < self.num_hyperedges:
            raise DataError(
                f"hyperedge index {hyperedge} out of range [0, {self.num_hyperedges})"
            )
        return frozenset(self.hyperedges[hyperedge])


def construct_hypergraphs(corpus: EHRCorpus) -> dict[Domain, Hypergraph]:
    """Build the three domain hypergraphs from the training split.

    Hyperedge order is corpus traversal order (patients, then visits within a
    patient). Visits with an empty domain set contribute no hyperedge in that
    domain; their count is recorded on the hypergraph.
    """
    edges: dict[Domain, list[tuple[int, ...]]] = {d: [] for d in DOMAINS}
    refs: dict[Domain, list[tuple[str, int]]] = {d: [] for d in DOMAINS}
    skipped = {d: 0 for d in DOMAINS}
    for patient in corpus.patients_in("train"):
        for t, visit in enumerate(patient.visits):
            for domain in DOMAINS:
                members = visit.domain_set(domain)
                if members:
                    edges[domain].append(tuple(sorted(members)))
                    refs[domain].append((patient.patient_id, t))
                else:
                    skipped[domain] += 1
    return {
        d: Hypergraph(
            domain=d,
            num_nodes=len(corpus.vocab(d)),
            hyperedges=tuple(edges[d]),
            visit_ref=tuple(refs[d]),
            skipped_visits=skipped[d],
        )
        for d in DOMAINS
    }


@dataclass(frozen=True)
class AugmentRates:
    node_drop: float = 0.2
    incidence_drop: float = 0.2
    feature_drop: float = 0.2

    def __post_init__(self):
        for name in ("node_drop", "incidence_drop", "feature_drop"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {rate}")


@dataclass(frozen=True)
class AugmentedView:
    """Masked view of a hypergraph; indices stay aligned with the base.

    A dropped node keeps its embedding row but loses all incidences and is
    masked out of node-level contrastive terms. A hyperedge that loses every
    incidence keeps its slot and is excluded from hyperedge-level objectives.
    """

    base: Hypergraph
    kept_nodes: np.ndarray
    kept_incidences: np.ndarray
    feature_mask: np.ndarray
    seed: int

    @cached_property
    def surviving_pairs(self) -> np.ndarray:
        pairs = self.base.incidence_pairs
        if len(pairs) == 0:
            return pairs
        alive = self.kept_incidences & self.kept_nodes[pairs[:, 0]]
        return pairs[alive]

    @cached_property
    def alive_hyperedges(self) -> np.ndarray:
        alive = np.zeros(self.base.num_hyperedges, dtype=bool)
        if len(self.surviving_pairs):
            alive[np.unique(self.surviving_pairs[:, 1])] = True
        return alive


def augment(
    h: Hypergraph, rates: AugmentRates, seed: int, feature_dim: int
) -> AugmentedView:
    """Independent Bernoulli drops of nodes, incidences and feature dims.

    Deterministic given ``seed``; masks are drawn in a fixed order (nodes,
    incidences, features) from one generator.
    """
    rng = np.random.default_rng(seed)
    kept_nodes = rng.random(h.num_nodes) >= rates.node_drop
    kept_incidences = rng.random(len(h.incidence_pairs)) >= rates.incidence_drop
    feature_mask = rng.random(feature_dim) >= rates.feature_drop
    return AugmentedView(h, kept_nodes, kept_incidences, feature_mask, seed)


def full_view(h: Hypergraph, feature_dim: int) -> AugmentedView:
    """The identity view: nothing dropped. Used for embedding export."""
    return AugmentedView(
        base=h,
        kept_nodes=np.ones(h.num_nodes, dtype=bool),
        kept_incidences=np.ones(len(h.incidence_pairs), dtype=bool),
        feature_mask=np.ones(feature_dim, dtype=bool),
        seed=-1,
    )
