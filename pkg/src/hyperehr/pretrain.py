"""Stage-1 contrastive pretraining of entity and visit embeddings.

Two independently augmented views of each domain hypergraph are encoded per
epoch and pulled together by a three-level objective: node-level InfoNCE,
hyperedge-level InfoNCE (weighted by ``level_weight_edge``) and a
membership-level term (weighted by ``level_weight_membership``) that pairs
each surviving node of view 1 with one uniformly sampled incident hyperedge
surviving in view 2. Rows dropped by either view are excluded from the
corresponding term. After training, embeddings are exported from a
full-graph, unaugmented forward pass.
"""

from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .corpus import DOMAINS, CodeHierarchy, Domain, EHRCorpus
from .encoder import (
    DTYPE,
    EmbeddingSpace,
    EncoderConfig,
    HypergraphEncoder,
    KnowledgeBias,
    build_knowledge_bias,
)
from .errors import ConfigError, DataError, NumericError
from .hypergraph import AugmentRates, AugmentedView, Hypergraph, augment, full_view
from .utils import canonical_json, sha256_hex, stable_seed

logger = logging.getLogger(__name__)

EMBEDDINGS_FORMAT = "hyperehr-medrep-v1"


def info_nce(u: torch.Tensor, v: torch.Tensor, temperature: float) -> torch.Tensor:
    """Contrastive alignment of index-paired rows.

    Inner-product similarity; row i of ``u`` is positive with row i of ``v``
    and the denominator runs over all rows of ``v`` (including i). With a
    single row the softmax is a single term and the loss is exactly zero.
    """
    if u.shape != v.shape:
        raise DataError(f"row shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")
    if u.shape[0] == 0:
        raise DataError("info_nce undefined for an empty batch (mean over N=0)")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    logits = (u @ v.T) / temperature
    return -(logits.diagonal() - logits.logsumexp(dim=1)).mean()


def contrastive_loss(
    space1: EmbeddingSpace,
    space2: EmbeddingSpace,
    view1: AugmentedView,
    view2: AugmentedView,
    temperature: float,
    level_weight_edge: float = 1.0,
    level_weight_membership: float = 1.0,
    rng: np.random.Generator | None = None,
    return_parts: bool = False,
):
    """Three-level objective over two encoded views of one hypergraph.

    Level terms whose survivor set is empty contribute zero with a warning.
    The membership pairing is resampled from ``rng`` on every call.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    zero = space1.Z.sum() * 0.0
    parts = {"node": zero, "edge": zero, "membership": zero}

    both_nodes = np.flatnonzero(view1.kept_nodes & view2.kept_nodes)
    if len(both_nodes):
        parts["node"] = info_nce(
            space1.Z[both_nodes], space2.Z[both_nodes], temperature
        )
    else:
        warnings.warn("contrastive_loss: node-level term has no surviving rows")

    both_edges = np.flatnonzero(view1.alive_hyperedges & view2.alive_hyperedges)
    if len(both_edges):
        parts["edge"] = info_nce(
            space1.U[both_edges], space2.U[both_edges], temperature
        )
    else:
        warnings.warn("contrastive_loss: hyperedge-level term has no surviving rows")

    pairs2 = view2.surviving_pairs
    node_ids, edge_ids = [], []
    if len(pairs2):
        candidates: dict[int, np.ndarray] = {}
        order = np.argsort(pairs2[:, 0], kind="stable")
        sorted_pairs = pairs2[order]
        bounds = np.searchsorted(
            sorted_pairs[:, 0], np.arange(view1.base.num_nodes + 1)
        )
        for i in np.flatnonzero(view1.kept_nodes):
            lo, hi = bounds[i], bounds[i + 1]
            if lo < hi:
                node_ids.append(i)
                edge_ids.append(int(sorted_pairs[lo + rng.integers(hi - lo), 1]))
    if node_ids:
        parts["membership"] = info_nce(
            space1.Z[np.asarray(node_ids)],
            space2.U[np.asarray(edge_ids)],
            temperature,
        )
    else:
        warnings.warn("contrastive_loss: membership-level term has no surviving rows")

    total = (
        parts["node"]
        + level_weight_edge * parts["edge"]
        + level_weight_membership * parts["membership"]
    )
    if return_parts:
        return total, parts
    return total


@dataclass(frozen=True)
class PretrainedEmbeddings:
    """Exported entity and training-visit embeddings for all three domains."""

    entity: Mapping[Domain, np.ndarray]
    visit: Mapping[Domain, np.ndarray]
    visit_ref: Mapping[Domain, tuple[tuple[str, int], ...]]
    config_digest: str
    corpus_digest: str

    def __post_init__(self):
        for domain in DOMAINS:
            if len(self.visit[domain]) != len(self.visit_ref[domain]):
                raise DataError(
                    f"{domain.value}: visit rows and visit_ref lengths differ"
                )

    @property
    def dim(self) -> int:
        return self.entity[Domain.DIAG].shape[1]

    def save(self, path: str | Path) -> None:
        arrays = {}
        for domain in DOMAINS:
            arrays[f"entity_{domain.value}"] = self.entity[domain]
            arrays[f"visit_{domain.value}"] = self.visit[domain]
        buffer = io.BytesIO()
        np.savez(buffer, **arrays)
        path = Path(path)
        path.write_bytes(buffer.getvalue())
        sidecar = {
            "format": EMBEDDINGS_FORMAT,
            "config_digest": self.config_digest,
            "corpus_digest": self.corpus_digest,
            "visit_ref": {
                d.value: [[pid, pos] for pid, pos in self.visit_ref[d]]
                for d in DOMAINS
            },
        }
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(sidecar, indent=1, sort_keys=True)
        )

    @classmethod
    def load(cls, path: str | Path) -> "PretrainedEmbeddings":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        if sidecar.get("format") != EMBEDDINGS_FORMAT:
            raise DataError(
                f"unsupported embedding bundle format {sidecar.get('format')!r}"
            )
        arrays = np.load(io.BytesIO(path.read_bytes()))
        return cls(
            entity={d: arrays[f"entity_{d.value}"] for d in DOMAINS},
            visit={d: arrays[f"visit_{d.value}"] for d in DOMAINS},
            visit_ref={
                d: tuple((pid, int(pos)) for pid, pos in sidecar["visit_ref"][d.value])
                for d in DOMAINS
            },
            config_digest=sidecar["config_digest"],
            corpus_digest=sidecar["corpus_digest"],
        )

    def digest(self) -> str:
        parts = [self.config_digest, self.corpus_digest]
        for domain in DOMAINS:
            parts.append(sha256_hex(self.entity[domain].tobytes()))
            parts.append(sha256_hex(self.visit[domain].tobytes()))
        return sha256_hex(canonical_json(parts))


class HypergraphPretrainer(BaseEstimator):
    """Contrastive pretrainer over the three domain hypergraphs.

    scikit-learn conventions: constructor stores hyperparameters verbatim,
    ``fit`` learns and exposes trailing-underscore attributes
    (``embeddings_``, ``encoders_``, ``loss_history_``).

    Parameters mirror the search space: ``epochs`` of two-view contrastive
    training per domain with an RMSprop optimizer (momentum-free, adaptive)
    and decoupled weight decay via the optimizer's own term.
    """

    def __init__(
        self,
        dim: int = 64,
        layers: int = 2,
        heads: int = 4,
        max_path_distance: int = 8,
        pre_norm: bool = False,
        temperature: float = 0.5,
        level_weight_edge: float = 1.0,
        level_weight_membership: float = 1.0,
        epochs: int = 300,
        learning_rate: float = 1e-3,
        weight_decay: float = 1e-4,
        node_drop: float = 0.2,
        incidence_drop: float = 0.2,
        feature_drop: float = 0.2,
        resample_views: bool = False,
        use_knowledge_bias: bool = True,
        seed: int = 0,
    ):
        self.dim = dim
        self.layers = layers
        self.heads = heads
        self.max_path_distance = max_path_distance
        self.pre_norm = pre_norm
        self.temperature = temperature
        self.level_weight_edge = level_weight_edge
        self.level_weight_membership = level_weight_membership
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.node_drop = node_drop
        self.incidence_drop = incidence_drop
        self.feature_drop = feature_drop
        self.resample_views = resample_views
        self.use_knowledge_bias = use_knowledge_bias
        self.seed = seed

    # -- configuration ----------------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            dim=self.dim,
            layers=self.layers,
            heads=self.heads,
            max_path_distance=self.max_path_distance,
            pre_norm=self.pre_norm,
        )

    def config_digest(self) -> str:
        return sha256_hex(canonical_json(self.get_params()))

    def _validate(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.level_weight_edge < 0 or self.level_weight_membership < 0:
            raise ConfigError("level weights must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")

    # -- fitting -----------------------------------------------------------

    def fit(
        self,
        corpus: EHRCorpus,
        hierarchies: Mapping[Domain, CodeHierarchy] | None = None,
    ) -> "HypergraphPretrainer":
        from .hypergraph import construct_hypergraphs

        self._validate()
        hypergraphs = construct_hypergraphs(corpus)
        rates = AugmentRates(self.node_drop, self.incidence_drop, self.feature_drop)

        self.encoders_ = {}
        self.loss_history_ = {}
        entity, visit, refs = {}, {}, {}
        for domain in DOMAINS:
            graph = hypergraphs[domain]
            if graph.num_nodes == 0 or graph.num_hyperedges == 0:
                logger.info("pretrain: skipping empty %s hypergraph", domain.value)
                entity[domain] = np.zeros((graph.num_nodes, self.dim))
                visit[domain] = np.zeros((0, self.dim))
                refs[domain] = ()
                self.loss_history_[domain] = []
                continue
            knowledge = None
            if self.use_knowledge_bias and hierarchies and domain in hierarchies:
                knowledge = build_knowledge_bias(
                    hierarchies[domain], corpus.vocab(domain), self.encoder_config()
                )
            encoder, losses = self._train_domain(graph, rates, knowledge, domain)
            self.encoders_[domain] = encoder
            self.loss_history_[domain] = losses
            with torch.no_grad():
                space = encoder(full_view(graph, self.dim))
            entity[domain] = space.Z.numpy().copy()
            visit[domain] = space.U.numpy().copy()
            refs[domain] = graph.visit_ref

        self.embeddings_ = PretrainedEmbeddings(
            entity=entity,
            visit=visit,
            visit_ref=refs,
            config_digest=self.config_digest(),
            corpus_digest=corpus.digest(),
        )
        return self

    def _train_domain(
        self,
        graph: Hypergraph,
        rates: AugmentRates,
        knowledge: KnowledgeBias | None,
        domain: Domain,
    ):
        torch.manual_seed(stable_seed(self.seed, domain.value, "init"))
        encoder = HypergraphEncoder(graph.num_nodes, self.encoder_config(), knowledge)
        optimizer = torch.optim.RMSprop(
            encoder.parameters(),
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
        )
        pairing_rng = np.random.default_rng(stable_seed(self.seed, domain.value, "pair"))

        def make_views(tag):
            return (
                augment(graph, rates, stable_seed(self.seed, domain.value, tag, 1), self.dim),
                augment(graph, rates, stable_seed(self.seed, domain.value, tag, 2), self.dim),
            )

        # Alg-2 reading: views are fixed before the loop; resampling per
        # epoch is available behind the flag.
        view1, view2 = make_views("views")
        losses = []
        for epoch in range(self.epochs):
            if self.resample_views:
                view1, view2 = make_views(f"views-{epoch}")
            optimizer.zero_grad()
            space1 = encoder(view1)
            space2 = encoder(view2)
            loss = contrastive_loss(
                space1,
                space2,
                view1,
                view2,
                temperature=self.temperature,
                level_weight_edge=self.level_weight_edge,
                level_weight_membership=self.level_weight_membership,
                rng=pairing_rng,
            )
            if not torch.isfinite(loss):
                raise NumericError(
                    f"contrastive loss diverged at epoch {epoch} ({domain.value})"
                )
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        return encoder, losses
