"""Stage-2 recommender: fuses a patient's own history with retrieved similar
visits to score medication sets.

Per visit, domain visit vectors are mean-pooled entity embeddings refined by
multi-head attention over the full entity table. The health-status vector
(projection of diagnosis and procedure vectors) drives two channels: a
window-limited attention over the patient's past visits, and cross-attention
over the top-k most similar training visits retrieved by inner product in
the health-status subspace (keys: diagnosis+procedure hyperedge rows;
values: medication hyperedge rows). A softmax gate mixes the channels, and
medications are scored by a sigmoid over dot products with the medication
entity table.

Entity and visit tables are trainable and initialized from the stage-1
export when provided. Training minimizes binary cross entropy plus weighted
multi-label margin, interaction-penalty, in-batch alignment, and channel
orthogonality terms. All math runs in float64.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from .corpus import DOMAINS, DDIMatrix, Domain, EHRCorpus, Visit
from .encoder import DTYPE
from .errors import ConfigError, DataError, NumericError, ProvenanceError
from .hypergraph import construct_hypergraphs
from .pretrain import PretrainedEmbeddings, info_nce
from .utils import canonical_json, sha256_hex, stable_seed

logger = logging.getLogger(__name__)

EPS = 1e-8
CHECKPOINT_FORMAT = "hyperehr-simmr-v1"


# ---------------------------------------------------------------------------
# Losses (Eqs. written out so tests can pin them against scalar loops)


def bce_loss(labels: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy summed (not averaged) over the medication axis."""
    p = probs.clamp(EPS, 1.0 - EPS)
    return -(labels * p.log() + (1.0 - labels) * (1.0 - p).log()).sum()

def multilabel_margin_loss(labels: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Hinge on every (present, absent) pair, normalized by the vocabulary size.

    Empty positive or negative sets make the pair set empty and the loss zero.
    """
    pos = probs[labels > 0.5]
    neg = probs[labels <= 0.5]
    if pos.numel() == 0 or neg.numel() == 0:
        return probs.sum() * 0.0
    margins = 1.0 - (pos[:, None] - neg[None, :])
    return margins.clamp(min=0.0).sum() / labels.numel()


def ddi_loss(probs: torch.Tensor, ddi: torch.Tensor) -> torch.Tensor:
    """Interaction penalty sum_ij A_ij y_i y_j.

    The full double sum is kept as written, so each unordered interacting
    pair is counted twice; documented for comparability of magnitudes.
    """
    return probs @ ddi.to(probs.dtype) @ probs


def orthogonality_loss(v_hist: torch.Tensor, v_sim: torch.Tensor) -> torch.Tensor:
    """Absolute cosine similarity of the two channel vectors, in [0, 1].

    If either norm falls below the epsilon guard the loss is defined as zero
    (no direction to decorrelate).
    """
    nh, ns = v_hist.norm(), v_sim.norm()
    if float(nh) < EPS or float(ns) < EPS:
        return v_hist.sum() * 0.0
    return (v_hist @ v_sim).abs() / (nh * ns)


def alignment_loss(
    h_batch: torch.Tensor,
    vm_batch: torch.Tensor,
    uh_rows: torch.Tensor,
    um_rows: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """In-batch contrast tying each visit to its own hyperedge rows.

    Health-status vectors align with diagnosis+procedure hyperedge rows and
    medication visit vectors with medication hyperedge rows; negatives are
    the other batch members' rows. A batch of one yields exactly zero.
    """
    return info_nce(h_batch, uh_rows, temperature) + info_nce(
        vm_batch, um_rows, temperature
    )


def total_loss(
    bce: torch.Tensor,
    multi: torch.Tensor,
    ddi: torch.Tensor,
    align: torch.Tensor,
    orth: torch.Tensor,
    lambda_multi: float,
    lambda_ddi: float,
    lambda_aux: float,
) -> torch.Tensor:
    for name, lam in (
        ("lambda_multi", lambda_multi),
        ("lambda_ddi", lambda_ddi),
        ("lambda_aux", lambda_aux),
    ):
        if lam < 0:
            raise ConfigError(f"{name} must be non-negative, got {lam}")
    return bce + lambda_multi * multi + lambda_ddi * ddi + lambda_aux * (align + orth)


def select_medications(probs: np.ndarray, threshold: float) -> frozenset[int]:
    """Indices whose probability is >= threshold (inclusive comparison)."""
    return frozenset(int(i) for i in np.flatnonzero(probs >= threshold))


# ---------------------------------------------------------------------------
# Retrieval


@dataclass(frozen=True)
class RetrievalIndex:
    """Frozen similarity-search pool over training visits.

    Keys live in the health-status subspace (diagnosis + procedure hyperedge
    rows), values in the medication subspace; rows are index-aligned and
    annotated with (patient_id, visit position) for the exclusion rule.
    """

    keys: np.ndarray
    values: np.ndarray
    patient_ids: tuple[str, ...]
    positions: tuple[int, ...]

    def __post_init__(self):
        if not (
            len(self.keys) == len(self.values) == len(self.patient_ids) == len(self.positions)
        ):
            raise DataError("retrieval index rows must align")

    def __len__(self) -> int:
        return len(self.keys)


def retrieve_topk(
    query: np.ndarray,
    index: RetrievalIndex,
    k_sim: int,
    temperature: float = 1.0,
    exclude: tuple[str, int] | None = None,
) -> list[tuple[int, float]]:
    """Highest temperature-scaled inner-product keys, deterministically.

    Ties break toward the lower visit index. Rows belonging to the excluded
    patient at positions >= the excluded visit are never returned (the query
    itself and its future). ``k_sim`` larger than the surviving pool returns
    the whole pool with a warning; ``k_sim = 0`` returns an empty list.
    """
    if len(index) == 0:
        raise DataError("retrieval index is empty")
    if k_sim < 0:
        raise ConfigError("k_sim must be non-negative")
    if k_sim == 0:
        return []
    scores = index.keys @ np.asarray(query, dtype=index.keys.dtype) / temperature
    allowed = np.ones(len(index), dtype=bool)
    if exclude is not None:
        pid, pos = exclude
        for row, (rpid, rpos) in enumerate(zip(index.patient_ids, index.positions)):
            if rpid == pid and rpos >= pos:
                allowed[row] = False
    candidates = np.flatnonzero(allowed)
    if len(candidates) == 0:
        return []
    if k_sim > len(candidates):
        warnings.warn(
            f"retrieve_topk: k_sim={k_sim} exceeds pool size {len(candidates)}"
        )
        k_sim = len(candidates)
    order = candidates[np.lexsort((candidates, -scores[candidates]))]
    top = order[:k_sim]
    return [(int(row), float(scores[row])) for row in top]


# ---------------------------------------------------------------------------
# Network


class MultiHeadAttention(nn.Module):
    """Single-query multi-head attention with separate key/value inputs."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Linear(dim, dim, dtype=DTYPE)
        self.w_k = nn.Linear(dim, dim, dtype=DTYPE)
        self.w_v = nn.Linear(dim, dim, dtype=DTYPE)
        self.w_o = nn.Linear(dim, dim, dtype=DTYPE)
        self.drop = nn.Dropout(dropout)

    def forward(self, query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor):
        q = self.w_q(query).view(self.heads, self.head_dim)
        k = self.w_k(keys).view(-1, self.heads, self.head_dim).permute(1, 0, 2)
        v = self.w_v(values).view(-1, self.heads, self.head_dim).permute(1, 0, 2)
        logits = (k @ q[:, :, None]).squeeze(-1) / math.sqrt(self.head_dim)  # [H, K]
        weights = self.drop(torch.softmax(logits, dim=-1))
        mixed = (weights[:, None, :] @ v).squeeze(1)  # [H, dh]
        return self.w_o(mixed.reshape(-1))


@dataclass(frozen=True)
class TrainVisitIndex:
    """Unified ordering of training visits with per-domain table rows.

    ``rows[domain][t]`` is the row of visit t in that domain's hyperedge
    table, or -1 when the visit had no codes in the domain.
    """

    refs: tuple[tuple[str, int], ...]
    rows: Mapping[Domain, np.ndarray]


def build_train_visit_index(
    corpus: EHRCorpus, visit_ref: Mapping[Domain, Sequence[tuple[str, int]]]
) -> TrainVisitIndex:
    refs = [
        (p.patient_id, t)
        for p in corpus.patients_in("train")
        for t in range(len(p.visits))
    ]
    rows = {}
    for domain in DOMAINS:
        lookup = {tuple(ref): i for i, ref in enumerate(visit_ref[domain])}
        rows[domain] = np.array([lookup.get(ref, -1) for ref in refs], dtype=np.int64)
    return TrainVisitIndex(tuple(refs), rows)


@dataclass
class VisitContext:
    """Everything computed for one visit; gate weights feed interpretability logs."""

    v_diag: torch.Tensor
    v_proc: torch.Tensor
    health: torch.Tensor
    v_hist: torch.Tensor
    v_sim: torch.Tensor
    alpha_hist: float
    alpha_sim: float
    fused: torch.Tensor
    probs: torch.Tensor
    retrieved: list[tuple[int, float]]


class RecommenderNet(nn.Module):
    def __init__(
        self,
        vocab_sizes: Mapping[Domain, int],
        table_sizes: Mapping[Domain, int],
        index: TrainVisitIndex,
        dim: int,
        heads: int,
        window: int,
        k_sim: int,
        temperature: float,
        dropout: float,
        no_sim: bool,
        no_hist: bool,
        seed: int = 0,
    ):
        super().__init__()
        if no_sim and no_hist:
            raise ConfigError("no_sim and no_hist cannot both be set")
        self.index = index
        self.dim = dim
        self.window = window
        self.k_sim = k_sim
        self.temperature = temperature
        self.no_sim = no_sim
        self.no_hist = no_hist
        torch.manual_seed(stable_seed(seed, "recommender-init"))
        bound = 1.0 / math.sqrt(dim)

        def table(n):
            return nn.Parameter(torch.empty(n, dim, dtype=DTYPE).uniform_(-bound, bound))

        self.entity = nn.ParameterDict(
            {d.value: table(vocab_sizes[d]) for d in DOMAINS}
        )
        self.visit_table = nn.ParameterDict(
            {d.value: table(table_sizes[d]) for d in DOMAINS}
        )
        self.visit_attn = nn.ModuleDict(
            {d.value: MultiHeadAttention(dim, heads, dropout) for d in DOMAINS}
        )
        # Identity-block init: at initialization h = v_diag + v_proc.
        self.health_proj = nn.Linear(2 * dim, dim, dtype=DTYPE)
        with torch.no_grad():
            eye = torch.eye(dim, dtype=DTYPE)
            self.health_proj.weight.copy_(torch.cat([eye, eye], dim=1))
            self.health_proj.bias.zero_()
        self.hist_attn = MultiHeadAttention(dim, heads, dropout)
        self.sim_attn = MultiHeadAttention(dim, heads, dropout)
        self.gate = nn.Sequential(
            nn.Linear(2 * dim, dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(dim, 2, dtype=DTYPE),
        )
        self.no_evidence_bias = nn.Parameter(torch.zeros(2, dtype=DTYPE))

    # -- initialization from stage 1 ---------------------------------------

    def load_pretrained(self, pretrained: PretrainedEmbeddings) -> None:
        for domain in DOMAINS:
            ent = torch.as_tensor(pretrained.entity[domain], dtype=DTYPE)
            vis = torch.as_tensor(pretrained.visit[domain], dtype=DTYPE)
            if ent.shape != self.entity[domain.value].shape:
                raise DataError(
                    f"pretrained {domain.value} entity table has shape "
                    f"{tuple(ent.shape)}, expected "
                    f"{tuple(self.entity[domain.value].shape)}"
                )
            if vis.shape != self.visit_table[domain.value].shape:
                raise DataError(
                    f"pretrained {domain.value} visit table has shape "
                    f"{tuple(vis.shape)}, expected "
                    f"{tuple(self.visit_table[domain.value].shape)}"
                )
            with torch.no_grad():
                self.entity[domain.value].copy_(ent)
                self.visit_table[domain.value].copy_(vis)

    def freeze_tables(self) -> None:
        for domain in DOMAINS:
            self.entity[domain.value].requires_grad_(False)
            self.visit_table[domain.value].requires_grad_(False)

    # -- building blocks ----------------------------------------------------

    def visit_repr(self, members, domain: Domain) -> torch.Tensor:
        """Mean-pooled member embeddings refined by attention over the table."""
        table = self.entity[domain.value]
        if table.shape[0] == 0:
            return torch.zeros(self.dim, dtype=DTYPE)
        idx = sorted(members)
        if idx:
            query = table[idx].mean(dim=0)
        else:
            query = torch.zeros(self.dim, dtype=DTYPE)
        return self.visit_attn[domain.value](query, table, table)

    def health(self, v_diag: torch.Tensor, v_proc: torch.Tensor) -> torch.Tensor:
        return self.health_proj(torch.cat([v_diag, v_proc]))

    def past_visit_embedding(self, visit: Visit) -> torch.Tensor:
        """Past visits expose their medications; sum the three domain vectors."""
        return (
            self.visit_repr(visit.diag, Domain.DIAG)
            + self.visit_repr(visit.proc, Domain.PROC)
            + self.visit_repr(visit.med, Domain.MED)
        )

    def hist_channel(self, h: torch.Tensor, history: Sequence[Visit]) -> torch.Tensor:
        """Residual attention over the window of most recent past visits.

        An empty window passes the health-status vector through unchanged, so
        the channel always carries the current visit's own information.
        """
        recent = list(history)[-self.window:] if self.window > 0 else []
        if not recent:
            return h
        stack = torch.stack([self.past_visit_embedding(v) for v in recent])
        return h + self.hist_attn(h, stack, stack)

    def retrieval_keys(self) -> torch.Tensor:
        """Health-status rows: diagnosis + procedure hyperedge tables, aligned
        to the unified training-visit order (missing-domain rows contribute 0)."""
        out = torch.zeros(len(self.index.refs), self.dim, dtype=DTYPE)
        for domain in (Domain.DIAG, Domain.PROC):
            rows = self.index.rows[domain]
            present = rows >= 0
            if present.any():
                out[np.flatnonzero(present)] += self.visit_table[domain.value][
                    rows[present]
                ]
        return out

    def retrieval_values(self) -> torch.Tensor:
        out = torch.zeros(len(self.index.refs), self.dim, dtype=DTYPE)
        rows = self.index.rows[Domain.MED]
        present = rows >= 0
        if present.any():
            out[np.flatnonzero(present)] += self.visit_table[Domain.MED.value][
                rows[present]
            ]
        return out

    def build_retrieval_index(self) -> RetrievalIndex:
        """Frozen snapshot of the current tables for inference-time retrieval."""
        with torch.no_grad():
            keys = self.retrieval_keys().numpy().copy()
            values = self.retrieval_values().numpy().copy()
        pids = tuple(pid for pid, _ in self.index.refs)
        positions = tuple(pos for _, pos in self.index.refs)
        return RetrievalIndex(keys, values, pids, positions)

    def sim_channel(
        self, h: torch.Tensor, retrieved: list[tuple[int, float]]
    ) -> tuple[torch.Tensor, bool]:
        """Cross-attention with health-status keys and medication values."""
        if not retrieved:
            return torch.zeros(self.dim, dtype=DTYPE), True
        rows = [row for row, _ in retrieved]
        keys = self.retrieval_keys()[rows]
        values = self.retrieval_values()[rows]
        return self.sim_attn(h, keys, values), False

    def fuse(
        self, v_hist: torch.Tensor, v_sim: torch.Tensor, no_evidence: bool
    ) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.gate(torch.cat([v_hist, v_sim]))
        if no_evidence:
            logits = logits + self.no_evidence_bias
        alpha = torch.softmax(logits, dim=0)
        return alpha[0] * v_hist + alpha[1] * v_sim, alpha

    def predict_probs(self, fused: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.entity[Domain.MED.value] @ fused)

    # -- full per-visit pass -------------------------------------------------

    def forward_visit(
        self,
        history: Sequence[Visit],
        diag,
        proc,
        exclude: tuple[str, int] | None = None,
    ) -> VisitContext:
        v_diag = self.visit_repr(diag, Domain.DIAG)
        v_proc = self.visit_repr(proc, Domain.PROC)
        h = self.health(v_diag, v_proc)

        v_hist = self.hist_channel(h, history) if not self.no_hist else h * 0.0

        sim_enabled = not self.no_sim and self.k_sim > 0 and len(self.index.refs) > 0
        retrieved: list[tuple[int, float]] = []
        if sim_enabled:
            with torch.no_grad():
                keys = self.retrieval_keys().numpy()
            index = RetrievalIndex(
                keys,
                keys,  # values unused for ranking
                tuple(pid for pid, _ in self.index.refs),
                tuple(pos for _, pos in self.index.refs),
            )
            retrieved = retrieve_topk(
                h.detach().numpy(), index, self.k_sim, self.temperature, exclude
            )
            v_sim, no_evidence = self.sim_channel(h, retrieved)
        else:
            v_sim, no_evidence = torch.zeros(self.dim, dtype=DTYPE), True

        if self.no_hist:
            v_sim_only, _ = (v_sim, None)
            fused = v_sim_only
            alpha = (0.0, 1.0)
        elif not sim_enabled:
            # Statically disabled channel: exactly the history-only path.
            fused = v_hist
            alpha = (1.0, 0.0)
        else:
            fused, alpha_t = self.fuse(v_hist, v_sim, no_evidence)
            alpha = (float(alpha_t[0]), float(alpha_t[1]))

        probs = self.predict_probs(fused)
        return VisitContext(
            v_diag=v_diag,
            v_proc=v_proc,
            health=h,
            v_hist=v_hist,
            v_sim=v_sim,
            alpha_hist=alpha[0],
            alpha_sim=alpha[1],
            fused=fused,
            probs=probs,
            retrieved=retrieved,
        )


# ---------------------------------------------------------------------------
# Estimator


@dataclass
class VisitPrediction:
    patient_id: str
    visit_index: int
    visit_length: int
    probabilities: np.ndarray
    selected: frozenset[int]
    truth: frozenset[int]
    alpha_hist: float
    alpha_sim: float


@dataclass
class RecommendOutput:
    probabilities: np.ndarray
    selected: frozenset[int]
    alpha_hist: float
    alpha_sim: float


class MedicationRecommender(BaseEstimator):
    """Similarity-enhanced medication recommender (scikit-learn style).

    ``fit(corpus, ddi=..., pretrained=...)`` trains on the corpus's train
    split, selecting the best epoch by validation Jaccard. ``pretrained=None``
    is the random-initialization ablation; ``freeze_embeddings`` keeps the
    initialized tables fixed. ``no_sim`` / ``no_hist`` disable one channel.
    """

    def __init__(
        self,
        dim: int = 64,
        heads: int = 4,
        window: int = 8,
        k_sim: int = 10,
        threshold: float = 0.5,
        lambda_multi: float = 0.1,
        lambda_ddi: float = 0.05,
        lambda_aux: float = 0.1,
        temperature: float = 0.5,
        learning_rate: float = 1e-3,
        weight_decay: float = 1e-5,
        dropout: float = 0.0,
        batch_size: int = 16,
        epochs: int = 50,
        no_sim: bool = False,
        no_hist: bool = False,
        freeze_embeddings: bool = False,
        seed: int = 0,
    ):
        self.dim = dim
        self.heads = heads
        self.window = window
        self.k_sim = k_sim
        self.threshold = threshold
        self.lambda_multi = lambda_multi
        self.lambda_ddi = lambda_ddi
        self.lambda_aux = lambda_aux
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.no_sim = no_sim
        self.no_hist = no_hist
        self.freeze_embeddings = freeze_embeddings
        self.seed = seed

    def config_digest(self) -> str:
        return sha256_hex(canonical_json(self.get_params()))

    def _validate(self):
        for name in ("lambda_multi", "lambda_ddi", "lambda_aux"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    # -- fitting -------------------------------------------------------------

    def fit(
        self,
        corpus: EHRCorpus,
        ddi: DDIMatrix | None = None,
        pretrained: PretrainedEmbeddings | None = None,
    ) -> "MedicationRecommender":
        self._validate()
        corpus.validate()
        vocab_sizes = {d: len(corpus.vocab(d)) for d in DOMAINS}
        hypergraphs = construct_hypergraphs(corpus)
        visit_ref = {d: hypergraphs[d].visit_ref for d in DOMAINS}
        if pretrained is not None:
            for domain in DOMAINS:
                if pretrained.entity[domain].shape[0] != vocab_sizes[domain]:
                    raise DataError(
                        f"pretrained {domain.value} vocabulary size "
                        f"{pretrained.entity[domain].shape[0]} does not match "
                        f"corpus ({vocab_sizes[domain]})"
                    )
                if tuple(pretrained.visit_ref[domain]) != tuple(visit_ref[domain]):
                    raise DataError(
                        f"pretrained {domain.value} visit references do not "
                        "match the corpus training split"
                    )
            if pretrained.dim != self.dim:
                raise DataError(
                    f"pretrained dim {pretrained.dim} != recommender dim {self.dim}"
                )

        index = build_train_visit_index(corpus, visit_ref)
        table_sizes = {d: hypergraphs[d].num_hyperedges for d in DOMAINS}
        net = RecommenderNet(
            vocab_sizes,
            table_sizes,
            index,
            dim=self.dim,
            heads=self.heads,
            window=self.window,
            k_sim=self.k_sim,
            temperature=self.temperature,
            dropout=self.dropout,
            no_sim=self.no_sim,
            no_hist=self.no_hist,
            seed=self.seed,
        )
        if pretrained is not None:
            net.load_pretrained(pretrained)
        if self.freeze_embeddings:
            if pretrained is None:
                warnings.warn("freeze_embeddings without pretrained tables")
            net.freeze_tables()

        ddi_matrix = ddi if ddi is not None else DDIMatrix.empty(vocab_sizes[Domain.MED])
        if ddi_matrix.matrix.shape[0] != vocab_sizes[Domain.MED]:
            raise DataError("DDI matrix size does not match medication vocabulary")
        ddi_t = torch.as_tensor(ddi_matrix.matrix, dtype=DTYPE)

        self.net_ = net
        self.ddi_ = ddi_matrix
        self.corpus_digest_ = corpus.digest()
        self.vocab_sizes_ = vocab_sizes
        self._train(corpus, net, ddi_t)
        return self

    def _train(self, corpus: EHRCorpus, net: RecommenderNet, ddi_t: torch.Tensor):
        med_size = self.vocab_sizes_[Domain.MED]
        examples = []
        row_of = {ref: i for i, ref in enumerate(net.index.refs)}
        for patient in corpus.patients_in("train"):
            for t in range(len(patient.visits)):
                examples.append((patient, t, row_of[(patient.patient_id, t)]))

        params = [p for p in net.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(
            params, lr=self.learning_rate, weight_decay=self.weight_decay
        )
        rng = np.random.default_rng(stable_seed(self.seed, "batch-order"))
        torch.manual_seed(stable_seed(self.seed, "train"))

        keys_t = net.retrieval_keys
        values_t = net.retrieval_values
        best_state, best_jaccard = None, -1.0
        self.train_loss_history_ = []
        has_val = len(corpus.patients_in("val")) > 0
        for epoch in range(self.epochs):
            net.train()
            order = rng.permutation(len(examples))
            epoch_loss = 0.0
            for start in range(0, len(order), self.batch_size):
                batch = [examples[i] for i in order[start : start + self.batch_size]]
                optimizer.zero_grad()
                per_visit, h_list, vm_list, rows = [], [], [], []
                for patient, t, row in batch:
                    visit = patient.visits[t]
                    ctx = net.forward_visit(
                        patient.visits[:t],
                        visit.diag,
                        visit.proc,
                        exclude=(patient.patient_id, t),
                    )
                    labels = torch.zeros(med_size, dtype=DTYPE)
                    labels[sorted(visit.med)] = 1.0
                    per_visit.append(
                        (
                            bce_loss(labels, ctx.probs),
                            multilabel_margin_loss(labels, ctx.probs),
                            ddi_loss(ctx.probs, ddi_t),
                            orthogonality_loss(ctx.v_hist, ctx.v_sim),
                        )
                    )
                    h_list.append(ctx.health)
                    vm_list.append(net.visit_repr(visit.med, Domain.MED))
                    rows.append(row)
                uh = keys_t()[rows]
                um = values_t()[rows]
                align = alignment_loss(
                    torch.stack(h_list), torch.stack(vm_list), uh, um, self.temperature
                )
                zero = align * 0.0
                loss = torch.stack(
                    [
                        total_loss(
                            b, m, d, zero, o,
                            self.lambda_multi, self.lambda_ddi, self.lambda_aux,
                        )
                        for b, m, d, o in per_visit
                    ]
                ).mean() + self.lambda_aux * align
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"training loss diverged at epoch {epoch}, "
                        f"batch starting at {start}"
                    )
                loss.backward()
                optimizer.step()
                epoch_loss += float(loss) * len(batch)
            self.train_loss_history_.append(epoch_loss / max(len(examples), 1))

            if has_val:
                val_jaccard = self._split_jaccard(corpus, "val")
                if val_jaccard > best_jaccard:
                    best_jaccard = val_jaccard
                    best_state = copy.deepcopy(net.state_dict())
        if best_state is not None:
            net.load_state_dict(best_state)
        self.best_val_jaccard_ = best_jaccard if best_state is not None else None

    def _split_jaccard(self, corpus: EHRCorpus, split: str) -> float:
        from .metrics import jaccard

        records = self.predict_records(corpus, split=split)
        truth = [[r.truth for r in patient] for patient in records]
        pred = [[r.selected for r in patient] for patient in records]
        return jaccard(truth, pred)

    # -- inference -----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise ConfigError("recommender is not fitted")

    def predict_records(
        self, corpus: EHRCorpus, split: str = "test", cold_start: bool = False
    ) -> list[list[VisitPrediction]]:
        """Per-patient, per-visit probabilities, selections and gate weights.

        ``cold_start`` restricts evaluation to each patient's first visit
        (the no-history setting). Current-visit medications are never inputs;
        they appear only as recorded truth.
        """
        self._check_fitted()
        if self.corpus_digest_ != corpus.digest():
            logger.warning("predicting on a corpus different from the fitted one")
        net = self.net_
        net.eval()
        out = []
        with torch.no_grad():
            for patient in corpus.patients_in(split):
                rows = []
                positions = [0] if cold_start else range(len(patient.visits))
                for t in positions:
                    visit = patient.visits[t]
                    ctx = net.forward_visit(
                        patient.visits[:t],
                        visit.diag,
                        visit.proc,
                        exclude=(patient.patient_id, t),
                    )
                    probs = ctx.probs.numpy().copy()
                    rows.append(
                        VisitPrediction(
                            patient_id=patient.patient_id,
                            visit_index=t,
                            visit_length=t + 1,
                            probabilities=probs,
                            selected=select_medications(probs, self.threshold),
                            truth=visit.med,
                            alpha_hist=ctx.alpha_hist,
                            alpha_sim=ctx.alpha_sim,
                        )
                    )
                out.append(rows)
        return out

    def predict(self, corpus: EHRCorpus, split: str = "test") -> list[list[frozenset[int]]]:
        return [
            [r.selected for r in patient]
            for patient in self.predict_records(corpus, split)
        ]

    def predict_proba(self, corpus: EHRCorpus, split: str = "test") -> list[list[np.ndarray]]:
        return [
            [r.probabilities for r in patient]
            for patient in self.predict_records(corpus, split)
        ]

    def recommend(self, history: Sequence[Visit], diag, proc) -> RecommendOutput:
        """Score one visit given its history and current diagnoses/procedures."""
        self._check_fitted()
        for domain, members in ((Domain.DIAG, diag), (Domain.PROC, proc)):
            size = self.vocab_sizes_[domain]
            if members and (min(members) < 0 or max(members) >= size):
                raise DataError(f"unknown {domain.value} code index")
        net = self.net_
        net.eval()
        with torch.no_grad():
            ctx = net.forward_visit(history, frozenset(diag), frozenset(proc))
        probs = ctx.probs.numpy().copy()
        return RecommendOutput(
            probabilities=probs,
            selected=select_medications(probs, self.threshold),
            alpha_hist=ctx.alpha_hist,
            alpha_sim=ctx.alpha_sim,
        )

    # -- persistence -----------------------------------------------------------

    def save(self, path: str | Path, medrep_digest: str | None = None) -> None:
        self._check_fitted()
        net = self.net_
        arrays = {
            name: tensor.detach().cpu().numpy()
            for name, tensor in net.state_dict().items()
        }
        arrays["__ddi__"] = self.ddi_.matrix
        buffer = io.BytesIO()
        np.savez(buffer, **arrays)
        path = Path(path)
        path.write_bytes(buffer.getvalue())
        sidecar = {
            "format": CHECKPOINT_FORMAT,
            "params": self.get_params(),
            "config_digest": self.config_digest(),
            "corpus_digest": self.corpus_digest_,
            "medrep_digest": medrep_digest,
            "vocab_sizes": {d.value: self.vocab_sizes_[d] for d in DOMAINS},
            "table_sizes": {
                d.value: int(self.net_.visit_table[d.value].shape[0]) for d in DOMAINS
            },
            "refs": [[pid, pos] for pid, pos in net.index.refs],
            "rows": {d.value: net.index.rows[d].tolist() for d in DOMAINS},
        }
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(sidecar, indent=1, sort_keys=True)
        )

    @classmethod
    def load(cls, path: str | Path) -> "MedicationRecommender":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        if sidecar.get("format") != CHECKPOINT_FORMAT:
            raise DataError(
                f"unsupported recommender checkpoint format {sidecar.get('format')!r}"
            )
        est = cls(**sidecar["params"])
        index = TrainVisitIndex(
            tuple((pid, int(pos)) for pid, pos in sidecar["refs"]),
            {d: np.asarray(sidecar["rows"][d.value], dtype=np.int64) for d in DOMAINS},
        )
        vocab_sizes = {d: sidecar["vocab_sizes"][d.value] for d in DOMAINS}
        table_sizes = {d: sidecar["table_sizes"][d.value] for d in DOMAINS}
        net = RecommenderNet(
            vocab_sizes,
            table_sizes,
            index,
            dim=est.dim,
            heads=est.heads,
            window=est.window,
            k_sim=est.k_sim,
            temperature=est.temperature,
            dropout=est.dropout,
            no_sim=est.no_sim,
            no_hist=est.no_hist,
            seed=est.seed,
        )
        arrays = np.load(io.BytesIO(path.read_bytes()))
        state = {
            name: torch.as_tensor(arrays[name])
            for name in arrays.files
            if name != "__ddi__"
        }
        net.load_state_dict(state)
        est.net_ = net
        est.ddi_ = DDIMatrix(arrays["__ddi__"])
        est.corpus_digest_ = sidecar["corpus_digest"]
        est.medrep_digest_ = sidecar.get("medrep_digest")
        est.vocab_sizes_ = vocab_sizes
        return est

    def check_lineage(self, corpus: EHRCorpus) -> None:
        """Refuse evaluation when the corpus is not the fitted one."""
        self._check_fitted()
        if corpus.digest() != self.corpus_digest_:
            raise ProvenanceError(
                "corpus digest does not match the checkpoint's training corpus"
            )
