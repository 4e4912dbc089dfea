"""Knowledge-aware hypergraph encoder.

Each layer combines two node updates and one hyperedge update:

* local message passing over incidences (hyperedges aggregate their member
  nodes, then nodes aggregate their fresh hyperedges), with direction-specific
  additive attention normalized per neighborhood;
* global all-pairs node attention whose pre-softmax logits carry an additive
  bias looked up from hierarchy path-distance buckets, so entities close in
  the code tree attend to each other more easily;
* the two node updates are summed and passed through a two-layer FFN with a
  residual connection and layer normalization (post-norm by default).

The exported embeddings are layer-wise averages of the per-layer node and
hyperedge states. Multi-head global attention splits the feature dimension
into head slices, scales logits by sqrt(head width), and concatenates head
outputs without an extra mixing projection. All math runs in float64.

Global attention is dense over all node pairs, O(|V|^2); medical
vocabularies are at most a few thousand codes, which keeps this tractable,
but it is a scaling limit.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import CodeHierarchy, CodeVocabulary, ROOT
from .errors import ConfigError, DataError, NumericError
from .hypergraph import AugmentedView
from .utils import canonical_json, sha256_hex

DTYPE = torch.float64
CHECKPOINT_FORMAT = "hyperehr-khge-v1"


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    max_path_distance: int = 8
    bias_bucket_count: int | None = None
    pre_norm: bool = False

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.max_path_distance < 1:
            raise ConfigError("max_path_distance must be >= 1")
        expected = self.max_path_distance + 1
        if self.bias_bucket_count is None:
            object.__setattr__(self, "bias_bucket_count", expected)
        elif self.bias_bucket_count != expected:
            raise ConfigError(
                f"bias_bucket_count must equal max_path_distance + 1 ({expected})"
            )

    def digest(self) -> str:
        return sha256_hex(canonical_json(asdict(self)))


@dataclass(frozen=True)
class KnowledgeBias:
    """Clipped tree path distances between vocabulary codes.

    ``bucket_index[i, j] = min(path_distance(i, j), max_path_distance)``; the
    learnable per-bucket, per-head bias lives in the encoder and is looked up
    through this matrix, which makes the resulting bias symmetric for every
    head by construction.
    """

    distance: np.ndarray
    max_path_distance: int

    @property
    def bucket_index(self) -> np.ndarray:
        return self.distance

    @property
    def num_buckets(self) -> int:
        return self.max_path_distance + 1


def build_knowledge_bias(
    hierarchy: CodeHierarchy, vocab: CodeVocabulary, config: EncoderConfig
) -> KnowledgeBias:
    """Pairwise tree path distances via root-path common prefixes.

    The distance between codes i and j is depth(i) + depth(j) minus twice the
    depth of their lowest common ancestor, computed by comparing root-to-code
    paths; values are clipped at ``config.max_path_distance``.
    """
    names: dict[str, int] = {}

    def node_id(name: str) -> int:
        return names.setdefault(name, len(names))

    paths = []
    for code in vocab.codes:
        chain = hierarchy.path_to_root(code)[::-1]  # ROOT first
        paths.append([node_id(n) for n in chain])
    n = len(paths)
    if n == 0:
        return KnowledgeBias(np.zeros((0, 0), dtype=np.int64), config.max_path_distance)
    width = max(len(p) for p in paths)
    padded = np.full((n, width), -1, dtype=np.int64)
    for i, p in enumerate(paths):
        padded[i, : len(p)] = p
    depth = np.array([len(p) - 1 for p in paths])

    eq = padded[:, None, :] == padded[None, :, :]
    eq &= padded[:, None, :] != -1
    prefix = np.cumprod(eq, axis=2).sum(axis=2)  # >= 1: ROOT is shared
    distance = depth[:, None] + depth[None, :] - 2 * (prefix - 1)
    np.fill_diagonal(distance, 0)
    return KnowledgeBias(
        np.minimum(distance, config.max_path_distance).astype(np.int64),
        config.max_path_distance,
    )


@dataclass
class EmbeddingSpace:
    """Forward-pass output: layer-averaged and per-layer node/hyperedge states."""

    Z: torch.Tensor
    U: torch.Tensor
    z_layers: list[torch.Tensor] = field(default_factory=list)
    u_layers: list[torch.Tensor] = field(default_factory=list)


def _masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row softmax restricted to ``mask``; all-masked rows come out zero."""
    neg = torch.finfo(logits.dtype).min
    filled = logits.masked_fill(~mask, neg)
    weights = torch.softmax(filled, dim=-1)
    return weights * mask.any(dim=-1, keepdim=True)


class LocalMessagePassing(nn.Module):
    """One round of attention-weighted node->hyperedge->node aggregation.

    Attention is additive: the logit for a (source, destination) pair is
    leaky_relu(a_src . W_msg(source) + a_dst . W_dst(destination)), softmaxed
    over each destination's surviving neighborhood. The two directions have
    independent parameters; the node update reads the *fresh* hyperedge
    states. This is the single place to swap in an alternative attention
    form.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.node_msg = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.node_att_dst = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.a_src_n2e = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.a_dst_n2e = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.edge_msg = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.edge_att_dst = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.a_src_e2n = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.a_dst_e2n = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.node_msg.in_features)
        for vec in (self.a_src_n2e, self.a_dst_n2e, self.a_src_e2n, self.a_dst_e2n):
            nn.init.uniform_(vec, -bound, bound)

    def edge_update(
        self, z: torch.Tensor, u_prev: torch.Tensor, incidence: torch.Tensor
    ) -> torch.Tensor:
        """u_j = sum over member nodes i of alpha_ij * W_msg z_i."""
        msgs = self.node_msg(z)
        logits = torch.nn.functional.leaky_relu(
            (self.edge_att_dst(u_prev) @ self.a_dst_n2e)[:, None]
            + (msgs @ self.a_src_n2e)[None, :]
        )
        alpha = _masked_softmax(logits, incidence)  # [E, N]
        return alpha @ msgs

    def node_update(
        self, u: torch.Tensor, z_prev: torch.Tensor, incidence: torch.Tensor
    ) -> torch.Tensor:
        """z_i = sum over incident hyperedges j of alpha_ij * W_msg u_j."""
        msgs = self.edge_msg(u)
        logits = torch.nn.functional.leaky_relu(
            (self.node_att_dst(z_prev) @ self.a_dst_e2n)[:, None]
            + (msgs @ self.a_src_e2n)[None, :]
        )
        alpha = _masked_softmax(logits, incidence.T)  # [N, E]
        return alpha @ msgs

    def forward(self, z, u_prev, incidence):
        u_next = self.edge_update(z, u_prev, incidence)
        z_local = self.node_update(u_next, z, incidence)
        return z_local, u_next


class GlobalBiasedAttention(nn.Module):
    """All-pairs multi-head node attention with an additive logit bias."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.w_k = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.w_v = nn.Linear(dim, dim, bias=False, dtype=DTYPE)

    def forward(self, z: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
        n = z.shape[0]

        def split(x):  # [N, d] -> [H, N, dh]
            return x.view(n, self.heads, self.head_dim).permute(1, 0, 2)

        q, k, v = split(self.w_q(z)), split(self.w_k(z)), split(self.w_v(z))
        logits = q @ k.transpose(1, 2)  # [H, N, N]
        if bias is not None:
            logits = logits + bias
        weights = torch.softmax(logits / math.sqrt(self.head_dim), dim=-1)
        out = weights @ v  # [H, N, dh]
        return out.permute(1, 0, 2).reshape(n, self.heads * self.head_dim)


class FusionBlock(nn.Module):
    """Two-layer FFN with residual and layer normalization."""

    def __init__(self, dim: int, pre_norm: bool):
        super().__init__()
        self.pre_norm = pre_norm
        self.ffn = nn.Sequential(
            nn.Linear(dim, dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(dim, dim, dtype=DTYPE),
        )
        self.norm = nn.LayerNorm(dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pre_norm:
            return x + self.ffn(self.norm(x))
        return self.norm(x + self.ffn(x))


class HypergraphEncoder(nn.Module):
    """Stack of local + global layers over one domain hypergraph.

    Owns the learnable node embedding table (scaled-uniform init) and, when a
    knowledge bias is supplied, one learnable scalar per (head, distance
    bucket), initialized to zero. ``forward_calls`` counts encoder passes so
    the two-views-per-epoch contract is checkable.
    """

    def __init__(
        self,
        num_nodes: int,
        config: EncoderConfig,
        knowledge: KnowledgeBias | None = None,
    ):
        super().__init__()
        self.config = config
        self.num_nodes = num_nodes
        bound = 1.0 / math.sqrt(config.dim)
        self.embedding = nn.Parameter(
            torch.empty(num_nodes, config.dim, dtype=DTYPE).uniform_(-bound, bound)
        )
        self.local_layers = nn.ModuleList(
            LocalMessagePassing(config.dim) for _ in range(config.layers)
        )
        self.global_layers = nn.ModuleList(
            GlobalBiasedAttention(config.dim, config.heads)
            for _ in range(config.layers)
        )
        self.fusion_layers = nn.ModuleList(
            FusionBlock(config.dim, config.pre_norm) for _ in range(config.layers)
        )
        if knowledge is not None:
            if knowledge.bucket_index.shape != (num_nodes, num_nodes):
                raise ConfigError("knowledge bias shape does not match num_nodes")
            self.bucket_bias = nn.Parameter(
                torch.zeros(config.heads, knowledge.num_buckets, dtype=DTYPE)
            )
            self.register_buffer(
                "bucket_index", torch.as_tensor(knowledge.bucket_index)
            )
        else:
            self.bucket_bias = None
            self.bucket_index = None
        self.forward_calls = 0

    def knowledge_bias_matrix(self) -> torch.Tensor | None:
        if self.bucket_bias is None:
            return None
        return self.bucket_bias[:, self.bucket_index]  # [H, N, N]

    def incidence_mask(self, view: AugmentedView) -> torch.Tensor:
        mask = torch.zeros(
            view.base.num_hyperedges, self.num_nodes, dtype=torch.bool
        )
        pairs = view.surviving_pairs
        if len(pairs):
            mask[pairs[:, 1], pairs[:, 0]] = True
        return mask

    def forward(self, view: AugmentedView) -> EmbeddingSpace:
        self.forward_calls += 1
        incidence = self.incidence_mask(view)
        feature_mask = torch.as_tensor(view.feature_mask, dtype=DTYPE)
        z = self.embedding * feature_mask

        # Layer-0 hyperedge state: mean of surviving member node embeddings.
        counts = incidence.sum(dim=1, keepdim=True).to(DTYPE)
        u = (incidence.to(DTYPE) @ z) / counts.clamp(min=1.0)

        bias = self.knowledge_bias_matrix()
        z_layers, u_layers = [], []
        for k, (local, glob, fuse) in enumerate(
            zip(self.local_layers, self.global_layers, self.fusion_layers)
        ):
            z_local, u = local(z, u, incidence)
            z_global = glob(z, bias)
            z = fuse(z_local + z_global)
            if not (torch.isfinite(z).all() and torch.isfinite(u).all()):
                raise NumericError(f"non-finite encoder state at layer {k}")
            z_layers.append(z)
            u_layers.append(u)
        return EmbeddingSpace(
            Z=torch.stack(z_layers).mean(dim=0),
            U=torch.stack(u_layers).mean(dim=0),
            z_layers=z_layers,
            u_layers=u_layers,
        )


# ---------------------------------------------------------------------------
# Checkpointing


def save_encoder_checkpoint(encoders: dict, config: EncoderConfig, path) -> None:
    """All encoder parameters for the three domains plus config and version."""
    arrays = {}
    meta = {"format": CHECKPOINT_FORMAT, "config": asdict(config), "domains": {}}
    for domain, encoder in encoders.items():
        key = domain.value if hasattr(domain, "value") else str(domain)
        meta["domains"][key] = {"num_nodes": encoder.num_nodes}
        for name, tensor in encoder.state_dict().items():
            arrays[f"{key}/{name}"] = tensor.detach().cpu().numpy()
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    payload = {"meta": meta}
    path = Path(path)
    path.write_bytes(buffer.getvalue())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(payload, indent=1))


def load_encoder_checkpoint(path, expected_config: EncoderConfig | None = None):
    """Rebuild the per-domain encoders; a config mismatch is an error."""
    from .corpus import Domain

    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())["meta"]
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported encoder checkpoint format {meta.get('format')!r}")
    config = EncoderConfig(**meta["config"])
    if expected_config is not None and config != expected_config:
        raise ConfigError(
            "encoder checkpoint config does not match the expected config"
        )
    arrays = np.load(io.BytesIO(path.read_bytes()))
    encoders = {}
    for key, info in meta["domains"].items():
        domain = Domain(key)
        state = {
            name.split("/", 1)[1]: torch.as_tensor(arrays[name])
            for name in arrays.files
            if name.startswith(f"{key}/")
        }
        has_bias = f"{key}/bucket_bias" in arrays.files
        knowledge = None
        if has_bias:
            knowledge = KnowledgeBias(
                state["bucket_index"].numpy(), config.max_path_distance
            )
        encoder = HypergraphEncoder(info["num_nodes"], config, knowledge)
        encoder.load_state_dict(state)
        encoders[domain] = encoder
    return encoders, config
