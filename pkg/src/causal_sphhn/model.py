"""Spherical hypergraph network with causal aggregation.

Forward pass: project the last observed feature vector of every node onto
the unit hypersphere (keeping a softplus concentration read off the
unnormalized projection), run L rounds of angular attention within
hyperedges followed by per-context-type linear aggregation, inject causal
parents through a learned-temperature softmax over Granger F scores after
the final round, and classify with a linear head.

Ablation switches: ``euclidean`` skips all normalization (attention becomes
a plain dot product), ``pairwise`` expands hyperedges into 2-cliques,
``layers=0`` reduces to the projection, and an empty causal graph is
bit-identical to removing the causal path.

The batched implementation pads hyperedges and parent sets to rectangular
index arrays; the single-node operations (`project`, `edge_attention`,
`hyperedge_aggregate`, `causal_aggregate`) are straight-line references
used by tests and small-scale inspection.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .granger import CausalGraph
from .hypergraph import Dataset, Hyperedge, build_index
from .vmf import entropy_from_kappa

log = logging.getLogger(__name__)

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    layers: int = 2
    dropout: float = 0.2
    attn_temp_init: float = 20.0
    gamma_temp_init: float = 1.0
    kappa_init: float = 20.0
    euclidean: bool = False
    pairwise: bool = False

    def validate(self) -> None:
        if self.embed_dim < 2:
            raise ContractViolation("embed_dim must be >= 2")
        if self.layers < 0:
            raise ContractViolation("layers must be >= 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ContractViolation("dropout must be in [0, 1)")
        if self.attn_temp_init <= 0 or self.gamma_temp_init <= 0:
            raise ContractViolation("temperatures must be positive")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "layers": self.layers,
            "dropout": self.dropout,
            "attn_temp_init": self.attn_temp_init,
            "gamma_temp_init": self.gamma_temp_init,
            "kappa_init": self.kappa_init,
            "euclidean": self.euclidean,
            "pairwise": self.pairwise,
        }


@dataclass
class ModelParams:
    """Learnable tensors plus the shape metadata needed to rebuild them."""

    config: ModelConfig
    in_dim: int
    classes: int
    edge_types: tuple[str, ...]
    proj_w: Tensor
    proj_b: Tensor
    kappa_w: Tensor
    kappa_b: Tensor
    edge_w: dict[str, Tensor]
    attn_temp: Tensor
    causal_w: Tensor
    gamma_temp: Tensor
    head_w: Tensor
    head_b: Tensor

    def named(self) -> dict[str, Tensor]:
        out = {
            "proj_w": self.proj_w,
            "proj_b": self.proj_b,
            "kappa_w": self.kappa_w,
            "kappa_b": self.kappa_b,
        }
        for t in self.edge_types:
            out[f"edge_w:{t}"] = self.edge_w[t]
        out.update(
            attn_temp=self.attn_temp,
            causal_w=self.causal_w,
            gamma_temp=self.gamma_temp,
            head_w=self.head_w,
            head_b=self.head_b,
        )
        return out

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in self.named().items():
            v.data = np.array(values[k], dtype=np.float64).reshape(v.data.shape)


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_params(
    cfg: ModelConfig,
    in_dim: int,
    classes: int,
    edge_types: tuple[str, ...],
    rng: np.random.Generator,
) -> ModelParams:
    cfg.validate()
    d = cfg.embed_dim

    def glorot(rows, cols):
        std = np.sqrt(2.0 / (rows + cols))
        return Tensor(std * rng.standard_normal((rows, cols)), requires_grad=True)

    return ModelParams(
        config=cfg,
        in_dim=in_dim,
        classes=classes,
        edge_types=tuple(sorted(edge_types)),
        proj_w=glorot(d, in_dim),
        proj_b=Tensor(np.zeros(d), requires_grad=True),
        kappa_w=Tensor(np.zeros(d), requires_grad=True),
        kappa_b=Tensor(softplus_inverse(cfg.kappa_init), requires_grad=True),
        edge_w={t: glorot(d, d) for t in sorted(edge_types)},
        attn_temp=Tensor(cfg.attn_temp_init, requires_grad=True),
        causal_w=glorot(d, d),
        gamma_temp=Tensor(cfg.gamma_temp_init, requires_grad=True),
        head_w=Tensor(np.zeros((classes, d)), requires_grad=True),
        head_b=Tensor(np.zeros(classes), requires_grad=True),
    )


# --------------------------------------------------------------------------
# Compiled graph structure
# --------------------------------------------------------------------------


@dataclass
class GraphStructure:
    node_ids: list[str]
    features: np.ndarray  # (N, d) last observed timestep
    member_idx: np.ndarray  # (E, K) padded node rows
    member_mask: np.ndarray  # (E, K) bool
    type_rows: dict[str, np.ndarray]  # context type -> edge rows
    child_rows: np.ndarray  # (P,) nodes with causal parents
    parent_idx: np.ndarray  # (P, Kc) padded parent rows
    parent_mask: np.ndarray  # (P, Kc)
    parent_f: np.ndarray  # (P, Kc) Granger F statistics
    ghat: np.ndarray  # (P, Kc) reference softmax of F at temperature 1
    classes: int
    plans: dict = field(default_factory=dict)  # precomputed scatter plans


def _stable_masked_softmax(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    neg = np.where(mask, x, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(neg - mx), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s == 0.0, 1.0, s)


def pairwise_expand(edges: list[Hyperedge]) -> list[Hyperedge]:
    """Replace every hyperedge by the 2-cliques of its members."""
    out = []
    for e in edges:
        members = sorted(e.members)
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                out.append(
                    Hyperedge(
                        f"{e.edge_id}:{i}-{j}",
                        (members[i], members[j]),
                        e.context_type,
                    )
                )
    return out


def compile_structure(
    ds: Dataset, causal_graph: CausalGraph | None, cfg: ModelConfig
) -> GraphStructure:
    build_index(ds)  # validates incidence consistency
    index = ds.node_index()
    node_ids = [n.node_id for n in ds.nodes]
    features = np.stack([n.features[-1] for n in ds.nodes])

    edges = list(ds.hyperedges)
    if cfg.pairwise:
        edges = pairwise_expand(edges)
    n_edges = len(edges)
    k = max((len(e.members) for e in edges), default=2)
    member_idx = np.zeros((n_edges, k), dtype=np.int64)
    member_mask = np.zeros((n_edges, k), dtype=bool)
    type_lists: dict[str, list[int]] = {}
    for row, e in enumerate(edges):
        mem = [index[m] for m in e.members]
        member_idx[row, : len(mem)] = mem
        member_mask[row, : len(mem)] = True
        type_lists.setdefault(e.context_type, []).append(row)
    type_rows = {t: np.asarray(rows, dtype=np.int64) for t, rows in sorted(type_lists.items())}

    children: dict[str, list] = {}
    if causal_graph is not None:
        for e in causal_graph.edges:
            if e.src in index and e.dst in index:
                children.setdefault(e.dst, []).append(e)
    child_ids = sorted(children)
    p_rows = len(child_ids)
    kc = max((len(children[c]) for c in child_ids), default=1)
    child_rows = np.asarray([index[c] for c in child_ids], dtype=np.int64)
    parent_idx = np.zeros((p_rows, kc), dtype=np.int64)
    parent_mask = np.zeros((p_rows, kc), dtype=bool)
    parent_f = np.zeros((p_rows, kc))
    for r, cid in enumerate(child_ids):
        for c, edge in enumerate(sorted(children[cid], key=lambda e: e.src)):
            parent_idx[r, c] = index[edge.src]
            parent_mask[r, c] = True
            parent_f[r, c] = edge.f_statistic
    ghat = _stable_masked_softmax(parent_f, parent_mask) if p_rows else np.zeros((0, kc))

    n_nodes = len(node_ids)
    plans = {
        "members": ad.ScatterPlan(member_idx.reshape(-1), n_nodes),
        "parents": ad.ScatterPlan(parent_idx.reshape(-1), n_nodes),
        "children": ad.ScatterPlan(child_rows, n_nodes),
    }
    for t, rows in type_rows.items():
        plans[f"type_gather:{t}"] = ad.ScatterPlan(rows, n_edges)
        plans[f"type_scatter:{t}"] = ad.ScatterPlan(member_idx[rows].reshape(-1), n_nodes)
    if k == 2 and np.all(member_mask):
        # All-pair structure: the elementwise attention fast path applies.
        plans["pair:0"] = ad.ScatterPlan(member_idx[:, 0], n_nodes)
        plans["pair:1"] = ad.ScatterPlan(member_idx[:, 1], n_nodes)
        for t, rows in type_rows.items():
            plans[f"pair_scatter0:{t}"] = ad.ScatterPlan(member_idx[rows, 0], n_nodes)
            plans[f"pair_scatter1:{t}"] = ad.ScatterPlan(member_idx[rows, 1], n_nodes)

    return GraphStructure(
        node_ids=node_ids,
        features=features,
        member_idx=member_idx,
        member_mask=member_mask,
        type_rows=type_rows,
        child_rows=child_rows,
        parent_idx=parent_idx,
        parent_mask=parent_mask,
        parent_f=parent_f,
        ghat=ghat,
        classes=ds.classes,
        plans=plans,
    )


# --------------------------------------------------------------------------
# Batched forward
# --------------------------------------------------------------------------


@dataclass
class ModelRun:
    """Forward tensors kept alive so a loss can be built on top of them."""

    structure: GraphStructure
    kappa: Tensor
    layers: list[Tensor]
    alphas: list[Tensor]
    gamma: Tensor | None
    log_gamma: Tensor | None
    h_final: Tensor
    logits: Tensor
    log_probs: Tensor
    probs: Tensor
    entropy: Tensor


def _normalize_rows(t: Tensor, dim: int) -> Tensor:
    sq = (t * t).sum(axis=-1, keepdims=True)
    safe = sq.data > _NORM_EPS**2
    if not np.all(safe):
        log.debug("degenerate norm on %d rows; substituting basis vector", int((~safe).sum()))
    # Replace unsafe squared norms before the sqrt so its derivative stays
    # finite; the outer select routes those rows to the basis vector anyway.
    denom = ad.where(safe, sq, Tensor(np.ones_like(sq.data))).sqrt()
    e1 = np.zeros((1, dim))
    e1[0, 0] = 1.0
    return ad.where(safe, t / denom, Tensor(e1))


def run_model(
    structure: GraphStructure,
    params: ModelParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> ModelRun:
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    d = cfg.embed_dim
    n = len(structure.node_ids)
    if structure.features.shape[1] != params.in_dim:
        raise ContractViolation(
            f"feature dim {structure.features.shape[1]} != model in_dim {params.in_dim}"
        )
    if structure.classes != params.classes:
        raise ContractViolation("dataset classes do not match model head")
    missing = set(structure.type_rows) - set(params.edge_types)
    if missing:
        raise ContractViolation(f"no edge weights for context types {sorted(missing)}")
    if mode == "train" and cfg.dropout > 0.0 and rng is None:
        raise ContractViolation("train mode with dropout needs a generator")

    x = Tensor(structure.features)
    z = x @ params.proj_w.transpose((1, 0)) + params.proj_b
    z_norm = np.linalg.norm(z.data, axis=1, keepdims=True)
    proj_safe = z_norm > _NORM_EPS
    kappa_raw = (z @ params.kappa_w.reshape(d, 1)).reshape(n) + params.kappa_b
    kappa = ad.where(proj_safe.reshape(n), kappa_raw.softplus(), Tensor(np.zeros(n)))

    h = z if cfg.euclidean else _normalize_rows(z, d)
    layers = [h]
    alphas: list[Tensor] = []

    n_edges, k = structure.member_idx.shape
    flat_members = structure.member_idx.reshape(-1)
    attn_mask = structure.member_mask[:, None, :]  # mask over j within each edge

    pair_path = "pair:0" in structure.plans
    for _ in range(cfg.layers):
        if n_edges and pair_path:
            # 2-member edges: the softmax over {self, other} is a sigmoid of
            # the cosine gap, so everything stays elementwise.
            h0 = ad.gather_rows(h, structure.member_idx[:, 0], structure.plans["pair:0"])
            h1 = ad.gather_rows(h, structure.member_idx[:, 1], structure.plans["pair:1"])
            cos = (h0 * h1).sum(axis=-1, keepdims=True)
            a_self = (params.attn_temp * (1.0 - cos)).sigmoid()
            a_other = 1.0 - a_self
            aw = a_self.data.reshape(-1)
            alpha_mat = np.empty((n_edges, 2, 2))
            alpha_mat[:, 0, 0] = aw
            alpha_mat[:, 0, 1] = 1.0 - aw
            alpha_mat[:, 1, 1] = aw
            alpha_mat[:, 1, 0] = 1.0 - aw
            alphas.append(Tensor(alpha_mat))
            msg0 = a_self * h0 + a_other * h1
            msg1 = a_self * h1 + a_other * h0
            m = Tensor(np.zeros((n, d)))
            for t, rows in structure.type_rows.items():
                agg = ad.scatter_add_rows(
                    ad.gather_rows(msg0, rows, structure.plans[f"type_gather:{t}"]),
                    structure.member_idx[rows, 0],
                    n,
                    structure.plans[f"pair_scatter0:{t}"],
                ) + ad.scatter_add_rows(
                    ad.gather_rows(msg1, rows, structure.plans[f"type_gather:{t}"]),
                    structure.member_idx[rows, 1],
                    n,
                    structure.plans[f"pair_scatter1:{t}"],
                )
                m = m + agg @ params.edge_w[t].transpose((1, 0))
        elif n_edges:
            he = ad.gather_rows(h, flat_members, structure.plans["members"]).reshape(
                n_edges, k, d
            )
            cos = he @ he.transpose((0, 2, 1))
            alpha = ad.masked_softmax(params.attn_temp * cos, attn_mask)
            alphas.append(alpha)
            msg = alpha @ he
            msg = msg * Tensor(structure.member_mask[:, :, None].astype(float))
            m = Tensor(np.zeros((n, d)))
            for t, rows in structure.type_rows.items():
                sub = ad.gather_rows(msg, rows, structure.plans[f"type_gather:{t}"])
                sub = sub.reshape(rows.size * k, d)
                agg = ad.scatter_add_rows(
                    sub,
                    structure.member_idx[rows].reshape(-1),
                    n,
                    structure.plans[f"type_scatter:{t}"],
                )
                m = m + agg @ params.edge_w[t].transpose((1, 0))
        else:
            m = Tensor(np.zeros((n, d)))
        if mode == "train" and cfg.dropout > 0.0:
            keep = (rng.random((n, d)) >= cfg.dropout) / (1.0 - cfg.dropout)
            m = m * Tensor(keep)
        act = m.relu()
        h = act if cfg.euclidean else _normalize_rows(act, d)
        layers.append(h)

    gamma = log_gamma = None
    if structure.child_rows.size:
        glogits = params.gamma_temp * Tensor(structure.parent_f)
        gamma = ad.masked_softmax(glogits, structure.parent_mask)
        log_gamma = glogits - ad.masked_logsumexp(glogits, structure.parent_mask)
        p_rows, kc = structure.parent_idx.shape
        hp = ad.gather_rows(
            h, structure.parent_idx.reshape(-1), structure.plans["parents"]
        ).reshape(p_rows, kc, d)
        ctx = (gamma.reshape(p_rows, 1, kc) @ hp).reshape(p_rows, d)
        ctx = ctx @ params.causal_w.transpose((1, 0))
        base = ad.gather_rows(h, structure.child_rows, structure.plans["children"])
        combined = base + ctx
        if not cfg.euclidean:
            combined = _normalize_rows(combined, d)
        scattered = ad.scatter_add_rows(
            combined, structure.child_rows, n, structure.plans["children"]
        )
        child_mask = np.zeros((n, 1), dtype=bool)
        child_mask[structure.child_rows] = True
        h_final = ad.where(child_mask, scattered, h)
    else:
        h_final = h

    logits = h_final @ params.head_w.transpose((1, 0)) + params.head_b
    log_probs = ad.log_softmax(logits)
    probs = log_probs.exp()
    ent = ad.vmf_entropy(kappa, d)

    return ModelRun(
        structure=structure,
        kappa=kappa,
        layers=layers,
        alphas=alphas,
        gamma=gamma,
        log_gamma=log_gamma,
        h_final=h_final,
        logits=logits,
        log_probs=log_probs,
        probs=probs,
        entropy=ent,
    )


# --------------------------------------------------------------------------
# Public forward with an inspectable trace
# --------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    node_ids: list[str]
    layer_embeddings: list[np.ndarray]
    attention: list[np.ndarray]
    member_idx: np.ndarray
    member_mask: np.ndarray
    gamma: np.ndarray
    gamma_children: list[str]
    logits: np.ndarray
    probs: np.ndarray
    entropy: np.ndarray
    kappa: np.ndarray
    run: ModelRun = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "node_ids": self.node_ids,
            "layer_embeddings": [h.tolist() for h in self.layer_embeddings],
            "attention": [a.tolist() for a in self.attention],
            "member_idx": self.member_idx.tolist(),
            "member_mask": self.member_mask.tolist(),
            "gamma": self.gamma.tolist(),
            "gamma_children": self.gamma_children,
            "logits": self.logits.tolist(),
            "probs": self.probs.tolist(),
            "entropy": self.entropy.tolist(),
            "kappa": self.kappa.tolist(),
        }

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
        os.replace(tmp, path)


def forward(
    ds: Dataset,
    causal_graph: CausalGraph | None,
    params: ModelParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    structure: GraphStructure | None = None,
) -> ForwardTrace:
    if structure is None:
        structure = compile_structure(ds, causal_graph, params.config)
    run = run_model(structure, params, mode=mode, rng=rng)
    child_ids = [structure.node_ids[i] for i in structure.child_rows]
    kc = structure.parent_idx.shape[1]
    return ForwardTrace(
        node_ids=list(structure.node_ids),
        layer_embeddings=[h.data.copy() for h in run.layers] + [run.h_final.data.copy()],
        attention=[a.data.copy() for a in run.alphas],
        member_idx=structure.member_idx.copy(),
        member_mask=structure.member_mask.copy(),
        gamma=run.gamma.data.copy() if run.gamma is not None else np.zeros((0, kc)),
        gamma_children=child_ids,
        logits=run.logits.data.copy(),
        probs=run.probs.data.copy(),
        entropy=run.entropy.data.copy(),
        kappa=run.kappa.data.copy(),
        run=run,
    )


# --------------------------------------------------------------------------
# Straight-line single-node reference operations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SphericalEmbedding:
    """Unit direction plus concentration; the node's belief state."""

    h: np.ndarray
    kappa: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.h) - 1.0) > 1e-9:
            raise ContractViolation("embedding must be unit length within 1e-9")
        if self.kappa < 0:
            raise ContractViolation("kappa must be >= 0")


def project(x: np.ndarray, params: ModelParams) -> SphericalEmbedding:
    """Normalize W x + b onto the sphere; softplus concentration from it."""
    z = params.proj_w.data @ np.asarray(x, dtype=np.float64) + params.proj_b.data
    norm = np.linalg.norm(z)
    if norm <= _NORM_EPS:
        log.debug("degenerate projection; substituting basis vector")
        e1 = np.zeros(params.config.embed_dim)
        e1[0] = 1.0
        return SphericalEmbedding(e1, 0.0)
    raw = float(params.kappa_w.data @ z + params.kappa_b.data)
    return SphericalEmbedding(z / norm, float(np.logaddexp(0.0, raw)))


def edge_attention(
    e: Hyperedge,
    embeds: dict[str, SphericalEmbedding],
    attn_temp: float,
) -> tuple[tuple[str, ...], np.ndarray]:
    """Angular attention within one hyperedge.

    Returns the member order and the row-stochastic matrix alpha with
    alpha[i, j] the weight node members[i] puts on members[j]; the self
    term is included.
    """
    if len(e.members) < 2:
        raise ContractViolation("hyperedge must have >= 2 members")
    hs = np.stack([embeds[m].h for m in e.members])
    logits = attn_temp * (hs @ hs.T)
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    return tuple(e.members), expd / expd.sum(axis=1, keepdims=True)


def hyperedge_aggregate(
    node: str,
    embeds: dict[str, SphericalEmbedding],
    index,
    params: ModelParams,
    attention: dict[str, tuple[tuple[str, ...], np.ndarray]],
    edges: dict[str, Hyperedge],
) -> np.ndarray:
    """One node's updated embedding: attention-weighted, type-transformed
    sums over its incident hyperedges, then ReLU and renormalization."""
    d = params.config.embed_dim
    m = np.zeros(d)
    for eid in index.node_to_edges[node]:
        members, alpha = attention[eid]
        row = members.index(node)
        inner = np.zeros(d)
        for j, other in enumerate(members):
            inner += alpha[row, j] * embeds[other].h
        m += params.edge_w[edges[eid].context_type].data @ inner
    act = np.maximum(m, 0.0)
    norm = np.linalg.norm(act)
    if norm <= _NORM_EPS:
        e1 = np.zeros(d)
        e1[0] = 1.0
        return e1
    return act / norm


def causal_aggregate(
    node: str,
    h_prime: np.ndarray,
    causal_graph: CausalGraph,
    embeds: dict[str, np.ndarray],
    params: ModelParams,
) -> np.ndarray:
    """Blend causal parents into the final embedding via a softmax over
    Granger F statistics at the learned temperature."""
    parents = causal_graph.parents_of(node)
    if not parents:
        return h_prime
    parents = sorted(parents, key=lambda e: e.src)
    f_stats = np.array([e.f_statistic for e in parents])
    logits = float(params.gamma_temp.data) * f_stats
    logits -= logits.max()
    gamma = np.exp(logits)
    gamma /= gamma.sum()
    ctx = np.zeros_like(h_prime)
    for g, e in zip(gamma, parents):
        ctx += g * (params.causal_w.data @ embeds[e.src])
    combined = h_prime + ctx
    if params.config.euclidean:
        return combined
    norm = np.linalg.norm(combined)
    if norm <= _NORM_EPS:
        e1 = np.zeros_like(combined)
        e1[0] = 1.0
        return e1
    return combined / norm
