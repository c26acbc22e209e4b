"""Joint objective, reverse-mode gradients, Adam loop, and gradient checking.

The loss combines batch-mean cross-entropy, the batch-mean vMF entropy of
per-node concentrations (weight lambda1), and the mean KL divergence from
the temperature-1 softmax of Granger F scores to the model's causal
attention, over batch nodes that have causal parents (weight lambda2).

Training runs Adam (0.9 / 0.999 / 1e-8) over node minibatches with a
full-graph forward per step, early-stops on validation loss, and returns
the best-validation checkpoint.  Everything is deterministic given the
config seed.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, NumericalError, TrainingDiverged
from .granger import CausalGraph
from .hypergraph import Dataset
from .model import (
    GraphStructure,
    ModelConfig,
    ModelParams,
    ModelRun,
    compile_structure,
    init_params,
    run_model,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Learned temperatures stay strictly positive after each update.
TEMP_FLOOR = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    dropout: float = 0.2
    seed: int = 0
    kappa_init: float = 20.0

    def validate(self) -> None:
        if self.lr < 0:
            raise ContractViolation("lr must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractViolation("loss weights must be >= 0")
        if self.patience < 1:
            raise ContractViolation("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ContractViolation("batch_size and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "dropout": self.dropout,
            "seed": self.seed,
            "kappa_init": self.kappa_init,
        }


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    pred: float
    entropy: float
    causal: float


def build_loss(
    run: ModelRun,
    batch_rows: np.ndarray,
    batch_labels: np.ndarray,
    cfg: TrainConfig,
) -> tuple[Tensor, LossBreakdown]:
    """Loss tensor over a node batch plus its float breakdown."""
    structure = run.structure
    n_batch = batch_rows.size
    if n_batch == 0:
        raise ContractViolation("empty batch")
    if np.any(batch_labels < 0) or np.any(batch_labels >= structure.classes):
        raise ContractViolation("label out of range")

    logp = ad.gather_rows(run.log_probs, batch_rows)
    onehot = np.zeros((n_batch, structure.classes))
    onehot[np.arange(n_batch), batch_labels] = 1.0
    pred = -(logp * Tensor(onehot)).sum() * (1.0 / n_batch)

    ent = ad.gather_rows(run.entropy, batch_rows).mean()

    if run.log_gamma is not None:
        sel = np.isin(structure.child_rows, batch_rows)
        if np.any(sel):
            ghat = structure.ghat
            log_ghat = np.where(structure.parent_mask & (ghat > 0), np.log(np.where(ghat > 0, ghat, 1.0)), 0.0)
            kl = (Tensor(ghat) * (Tensor(log_ghat) - run.log_gamma)).sum(axis=-1)
            causal = (kl * Tensor(sel.astype(float))).sum() * (1.0 / sel.sum())
        else:
            causal = Tensor(0.0)
    else:
        causal = Tensor(0.0)

    total = pred + cfg.lambda1 * ent + cfg.lambda2 * causal
    breakdown = LossBreakdown(
        total=float(total.data),
        pred=float(pred.data),
        entropy=float(ent.data),
        causal=float(causal.data),
    )
    return total, breakdown


def loss(
    run: ModelRun,
    batch_rows: np.ndarray,
    batch_labels: np.ndarray,
    cfg: TrainConfig,
) -> LossBreakdown:
    """Float loss breakdown without keeping the graph."""
    return build_loss(run, batch_rows, batch_labels, cfg)[1]


def gradients(
    params: ModelParams,
    structure: GraphStructure,
    batch_rows: np.ndarray,
    batch_labels: np.ndarray,
    cfg: TrainConfig,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    """Reverse-mode gradients of the loss for every parameter tensor."""
    for t in params.named().values():
        t.grad = None
    # Overflow shows up as nonfinite values, which the check below turns
    # into a NumericalError; the intermediate warnings are just noise.
    with np.errstate(over="ignore", invalid="ignore"):
        run = run_model(structure, params, mode=mode, rng=rng)
        total, breakdown = build_loss(run, batch_rows, batch_labels, cfg)
        total.backward()
    grads = {}
    for name, t in params.named().items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"nonfinite gradient in parameter {name}")
        grads[name] = g
    return grads, breakdown


class Adam:
    """Standard Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - ADAM_BETA1**self.t
        b2c = 1.0 - ADAM_BETA2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * g
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * g * g
            p.data = np.asarray(
                p.data - self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + ADAM_EPS),
                dtype=np.float64,
            )


def _split_rows(ds: Dataset, name: str) -> np.ndarray:
    index = ds.node_index()
    return np.asarray(sorted(index[i] for i in ds.splits[name]), dtype=np.int64)


def _labels_for(ds: Dataset, rows: np.ndarray) -> np.ndarray:
    ids = [ds.nodes[r].node_id for r in rows]
    return np.asarray([ds.labels[i] for i in ids], dtype=np.int64)


def train(
    ds: Dataset,
    causal_graph: CausalGraph | None,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> tuple[ModelParams, list[dict]]:
    """Adam training with early stopping on validation loss.

    Returns the best-validation parameters and the per-epoch history.
    Raises :class:`TrainingDiverged` (carrying the last good checkpoint)
    when the loss goes nonfinite.
    """
    cfg.validate()
    model_cfg = ModelConfig(**{**model_cfg.to_dict(), "dropout": cfg.dropout, "kappa_init": cfg.kappa_init})
    model_cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    structure = compile_structure(ds, causal_graph, model_cfg)
    edge_types = tuple(sorted({e.context_type for e in ds.hyperedges}))
    params = init_params(model_cfg, ds.dim, ds.classes, edge_types, rng)
    opt = Adam(params.named(), cfg.lr)

    train_rows = _split_rows(ds, "train")
    val_rows = _split_rows(ds, "val")
    if train_rows.size == 0 or val_rows.size == 0:
        raise ContractViolation("train and val splits must be nonempty")
    train_labels_all = _labels_for(ds, train_rows)
    val_labels = _labels_for(ds, val_rows)

    history: list[dict] = []
    best_val = np.inf
    best_values = params.copy_values()
    bad_epochs = 0
    start = time.monotonic()

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(train_rows.size)
        rows_shuffled = train_rows[order]
        labels_shuffled = train_labels_all[order]
        batch_losses = []
        for lo in range(0, rows_shuffled.size, cfg.batch_size):
            batch = rows_shuffled[lo : lo + cfg.batch_size]
            labels = labels_shuffled[lo : lo + cfg.batch_size]
            try:
                grads, breakdown = gradients(
                    params, structure, batch, labels, cfg, mode="train", rng=rng
                )
            except NumericalError as exc:
                raise TrainingDiverged(str(exc), params=best_values, history=history) from exc
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"loss became {breakdown.total} at epoch {epoch}",
                    params=best_values,
                    history=history,
                )
            opt.step(grads)
            params.attn_temp.data = np.asarray(np.maximum(params.attn_temp.data, TEMP_FLOOR))
            params.gamma_temp.data = np.asarray(np.maximum(params.gamma_temp.data, TEMP_FLOOR))
            batch_losses.append(breakdown.total)

        val_run = run_model(structure, params, mode="eval")
        val_breakdown = loss(val_run, val_rows, val_labels, cfg)
        if not np.isfinite(val_breakdown.total):
            raise TrainingDiverged(
                f"validation loss became {val_breakdown.total} at epoch {epoch}",
                params=best_values,
                history=history,
            )
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "val_loss": val_breakdown.total,
                "pred": val_breakdown.pred,
                "entropy": val_breakdown.entropy,
                "causal": val_breakdown.causal,
                "wallclock_ms": int(1000 * (time.monotonic() - start)),
            }
        )
        if val_breakdown.total < best_val:
            best_val = val_breakdown.total
            best_values = params.copy_values()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    params.load_values(best_values)
    return params, history


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "pred", "entropy", "causal", "wallclock_ms")


def write_history_csv(history: list[dict], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in HISTORY_COLUMNS) + "\n")
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def config_digest(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    doc = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def save_checkpoint(
    path: str,
    params: ModelParams,
    train_cfg: TrainConfig,
    causal_graph: CausalGraph | None,
) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config_digest": config_digest(params.config, train_cfg),
        "model_config": params.config.to_dict(),
        "train_config": train_cfg.to_dict(),
        "arch": {
            "in_dim": params.in_dim,
            "classes": params.classes,
            "edge_types": list(params.edge_types),
        },
        "adam": {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS},
        "causal_graph": causal_graph.to_dict() if causal_graph is not None else None,
        "params": {k: v.tolist() for k, v in params.copy_values().items()},
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ModelParams, TrainConfig, CausalGraph | None]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {doc.get('format_version')}")
    model_cfg = ModelConfig(**doc["model_config"])
    train_cfg = TrainConfig(**doc["train_config"])
    arch = doc["arch"]
    params = init_params(
        model_cfg,
        int(arch["in_dim"]),
        int(arch["classes"]),
        tuple(arch["edge_types"]),
        np.random.default_rng(0),
    )
    params.load_values({k: np.asarray(v) for k, v in doc["params"].items()})
    graph = CausalGraph.from_dict(doc["causal_graph"]) if doc["causal_graph"] else None
    return params, train_cfg, graph


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientCheckReport:
    max_rel_error: float
    per_parameter: dict[str, float]
    passed: bool
    tolerance: float = 1e-4


def _tiny_instance(seed: int):
    """Six nodes, one 4-node hyperedge, one causal link; d = d' = 4."""
    from .granger import CausalEdge
    from .hypergraph import Hyperedge, NodeFeatureSeries

    rng = np.random.default_rng(seed)
    ids = [f"n{i}" for i in range(6)]
    nodes = [NodeFeatureSeries(i, rng.standard_normal((3, 4))) for i in ids]
    edges = [Hyperedge("e0", ("n0", "n1", "n2", "n3"), "ctx")]
    labels = {i: k % 2 for k, i in enumerate(ids)}
    ds = Dataset(
        dim=4,
        timesteps=3,
        classes=2,
        horizon=1,
        nodes=nodes,
        hyperedges=edges,
        labels=labels,
        splits={"train": ids[:4], "val": ids[4:5], "test": ids[5:]},
    )
    ds.validate()
    graph = CausalGraph(alpha=0.05, lag=2, edges=[CausalEdge("n4", "n5", 3.0, 0.01)])
    return ds, graph, rng


def gradient_check(
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    corrupt: bool = False,
) -> GradientCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    Runs the tiny model with randomized parameters, all loss terms active,
    and no dropout.  Relative error uses max(|analytic|, |numeric|, 1e-3)
    as denominator so sub-noise gradients do not produce spurious ratios.
    ``corrupt`` perturbs one analytic gradient (negative-control hook).
    """
    ds, graph, rng = _tiny_instance(seed)
    model_cfg = ModelConfig(embed_dim=4, layers=2, dropout=0.0, attn_temp_init=1.5, gamma_temp_init=0.7, kappa_init=2.0)
    cfg = TrainConfig(lambda1=0.7, lambda2=0.9, dropout=0.0, seed=seed, kappa_init=2.0)
    structure = compile_structure(ds, graph, model_cfg)
    params = init_params(model_cfg, 4, 2, ("ctx",), rng)
    # Randomize away from zero-init so every path carries signal.
    for name, t in params.named().items():
        if name in ("attn_temp", "gamma_temp"):
            continue
        t.data = np.asarray(t.data + 0.4 * rng.standard_normal(t.data.shape), dtype=np.float64)

    rows = np.arange(6, dtype=np.int64)
    labels = _labels_for(ds, rows)
    grads, _ = gradients(params, structure, rows, labels, cfg, mode="eval")
    if corrupt:
        grads["proj_w"] = grads["proj_w"] + 1e-2

    def eval_loss() -> float:
        run = run_model(structure, params, mode="eval")
        return build_loss(run, rows, labels, cfg)[0].item()

    per_param: dict[str, float] = {}
    for name, t in params.named().items():
        worst = 0.0
        flat = t.data.reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss()
            flat[i] = orig - step
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(gflat[i]), abs(numeric), 1e-3)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
        per_param[name] = float(worst)
    max_err = float(max(per_param.values()))
    return GradientCheckReport(
        max_rel_error=max_err,
        per_parameter=per_param,
        passed=bool(max_err <= tolerance),
        tolerance=tolerance,
    )
