"""Command-line pipeline: synth | granger | train | eval | gradcheck.

Every command loads inputs, writes its artifacts atomically
(write-temp-then-rename), and records a ``manifest.json`` with the seed,
config digest, input/output paths, output digests, versions, and
wallclock.  All randomness flows from one ``--seed``; components receive
subseeds derived as ``(seed * 2654435761 + crc32(tag)) mod 2^32``.

Exit codes: 0 success, 1 input error, 2 usage, 3 training divergence,
4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import zlib

import numpy as np

from . import __version__, metrics, synthgen, training
from .errors import (
    ContractViolation,
    DanglingReference,
    NumericalError,
    ParseError,
    RankDeficient,
    SeriesTooShort,
    TrainingDiverged,
    ValidationError,
)
from .granger import CausalGraph, GrangerConfig, infer_causal_graph
from .hypergraph import feature_dropout, load_dataset, save_dataset
from .model import ModelConfig, forward
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

INPUT_ERRORS = (
    ContractViolation,
    DanglingReference,
    NumericalError,
    ParseError,
    RankDeficient,
    SeriesTooShort,
    ValidationError,
    FileNotFoundError,
    OSError,
    KeyError,
    json.JSONDecodeError,
)


def derive_seed(seed: int, tag: str) -> int:
    return (seed * 2654435761 + zlib.crc32(tag.encode())) % 2**32


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    out_dir: str,
    command: str,
    seed: int | None,
    config_doc: dict,
    inputs: dict[str, str],
    outputs: list[str],
    start: float,
) -> None:
    doc = {
        "command": command,
        "seed": seed,
        "config_digest": hashlib.sha256(
            json.dumps(config_doc, sort_keys=True).encode()
        ).hexdigest(),
        "inputs": inputs,
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
        "versions": {
            "causal_sphhn": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "wallclock_ms": int(1000 * (time.monotonic() - start)),
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def _load_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    start = time.monotonic()
    seed = derive_seed(args.seed, "synth")
    if args.config:
        doc = _load_json(args.config)
        doc.setdefault("seed", seed)
        doc["planted_edges"] = tuple(
            (int(s), int(d), float(c)) for s, d, c in doc.get("planted_edges", ())
        )
        if "split_fracs" in doc:
            doc["split_fracs"] = tuple(doc["split_fracs"])
        cfg = synthgen.SynthConfig(**doc)
    else:
        cfg = synthgen.preset(args.preset, seed=seed)
    ds, truth = synthgen.generate(cfg)
    os.makedirs(args.out, exist_ok=True)
    ds_path = os.path.join(args.out, "dataset.json")
    truth_path = os.path.join(args.out, "truth.json")
    save_dataset(ds, ds_path)
    synthgen.save_truth(truth, truth_path)
    cfg_doc = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}
    _write_manifest(args.out, "synth", args.seed, cfg_doc, {}, [ds_path, truth_path], start)
    print(f"wrote {ds_path} ({len(ds.nodes)} nodes, {len(ds.hyperedges)} hyperedges)")
    return 0


def cmd_granger(args) -> int:
    start = time.monotonic()
    ds = load_dataset(args.dataset)
    cfg = GrangerConfig(
        lag=args.lag,
        alpha=args.alpha,
        reduction=args.reduction,
        bonferroni=args.bonferroni,
    )
    graph = infer_causal_graph(ds.nodes, cfg, fit_ids=ds.splits["train"])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "causal.json")
    graph.save(path)
    cfg_doc = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(
        args.out, "granger", None, cfg_doc, {"dataset": _sha256(args.dataset)}, [path], start
    )
    print(f"wrote {path} ({len(graph.edges)} edges)")
    return 0


def _train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    overrides = _load_json(args.config) if args.config else {}
    train_doc = {
        "lambda1": 0.0 if args.no_entropy else overrides.get("lambda1", 0.1),
        "lambda2": overrides.get("lambda2", 0.1),
        "lr": overrides.get("lr", 1e-3),
        "batch_size": overrides.get("batch_size", 128),
        "max_epochs": overrides.get("max_epochs", 100),
        "patience": overrides.get("patience", 10),
        "dropout": overrides.get("dropout", 0.2),
        "seed": derive_seed(args.seed, "train"),
        "kappa_init": overrides.get("kappa_init", 20.0),
    }
    model_doc = {
        "embed_dim": args.embed_dim if args.embed_dim else overrides.get("embed_dim", 64),
        "layers": args.layers if args.layers is not None else overrides.get("layers", 2),
        "euclidean": args.euclidean,
        "pairwise": args.pairwise,
    }
    return ModelConfig(**model_doc), TrainConfig(**train_doc)


def cmd_train(args) -> int:
    start = time.monotonic()
    ds = load_dataset(args.dataset)
    graph = None
    if not args.no_causal:
        if not args.graph:
            raise ContractViolation("--graph is required unless --no-causal is set")
        graph = CausalGraph.load(args.graph)
    model_cfg, train_cfg = _train_configs(args)
    try:
        params, history = train(ds, graph, model_cfg, train_cfg)
    except TrainingDiverged as exc:
        os.makedirs(args.out, exist_ok=True)
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.json")
    hist = os.path.join(args.out, "history.csv")
    save_checkpoint(ckpt, params, train_cfg, graph)
    training.write_history_csv(history, hist)
    cfg_doc = {"model": params.config.to_dict(), "train": train_cfg.to_dict()}
    inputs = {"dataset": _sha256(args.dataset)}
    if args.graph:
        inputs["graph"] = _sha256(args.graph)
    _write_manifest(args.out, "train", args.seed, cfg_doc, inputs, [ckpt, hist], start)
    print(f"wrote {ckpt} ({len(history)} epochs, best val loss {min(h['val_loss'] for h in history):.4f})")
    return 0


def gamma_edge_scores(graph: CausalGraph, gamma_temp: float) -> list[tuple[str, str, float]]:
    """Causal-attention logits per edge: the learned temperature times the
    Granger F statistic (the quantity whose per-node softmax is gamma)."""
    return [(e.src, e.dst, gamma_temp * e.f_statistic) for e in graph.edges]


def cmd_eval(args) -> int:
    start = time.monotonic()
    params, train_cfg, graph = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if args.dropout_rate > 0.0:
        rng = np.random.default_rng(derive_seed(args.seed, "eval.dropout"))
        ds = feature_dropout(ds, args.dropout_rate, rng)
    trace = forward(ds, graph, params, mode="eval")
    index = ds.node_index()
    if args.split == "all":
        ids = [n.node_id for n in ds.nodes]
    else:
        ids = list(ds.splits[args.split])
    rows = np.asarray([index[i] for i in sorted(ids)], dtype=np.int64)
    labels = np.asarray([ds.labels[ds.nodes[r].node_id] for r in rows], dtype=np.int64)
    probs = trace.probs[rows]
    preds = probs.argmax(axis=1)

    p_at_k: dict[int, float | None] = {args.k: None}
    rank_corr = None
    if args.truth and graph is not None and graph.edges:
        truth = synthgen.load_truth(args.truth)
        true_set = {(e.src, e.dst) for e in truth}
        scored = gamma_edge_scores(graph, float(params.gamma_temp.data))
        p_at_k[args.k] = metrics.precision_at_k(scored, true_set, k=args.k)
        rank_corr = metrics.rank_correlation(
            [s for _, _, s in scored], [e.f_statistic for e in graph.edges]
        )

    report = metrics.EvalReport(
        accuracy=metrics.accuracy(preds, labels, ds.classes),
        macro_f1=metrics.macro_f1(preds, labels, ds.classes),
        auc=metrics.auc_ovr(probs, labels, ds.classes),
        ece=metrics.ece(probs, labels, bins=args.bins),
        mean_entropy=metrics.predictive_entropy(probs),
        mean_vmf_entropy=float(np.mean(trace.entropy[rows])),
        p_at_k=p_at_k,
        per_class_f1=metrics.per_class_f1(preds, labels, ds.classes),
        rank_corr=rank_corr,
        config={
            "bins": args.bins,
            "k": args.k,
            "split": args.split,
            "dropout_rate": args.dropout_rate,
            "dataset_digest": _sha256(args.dataset),
            "checkpoint_digest": _sha256(args.checkpoint),
        },
    )
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "report.json")
    report.save(path)
    inputs = {"dataset": _sha256(args.dataset), "checkpoint": _sha256(args.checkpoint)}
    if args.truth:
        inputs["truth"] = _sha256(args.truth)
    cfg_doc = {"split": args.split, "dropout_rate": args.dropout_rate, "bins": args.bins, "k": args.k}
    _write_manifest(args.out, "eval", args.seed, cfg_doc, inputs, [path], start)
    print(
        f"accuracy {report.accuracy:.4f}  macro-F1 {report.macro_f1:.4f}  "
        f"ECE {report.ece:.4f}" + (f"  P@{args.k} {p_at_k[args.k]:.3f}" if p_at_k[args.k] is not None else "")
    )
    return 0


def cmd_gradcheck(args) -> int:
    report = training.gradient_check(seed=args.seed, corrupt=args.corrupt_gradients)
    for name in sorted(report.per_parameter):
        print(f"{name:24s} max rel error {report.per_parameter[name]:.3e}")
    print(f"overall max rel error {report.max_rel_error:.3e} (tolerance {report.tolerance:g})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "gradcheck.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "max_rel_error": report.max_rel_error,
                    "per_parameter": report.per_parameter,
                    "passed": report.passed,
                    "tolerance": report.tolerance,
                },
                fh,
                indent=2,
            )
        os.replace(tmp, path)
    if not report.passed:
        worst = sorted(report.per_parameter, key=report.per_parameter.get, reverse=True)
        print("FAIL; worst parameters: " + ", ".join(worst[:3]), file=sys.stderr)
        return 4
    print("PASS")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _positive_int(value: str) -> int:
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sphhn",
        description="Causal spherical hypergraph networks on synthetic social dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted causal edges")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", choices=("toy", "small", "medium"))
    group.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("granger", help="infer the causal graph from a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--lag", type=_positive_int, default=2)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--reduction", choices=("pca1", "mean"), default="pca1")
    p.add_argument("--bonferroni", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_granger)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--graph", help="causal graph JSON from the granger command")
    p.add_argument("--config", help="JSON file of training overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-dim", type=_positive_int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--no-causal", action="store_true", help="drop the causal graph")
    p.add_argument("--no-entropy", action="store_true", help="set lambda1 = 0")
    p.add_argument("--euclidean", action="store_true", help="skip sphere normalization")
    p.add_argument("--pairwise", action="store_true", help="expand hyperedges to 2-cliques")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--truth", help="planted-edge ground truth JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--dropout-rate", type=float, default=0.0)
    p.add_argument("--bins", type=_positive_int, default=10)
    p.add_argument("--k", type=_positive_int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--corrupt-gradients", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
