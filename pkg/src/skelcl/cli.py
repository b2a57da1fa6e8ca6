"""Command-line entry point.

Subcommands: pretrain, linprobe, knn, finetune, fuse, gen-data,
gradcheck, pft-hist.  Metrics stream to stdout (or --metrics PATH) as
JSON lines; evaluation results print as a single JSON document.  Exit
codes: 0 success, 1 validation failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    query_params,
    save_checkpoint,
    state_from_checkpoint,
    state_to_checkpoint,
)
from .config import RunConfig, parse_config
from .contrast import (
    LossConfig,
    MemoryQueue,
    PftConfig,
    combine_losses,
    intra_loss,
    nnm_intra_loss,
    nnm_mine,
    pft_transform,
    sample_lambda,
    similarity_histogram,
)
from .encoder import EncoderConfig, encode, init_params, project, stgcn_forward
from .errors import ConfigTypeError, SkelclError, UnknownKey
from .rng import RngStream
from .skeleton import (
    derive_streams,
    generate_synthetic_dataset,
    load_dataset,
    stratified_split,
    write_dataset,
)
from .train import (
    augment_params,
    finetune,
    fuse_predictions,
    knn_probe,
    linear_probe,
    pretrain,
)
from .augment import AugmentPipeline


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigTypeError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _build_config(args) -> RunConfig:
    overrides = _parse_overrides(getattr(args, "set", []) or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "tau", None) is not None:
        overrides["tau"] = args.tau
    return parse_config(getattr(args, "config", None), overrides)


def _emit(doc: dict, path: str | None = None) -> None:
    text = json.dumps(doc)
    if path:
        with open(path, "a") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    sequences = generate_synthetic_dataset(
        num_classes=args.classes,
        per_class=args.per_class,
        frames=args.frames,
        joints=args.joints,
        seed=args.seed,
        noise_sigma=args.noise_sigma,
    )
    splits = stratified_split(
        sequences, args.val_fraction, RngStream(args.seed).split("split")
    )
    write_dataset(args.out, sequences, splits)
    _emit(
        {
            "command": "gen-data",
            "sequences": len(sequences),
            "train": splits.count("train"),
            "val": splits.count("val"),
            "out": str(args.out),
            "seed": args.seed,
        }
    )
    return 0


def cmd_pretrain(args) -> int:
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        config = ckpt.config
        state = state_from_checkpoint(ckpt)
    else:
        config = _build_config(args)
        state = None
    data = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def on_stage_end(current_state, stage_index):
        save_checkpoint(out_dir / f"ckpt_stage{stage_index}.bin", state_to_checkpoint(current_state))

    state, records = pretrain(data["train"], config, state=state, on_stage_end=on_stage_end)
    save_checkpoint(out_dir / "checkpoint.bin", state_to_checkpoint(state))
    for record in records:
        _emit(record, args.metrics)
    return 0


def cmd_linprobe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    params = query_params(ckpt, args.stream)
    epochs = args.epochs if args.epochs is not None else ckpt.config.linear_epochs
    lr = args.lr if args.lr is not None else ckpt.config.linear_lr
    result = linear_probe(
        params, data["train"], data["val"], stream=args.stream,
        epochs=epochs, lr=lr, seed=ckpt.config.seed,
    )
    if args.scores_out:
        Path(args.scores_out).write_text(
            json.dumps(
                {
                    "stream": args.stream,
                    "scores": result.val_scores.tolist(),
                    "labels": result.val_labels.tolist(),
                }
            )
        )
    _emit(
        {
            "protocol": "linear",
            "stream": args.stream,
            "accuracy": result.accuracy,
            "n_eval": int(result.val_labels.size),
            "seed": ckpt.config.seed,
            "config_hash": ckpt.config.hash(),
        }
    )
    return 0


def cmd_knn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    params = query_params(ckpt, args.stream)
    accuracy = knn_probe(params, data["train"], data["val"], stream=args.stream, k=args.k)
    _emit(
        {
            "protocol": "knn",
            "stream": args.stream,
            "k": args.k,
            "accuracy": accuracy,
            "n_eval": len(data["val"]),
            "seed": ckpt.config.seed,
            "config_hash": ckpt.config.hash(),
        }
    )
    return 0


def cmd_finetune(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    params = query_params(ckpt, args.stream)
    epochs = args.epochs if args.epochs is not None else ckpt.config.finetune_epochs
    result = finetune(
        params, data["train"], data["val"], stream=args.stream,
        fraction=args.fraction, epochs=epochs, lr=args.lr,
        weight_decay=ckpt.config.weight_decay, seed=ckpt.config.seed,
    )
    _emit(
        {
            "protocol": "finetune" if args.fraction == 1.0 else "semi-supervised",
            "stream": args.stream,
            "fraction": args.fraction,
            "labeled": result.subset_size,
            "accuracy": result.accuracy,
            "n_eval": len(data["val"]),
            "seed": ckpt.config.seed,
            "config_hash": ckpt.config.hash(),
        }
    )
    return 0


def cmd_fuse(args) -> int:
    docs = [json.loads(Path(p).read_text()) for p in args.scores]
    scores = {d["stream"]: np.asarray(d["scores"]) for d in docs}
    weights = (
        {k: float(v) for k, v in (w.split("=") for w in args.weight)}
        if args.weight
        else RunConfig().fusion_weights
    )
    fused, labels = fuse_predictions(scores, {s: weights[s] for s in scores})
    doc = {
        "protocol": "fusion",
        "streams": sorted(scores),
        "weights": {s: weights[s] for s in sorted(scores)},
        "n_eval": int(labels.size),
        "predictions": labels.tolist(),
    }
    reference = next((d.get("labels") for d in docs if d.get("labels") is not None), None)
    if reference is not None:
        doc["accuracy"] = float((labels == np.asarray(reference)).mean())
    _emit(doc)
    return 0


def _gradcheck_components(dtype, eps=1e-4):
    """Small-scale gradient checks for each block type and loss term."""
    from .skeleton import build_star_tree

    graph = build_star_tree(5)
    adjacency = graph.normalized_adjacency(dtype)
    rng = np.random.default_rng(0)
    results = {}

    cfg_first = EncoderConfig(blocks=1, channels=(4,), temporal_kernel=3, hidden=8, embed_dim=4)
    cfg_residual = EncoderConfig(blocks=2, channels=(4, 4), temporal_kernel=3, hidden=8, embed_dim=4)
    x = rng.normal(size=(8, 3, 5)).astype(dtype)

    for label, cfg in (("block_entry", cfg_first), ("block_residual", cfg_residual)):
        params = init_params(cfg, RngStream(1).split(label)).astype(dtype)
        target = rng.normal(size=cfg.hidden_dim)

        def f(params=params, target=target):
            h = stgcn_forward(x, adjacency, params, mode="eval")
            return T.sum_(T.mul(h, target))

        results[label] = T.grad_check(f, params.trainable(), eps=eps)

    params = init_params(cfg_first, RngStream(2).split("proj")).astype(dtype)
    target = rng.normal(size=cfg_first.embed_dim)

    def f_proj():
        _, z = encode(x, adjacency, params, mode="eval")
        return T.sum_(T.mul(z, target))

    results["projector"] = T.grad_check(f_proj, params.trainable(), eps=eps)

    # loss terms on slim embeddings
    dim = 6
    queue = MemoryQueue(8, dim, dtype=dtype)
    fill = rng.normal(size=(8, dim))
    fill /= np.linalg.norm(fill, axis=1, keepdims=True)
    queue.push(fill)
    zq_param = T.parameter(rng.normal(size=dim).astype(dtype))
    zk = rng.normal(size=dim)
    zk /= np.linalg.norm(zk)

    def f_intra():
        return intra_loss(T.l2_normalize(zq_param), zk, queue, 0.2)

    results["loss_intra"] = T.grad_check(f_intra, {"zq": zq_param}, eps=eps)

    def f_nnm():
        z = T.l2_normalize(zq_param)
        return nnm_intra_loss(z, zk, queue, (0,), 0.2)

    results["loss_nnm"] = T.grad_check(f_nnm, {"zq": zq_param}, eps=eps)

    # the extrapolated key side is constant by contract (no gradients ever
    # reach the key branch), so the check perturbs the query path against
    # a key extrapolation frozen at the unperturbed point
    zk_pos = zq_param.data / np.linalg.norm(zq_param.data)
    zk_pos = 0.7 * zk_pos + np.sqrt(1 - 0.49) * _orthogonal_unit(zk_pos, rng)
    lam = 1.3
    z0 = zq_param.data / np.linalg.norm(zq_param.data)
    zk_hat_frozen = lam * zk_pos + (1 - lam) * z0
    zk_hat_frozen /= np.linalg.norm(zk_hat_frozen)

    def f_pft():
        z = T.l2_normalize(zq_param)
        z_hat, _, _ = pft_transform(z, zk_pos, lam)
        return intra_loss(z_hat, zk_hat_frozen, queue, 0.2)

    results["loss_pft_query_path"] = T.grad_check(f_pft, {"zq": zq_param}, eps=eps)

    # combined multi-stream objective (intra + inter, mined numerators)
    b = 2
    emb_params = {
        u: T.parameter(rng.normal(size=(b, dim)).astype(dtype)) for u in ("joint", "bone")
    }
    keys = {}
    queues = {}
    for u in emb_params:
        zk_u = rng.normal(size=(b, dim))
        keys[u] = zk_u / np.linalg.norm(zk_u, axis=1, keepdims=True)
        q = MemoryQueue(8, dim, dtype=dtype)
        q.push(fill)
        queues[u] = q
    cfg_loss = LossConfig(streams=("joint", "bone"), temperature=0.2,
                          nnm_enabled=True, pft_enabled=False)

    def f_combined():
        emb = {u: (T.l2_normalize(p), keys[u]) for u, p in emb_params.items()}
        res = combine_losses(emb, queues, cfg_loss, RngStream(3).split("gc"))
        return res.total

    results["loss_combined"] = T.grad_check(f_combined, emb_params, eps=eps)
    return results


def _orthogonal_unit(v: np.ndarray, rng) -> np.ndarray:
    w = rng.normal(size=v.shape)
    w -= (w @ v) * v
    return w / np.linalg.norm(w)


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.precision == "f64" else np.float32
    tolerance = 1e-6 if args.precision == "f64" else 1e-3
    eps = 1e-4 if args.precision == "f64" else 1e-2
    results = _gradcheck_components(dtype, eps=eps)
    worst = 0.0
    for name, res in sorted(results.items()):
        print(f"{name:16s} max_rel_error={res.max_rel_error:.3e} "
              f"checked={res.coords_checked} skipped={len(res.skipped)}")
        worst = max(worst, res.max_rel_error)
    ok = worst < tolerance
    _emit({"command": "gradcheck", "precision": args.precision,
           "max_rel_error": worst, "tolerance": tolerance, "pass": ok})
    return 0 if ok else 1


def cmd_pft_hist(args) -> int:
    pft = PftConfig(alpha=args.alpha, mu=args.mu)
    rng = RngStream(args.seed).split("pft-hist")
    before, after = [], []
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        data = load_dataset(args.data)
        config = ckpt.config
        params_q = query_params(ckpt, args.stream)
        # key branch embeddings come from the checkpointed key encoder
        from .checkpoint import state_from_checkpoint as _sfc

        state = _sfc(ckpt)
        params_k = state.pairs[args.stream].key
        graph = data["val"][0].graph
        adjacency = graph.normalized_adjacency(np.float32)
        qp = AugmentPipeline(config.query_family, augment_params(config))
        kp = AugmentPipeline(config.key_family, augment_params(config))
        for i, seq in enumerate(data["val"]):
            x = derive_streams(seq, (args.stream,))[args.stream]
            xq = qp.apply_array(x, rng.split(f"q{i}"))
            xk = kp.apply_array(x, rng.split(f"k{i}"))
            with T.no_tape():
                zq = project(stgcn_forward(xq[None], adjacency, params_q, mode="eval"), params_q).data[0]
                zk = project(stgcn_forward(xk[None], adjacency, params_k, mode="eval"), params_k).data[0]
            lam = sample_lambda(pft, rng.split(f"lam{i}"))
            zq_hat, zk_hat, applied = pft_transform(T.Tensor(zq), zk, lam)
            before.append(float(zq @ zk))
            after.append(float(zq_hat.data @ zk_hat) if applied else float(zq @ zk))
    else:
        gen = rng.generator()
        for i in range(args.random_pairs):
            s = gen.uniform(0.0, 1.0)
            a = gen.normal(size=16)
            a /= np.linalg.norm(a)
            b = gen.normal(size=16)
            b -= (b @ a) * a
            b /= np.linalg.norm(b)
            zk = s * a + np.sqrt(max(0.0, 1 - s * s)) * b
            lam = float(gen.beta(pft.alpha, pft.alpha) * pft.mu + 1.0)
            zq_hat, zk_hat, applied = pft_transform(T.Tensor(a, dtype=np.float64), zk, lam)
            before.append(s)
            after.append(float(zq_hat.data @ zk_hat) if applied else s)

    table = similarity_histogram(before, after, bins=args.bins)
    print(f"{'bin':>16s} {'before':>8s} {'after':>8s}")
    for lo, hi, nb, na in table.rows():
        print(f"[{lo:+.2f}, {hi:+.2f}) {nb:8d} {na:8d}")
    doc = {
        "command": "pft-hist",
        "pairs": len(before),
        "alpha": args.alpha,
        "mu": args.mu,
        "before": table.before_stats,
        "after": table.after_stats,
    }
    _emit(doc)
    return 0 if table.after_stats["min"] >= 0.0 else 1


# -- argument parsing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelcl",
        description="Cross-stream contrastive learning on skeleton sequences",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--joints", type=int, default=9)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run the three-stage pretraining")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("linprobe", help="frozen-encoder linear evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stream", default="joint")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--scores-out", default=None)
    p.set_defaults(func=cmd_linprobe)

    p = sub.add_parser("knn", help="training-free nearest-neighbor probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stream", default="joint")
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("finetune", help="finetuned / semi-supervised evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stream", default="joint")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.1)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("fuse", help="weighted fusion of per-stream scores")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--weight", action="append", metavar="STREAM=W")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gradcheck", help="central-difference oracle over all components")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pft-hist", help="before/after positive-similarity table")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--stream", default="joint")
    p.add_argument("--random-pairs", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_pft_hist)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UnknownKey, ConfigTypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SkelclError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
