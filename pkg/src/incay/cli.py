"""Command-line entry point: ``incay train | eval | verify``."""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__, layers
from .artifacts import MetricsWriter, emit_embeddings, load_model, read_manifest, save_model, write_manifest
from .data import Dataset, load_mnist, preprocess, synth_gaussian_blobs
from .layers import LayerParams
from .losses import LOSS_KINDS, ClassifierState, LossConfig
from .numerics import make_rng
from .propcheck import run_verification
from .trainer import Model, TrainConfig, TrainingDiverged, default_lr_drops, evaluate, train

log = logging.getLogger("incay")

EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_VERIFY_FAILED = 1

# flag -> type; the manifest stores every resolved flag under its name
TRAIN_FLAGS = {
    "dataset": str, "data_dir": str, "arch": str, "loss": str, "incay_lambda": float,
    "epsilon": float, "margin": int, "alpha": float, "center_lambda": float, "center_lr": float,
    "lr": float, "momentum": float, "weight_decay": float, "batch_size": int, "iters": int,
    "lr_drops": str, "eval_every": int, "eval_train_limit": int, "train_limit": int,
    "test_limit": int, "seed": int, "metrics_out": str, "embeddings_out": str,
    "model_out": str,
}

# paths given on the command line win over those in a replayed manifest
OUTPUT_FLAGS = ("metrics_out", "embeddings_out", "model_out")


def default_incay_lambda(loss: str) -> float:
    return 0.01 if loss in ("lsoftmax", "asoftmax") else 0.1


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------------------
# data and model plumbing


def load_splits(args) -> tuple:
    """Return (mean_image, train, test) after preprocessing."""
    if args.dataset == "mnist":
        train_ds = load_mnist(args.data_dir, "train")
        test_ds = load_mnist(args.data_dir, "test")
    else:
        k, d = 4, 8
        train_ds = synth_gaussian_blobs(k, d, 250, 1.0, make_rng(1000 + args.seed))
        test_ds = synth_gaussian_blobs(k, d, 100, 1.0, make_rng(2000 + args.seed))
        test_ds = Dataset(test_ds.images, test_ds.labels, "test", k)
    if args.train_limit:
        train_ds = train_ds.subset(args.train_limit)
    if args.test_limit:
        test_ds = test_ds.subset(args.test_limit)
    return preprocess(train_ds, test_ds)


def model_tensors(model: Model, mean_image) -> dict:
    out = {}
    for i, p in enumerate(model.params):
        if p is not None:
            out[f"layer{i}.weights"] = p.weights
            if p.bias is not None:
                out[f"layer{i}.bias"] = p.bias
    out["classifier.weights"] = model.classifier.weights
    if model.classifier.centers is not None:
        out["classifier.centers"] = model.classifier.centers
    out["mean_image"] = mean_image
    return out


def model_from_file(path):
    tensors, meta = load_model(path)
    k = int(meta["num_classes"])
    if meta["arch"] == "mlp":
        arch = layers.mlp(input_dim=int(meta["input_dim"]), num_classes=k)
    else:
        arch = layers.ARCHITECTURES[meta["arch"]](num_classes=k)
    params = []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, (layers.Conv, layers.FC)):
            params.append(LayerParams(tensors[f"layer{i}.weights"], tensors.get(f"layer{i}.bias")))
        else:
            params.append(None)
    cls = ClassifierState(tensors["classifier.weights"], tensors.get("classifier.centers"))
    return Model(arch, params, cls), tensors["mean_image"], meta


def loss_config(args) -> LossConfig:
    return LossConfig(
        kind=args.loss, margin=args.margin, alpha=args.alpha, center_weight=args.center_lambda,
        center_lr=args.center_lr, incay_lambda=args.incay_lambda, epsilon=args.epsilon,
        decay_mu=args.weight_decay,
    )


def train_config(args) -> TrainConfig:
    drops = tuple(int(s) for s in args.lr_drops.split(",") if s) if args.lr_drops else default_lr_drops(args.iters)
    return TrainConfig(
        arch=args.arch, loss=loss_config(args), base_lr=args.lr, momentum=args.momentum,
        batch_size=args.batch_size, total_iters=args.iters, lr_drop_iters=drops,
        eval_every=args.eval_every, seed=args.seed, eval_train_limit=args.eval_train_limit or None,
    )


# --------------------------------------------------------------------------
# subcommands


def apply_manifest(args) -> None:
    entries = read_manifest(args.from_manifest)
    for key, typ in TRAIN_FLAGS.items():
        if key in OUTPUT_FLAGS and getattr(args, key) is not None:
            continue
        if key in entries:
            raw = entries[key]
            setattr(args, key, None if raw == "" else typ(raw))


def resolve_defaults(args) -> None:
    if args.incay_lambda is None:
        args.incay_lambda = default_incay_lambda(args.loss)
    if args.lr_drops is None:
        args.lr_drops = ",".join(str(d) for d in default_lr_drops(args.iters))
    if args.dataset == "blobs" and args.arch != "mlp":
        raise ValueError("the blobs dataset needs --arch mlp")


def run_experiment(args) -> int:
    if args.from_manifest:
        apply_manifest(args)
    resolve_defaults(args)
    config = train_config(args)
    manifest = {"tool": "incay", "tool_version": __version__}
    manifest.update({key: "" if getattr(args, key) is None else getattr(args, key) for key in TRAIN_FLAGS})
    manifest["started_at"] = utc_now()
    if args.manifest_out:
        write_manifest(manifest, args.manifest_out)

    mean, train_ds, test_ds = load_splits(args)
    writer = MetricsWriter(args.metrics_out) if args.metrics_out else None
    first_dump = [True]

    def on_record(rec):
        if writer is not None:
            writer.write(rec)
        print(f"iter={rec.iter} split={rec.split} acc={rec.accuracy:.4f} "
              f"loss={rec.total_loss:.4g} norm={rec.mean_feature_norm:.4g}", flush=True)

    def on_eval(iteration, model):
        if args.embeddings_out and model.arch.feature_dim == 2:
            emit_embeddings(model.features(test_ds.images), test_ds.labels, iteration,
                            args.embeddings_out, append=not first_dump[0])
            first_dump[0] = False

    try:
        result = train(config, train_ds, test_ds, on_record=on_record, on_eval=on_eval)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        if writer is not None:
            writer.close()

    final = evaluate(result.model, test_ds, config.loss, config.total_iters)
    print(f"final test accuracy={final.accuracy:.4f} mean_feature_norm={final.mean_feature_norm:.6g}")
    if args.model_out:
        meta = {"version": __version__, "arch": config.arch, "num_classes": result.model.arch.num_classes,
                "input_dim": int(np.prod(train_ds.images.shape[1:])), "loss": args.loss, "alpha": args.alpha}
        save_model(args.model_out, model_tensors(result.model, mean), meta)
    if args.manifest_out:
        manifest["finished_at"] = utc_now()
        write_manifest(manifest, args.manifest_out)
    return 0


def run_eval(args) -> int:
    model, mean, meta = model_from_file(args.model)
    if args.dataset == "mnist":
        data = load_mnist(args.data_dir, args.split)
    else:
        data = synth_gaussian_blobs(4, 8, 100, 1.0, make_rng(2000 + args.seed))
        data = Dataset(data.images, data.labels, args.split, 4)
    if args.limit:
        data = data.subset(args.limit)
    _, data = preprocess(data, mean=mean)
    kind = args.loss or meta.get("loss", "softmax")
    rec = evaluate(model, data, LossConfig(kind=kind, alpha=float(meta.get("alpha", 10.0))))
    print(f"split={rec.split} accuracy={rec.accuracy:.6g} base_loss={rec.base_loss:.6g} "
          f"mean_feature_norm={rec.mean_feature_norm:.6g}")
    return 0


def run_verify(args) -> int:
    reports = run_verification(args.seed)
    for r in reports:
        print(r.summary())
        for inst in r.offending:
            print(f"  offending instance: {inst!r}")
    return 0 if all(r.passed for r in reports) else EXIT_VERIFY_FAILED


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incay", description="Feature-incay loss laboratory")
    parser.add_argument("--version", action="version", version=f"incay {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network and write metrics CSV")
    t.add_argument("--from-manifest", help="re-run the configuration stored in a manifest")
    t.add_argument("--dataset", choices=("mnist", "blobs"), default="mnist")
    t.add_argument("--data-dir", default="data/mnist")
    t.add_argument("--arch", choices=sorted(layers.ARCHITECTURES), default="mnist2d")
    t.add_argument("--loss", choices=LOSS_KINDS, default="softmax")
    t.add_argument("--incay-lambda", type=float, default=None,
                   help="feature incay weight (default 0.01 for lsoftmax/asoftmax, else 0.1)")
    t.add_argument("--epsilon", type=float, default=1e-2)
    t.add_argument("--margin", type=int, default=2)
    t.add_argument("--alpha", type=float, default=10.0)
    t.add_argument("--center-lambda", type=float, default=0.01)
    t.add_argument("--center-lr", type=float, default=0.5)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--iters", type=int, default=10000)
    t.add_argument("--lr-drops", default=None, help="comma-separated drop iterations (default 50%%,75%%,90%%)")
    t.add_argument("--eval-every", type=int, default=200)
    t.add_argument("--eval-train-limit", type=int, default=None, help="evaluate on the first N training samples")
    t.add_argument("--train-limit", type=int, default=None, help="train on the first N samples")
    t.add_argument("--test-limit", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--metrics-out")
    t.add_argument("--embeddings-out")
    t.add_argument("--manifest-out")
    t.add_argument("--model-out")
    t.set_defaults(func=run_experiment)

    e = sub.add_parser("eval", help="evaluate a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", choices=("mnist", "blobs"), default="mnist")
    e.add_argument("--data-dir", default="data/mnist")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--loss", choices=LOSS_KINDS, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=run_eval)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=run_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
