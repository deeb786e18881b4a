"""Command-line entry points.

Every subcommand exits 0 on success; failures print one JSON line to stderr
with a stable error category and exit with a category-specific code.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import RunConfig, Stopwatch, parse_config_file, write_run_metadata
from .errors import ConfigError, SiamretError, ValidationError
from .imaging import (
    augment,
    balance_classes,
    generate_synthetic,
    image_to_tensor,
    load_dataset,
    preprocess_dataset,
    read_png,
    resize_bilinear,
    write_dataset,
)
from .metrics import evaluate_retrieval
from .network import load_checkpoint, save_checkpoint
from .projection import export_projection, project_embeddings
from .retrieval import (
    build_index,
    embed_dataset,
    load_embeddings,
    query_knn,
    save_embeddings,
)
from .rngstreams import TAG_AUGMENT, rng_stream
from .training import train

EXIT_CODES = {
    "config": 2,
    "validation": 3,
    "shape": 4,
    "non_finite": 5,
    "format": 6,
    "radius_estimation": 7,
}


def _load_config(args) -> RunConfig:
    cfg = parse_config_file(args.config) if args.config else RunConfig()
    for key, attr in getattr(args, "_overrides", []):
        val = getattr(args, attr, None)
        if val is not None:
            cfg.override(key, val)
    return cfg


def _require(value: str, flag: str, cfg_key: str) -> str:
    if value:
        return value
    raise ConfigError(f"missing {flag} (or config key {cfg_key})")


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    with Stopwatch() as sw:
        items = generate_synthetic(
            classes=cfg["data.classes"],
            per_class=cfg["synth.per_class"],
            size=cfg["synth.size"],
            seed=cfg["seed"],
        )
        manifest = write_dataset(args.out, items)
    write_run_metadata(manifest, cfg, "synth", sw.elapsed)
    print(f"wrote {len(items)} images to {manifest}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    manifest_in = _require(args.manifest or cfg["paths.manifest"], "--manifest", "paths.manifest")
    with Stopwatch() as sw:
        items = load_dataset(manifest_in, cfg["data.classes"])
        items = preprocess_dataset(items, cfg.preprocess_config())
        if cfg["preprocess.balance"]:
            items = balance_classes(
                items, cfg.augment_spec(), rng_stream(cfg["seed"], TAG_AUGMENT)
            )
        manifest_out = write_dataset(args.out, items)
    write_run_metadata(manifest_out, cfg, "preprocess", sw.elapsed)
    print(f"wrote {len(items)} images to {manifest_out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = _require(args.manifest or cfg["paths.manifest"], "--manifest", "paths.manifest")
    ckpt_path = _require(args.out or cfg["paths.checkpoint"], "--out", "paths.checkpoint")
    with Stopwatch() as sw:
        dataset = load_dataset(manifest, cfg["data.classes"])
        spec = cfg.network_spec()
        want = tuple(spec.input_shape[1:])
        for item in dataset:
            if item.image.shape[:2] != want:
                raise ValidationError(
                    f"image {item.id} is {item.image.shape[1]}x{item.image.shape[0]}, "
                    f"network expects {want[1]}x{want[0]}; preprocess the dataset first"
                )
        if cfg["train.balance"]:
            dataset = balance_classes(
                dataset, cfg.augment_spec(), rng_stream(cfg["seed"], TAG_AUGMENT)
            )
        net, history = train(dataset, spec, cfg.train_config())
        save_checkpoint(net, ckpt_path)
        history_path = cfg["paths.history"] or ckpt_path + ".history.csv"
        history.write_csv(history_path)
    write_run_metadata(ckpt_path, cfg, "train", sw.elapsed)
    last = history.mean_loss[-1] if history.mean_loss else float("nan")
    print(f"trained {cfg['train.epochs']} epochs, final mean loss {last:.6f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"history: {history_path}")
    return 0


def cmd_embed(args) -> int:
    cfg = _load_config(args)
    ckpt = _require(args.ckpt or cfg["paths.checkpoint"], "--ckpt", "paths.checkpoint")
    manifest = _require(args.manifest or cfg["paths.manifest"], "--manifest", "paths.manifest")
    out = _require(args.out or cfg["paths.embeddings"], "--out", "paths.embeddings")
    with Stopwatch() as sw:
        net = load_checkpoint(ckpt)
        dataset = load_dataset(manifest, cfg["data.classes"])
        records = embed_dataset(net, dataset)
        save_embeddings(records, out)
    write_run_metadata(out, cfg, "embed", sw.elapsed)
    print(f"embedded {len(records)} images to {out}")
    return 0


def cmd_index(args) -> int:
    records = load_embeddings(args.emb)
    index = build_index(records)
    counts: dict[int, int] = {}
    for lab in index.labels:
        counts[int(lab)] = counts.get(int(lab), 0) + 1
    print(f"entries = {index.size}")
    print(f"dim = {index.dim}")
    for lab in sorted(counts):
        print(f"label {lab}: {counts[lab]}")
    return 0


def cmd_query(args) -> int:
    if bool(args.id) == bool(args.image):
        raise ConfigError("pass exactly one of --id or --image")
    records = load_embeddings(args.emb)
    index = build_index(records)
    exclude = None
    if args.id:
        matches = [r for r in records if r.id == args.id]
        if not matches:
            raise ValidationError(f"id {args.id!r} not found in embedding file")
        vector = matches[0].vector
        exclude = None if args.include_self else args.id
    else:
        if not args.ckpt:
            raise ConfigError("--image queries need --ckpt to embed the image")
        net = load_checkpoint(args.ckpt)
        img = read_png(args.image)
        size = net.spec.input_shape[1:]
        if img.shape[:2] != tuple(size):
            img = resize_bilinear(img, size[0], size[1])
        from .network import embed as embed_one

        vector = embed_one(net, image_to_tensor(img), mode="infer")
    hits = query_knn(index, vector, args.k, exclude_id=exclude)
    for hit in hits:
        print(f"{hit.id} {hit.label} {hit.distance!r}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    emb = _require(args.emb or cfg["paths.embeddings"], "--emb", "paths.embeddings")
    out = _require(args.out or cfg["paths.metrics"], "--out", "paths.metrics")
    with Stopwatch() as sw:
        records = load_embeddings(emb)
        index = build_index(records)
        queries = [r for r in records if r.label >= 0]
        k = cfg["eval.k"] or None
        report = evaluate_retrieval(
            index, queries, k=k, exclude_self=not cfg["eval.include_self"]
        )
        doc = json.loads(report.to_json())
        doc["config_hash"] = cfg.hash()
        with open(out, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    write_run_metadata(out, cfg, "evaluate", sw.elapsed)
    print(f"map = {report.map:.6f}")
    print(f"mrr = {report.mrr:.6f}")
    print(f"q = {report.q}")
    print(f"metrics: {out}")
    return 0


def cmd_project(args) -> int:
    cfg = _load_config(args)
    emb = _require(args.emb or cfg["paths.embeddings"], "--emb", "paths.embeddings")
    out = _require(args.out or cfg["paths.projection"], "--out", "paths.projection")
    with Stopwatch() as sw:
        records = load_embeddings(emb)
        if not records:
            raise ValidationError("embedding file is empty; nothing to project")
        vectors = np.stack([r.vector for r in records])
        points, info = project_embeddings(
            [r.id for r in records],
            [r.label for r in records],
            vectors,
            cfg.projection_config(),
        )
        export_projection(points, out)
    write_run_metadata(out, cfg, "project", sw.elapsed)
    print(f"projected {len(points)} points to {out}")
    print(f"kl_initial = {info['kl_initial']:.6f}")
    print(f"kl_final = {info['kl_final']:.6f}")
    return 0


def _add_common(parser, *, config=True, seed=True):
    overrides = []
    if config:
        parser.add_argument("--config", help="run config file (key = value lines)")
    if seed:
        parser.add_argument("--seed", type=int, help="override the config seed")
        overrides.append(("seed", "seed"))
    parser.set_defaults(_overrides=overrides)
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siamret",
        description="Pair-supervised image embeddings: train, retrieve, evaluate, project.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic labeled dataset")
    ov = _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--per-class", type=int, dest="per_class", help="images per class")
    p.add_argument("--size", type=int, help="square image size in pixels")
    ov += [("data.classes", "classes"), ("synth.per_class", "per_class"), ("synth.size", "size")]
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize, contrast-boost, crop, resize")
    _add_common(p)
    p.add_argument("--manifest", help="input manifest csv")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the embedding network on pairs")
    _add_common(p)
    p.add_argument("--manifest", help="training manifest csv")
    p.add_argument("--out", help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a dataset with a trained checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--manifest", help="manifest csv to embed")
    p.add_argument("--out", help="embedding file output path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("index", help="summarize an embedding file")
    p.add_argument("--emb", required=True, help="embedding file")
    p.set_defaults(func=cmd_index, _overrides=[])

    p = sub.add_parser("query", help="k nearest neighbors for an id or image")
    p.add_argument("--emb", required=True, help="embedding file")
    p.add_argument("--k", type=int, required=True, help="number of results")
    p.add_argument("--id", help="query by an id present in the embedding file")
    p.add_argument("--image", help="query by image path (requires --ckpt)")
    p.add_argument("--ckpt", help="checkpoint for --image queries")
    p.add_argument(
        "--include-self",
        action="store_true",
        help="keep the query id itself in --id results",
    )
    p.set_defaults(func=cmd_query, _overrides=[])

    p = sub.add_parser("evaluate", help="leave-one-out retrieval metrics")
    _add_common(p)
    p.add_argument("--emb", help="embedding file")
    p.add_argument("--out", help="metrics json output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("project", help="2-D projection of an embedding file")
    _add_common(p)
    p.add_argument("--emb", help="embedding file")
    p.add_argument("--out", help="projection csv output path")
    p.set_defaults(func=cmd_project)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SiamretError as exc:
        print(
            json.dumps({"category": exc.category, "message": str(exc)}),
            file=sys.stderr,
        )
        return EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
