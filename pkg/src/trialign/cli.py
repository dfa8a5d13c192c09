"""Command-line entry point: prepare / train / eval / probe / retrieve / serve.

Every command reads an optional JSON config file; flags override config
values. Outputs are machine-readable JSON on stdout; failures print a
structured {"error": {code, message}} object on stderr and exit non-zero.
Set TRIALIGN_LOG to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import datamodel as dm
from . import encoder as enc
from . import evalkit, retrieval, service, trainer
from .errors import TriAlignError, ValidationError

log = logging.getLogger("trialign.cli")


def _setup_logging():
    level = os.environ.get("TRIALIGN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.exists(path):
        raise ValidationError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


def _require(config: dict, key: str):
    if config.get(key) in (None, ""):
        raise ValidationError(f"missing required setting {key!r}")
    return config[key]


def _state_and_data(config):
    state = enc.load_checkpoint(_require(config, "checkpoint"))
    manifest, cache = dm.load_manifest_with_cache(_require(config, "manifest"))
    return state, manifest, cache


def _labeled_embeddings(state, manifest):
    if not manifest.split_labels:
        raise ValidationError("manifest has no split_labels to evaluate against")
    records = [manifest.record_by_id(sid) for sid in manifest.split_labels]
    return trainer.embed_records(records, state)


def _class_set(state, cache, class_templates):
    per_label = {}
    for label, keys in class_templates.items():
        vecs = []
        for key in keys:
            if key not in cache.text_vectors:
                raise ValidationError(f"class {label!r}: unknown text key {key!r}")
            vecs.append(cache.text_vectors[key])
        per_label[label] = vecs
    return evalkit.class_embeddings_from_templates(per_label, state)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> None:
    config = _load_config(args.config)
    manifest_in = args.manifest or _require(config, "manifest")
    out_path = args.out or _require(config, "out")
    n_points = int(config.get("points_per_shape", 10000))
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    rng = np.random.default_rng(seed)

    # Lenient first pass: records may carry an inline mesh instead of points.
    with open(manifest_in, "r", encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValidationError(f"{manifest_in}: empty manifest")
    header = json.loads(lines[0])
    base_dir = os.path.dirname(os.path.abspath(manifest_in))
    records = []
    sampled = 0
    for line in lines[1:]:
        obj = json.loads(line)
        if "mesh" in obj:
            mesh = dm.Mesh(
                vertices=obj["mesh"]["vertices"],
                triangles=obj["mesh"]["triangles"],
                vertex_colors=obj["mesh"]["vertex_colors"],
            )
            obj = dict(obj)
            obj["points"] = dm.sample_surface_points(mesh, n_points, rng).tolist()
            del obj["mesh"]
            sampled += 1
        records.append(dm._record_from_json(obj, base_dir))
    manifest = dm.DatasetManifest(
        records=records,
        cache_path=header["cache_path"],
        split_labels=header.get("split_labels"),
        base_dir=base_dir,
    )
    cache = dm.load_cache(manifest.resolved_cache_path())
    dm.validate_manifest_against_cache(manifest, cache)
    dm.save_manifest(manifest, out_path)
    _emit(
        {
            "manifest": out_path,
            "records": len(records),
            "meshes_sampled": sampled,
            "points_per_shape": n_points if sampled else None,
        }
    )


def cmd_train(args) -> None:
    config = _load_config(args.config)
    manifest_path = args.manifest or _require(config, "manifest")
    checkpoint_out = args.out or _require(config, "checkpoint_out")
    train_section = dict(config.get("train", {}))
    if args.seed is not None:
        train_section["seed"] = args.seed
    if "seed" not in train_section:
        raise ValidationError("train requires a seed (config train.seed or --seed)")
    train_config = trainer.TrainConfig.from_dict(train_section)
    encoder_section = dict(config.get("encoder", {}))

    manifest, cache = dm.load_manifest_with_cache(manifest_path)
    encoder_section.setdefault("text_dim", cache.text_dim)
    encoder_section.setdefault("image_dim", cache.image_dim)
    encoder_config = enc.EncoderConfig.from_dict(
        {
            "point_feature_dims": encoder_section.get("point_feature_dims", [32, 64]),
            "head_dims": encoder_section.get("head_dims"),
            "embed_dim": encoder_section.get("embed_dim", 64),
            "scale_multiplier": encoder_section.get("scale_multiplier", 1.0),
            "input_channels": encoder_section.get("input_channels", 6),
            "text_dim": encoder_section["text_dim"],
            "image_dim": encoder_section["image_dim"],
        }
    )
    state, report = trainer.train(
        manifest,
        cache,
        encoder_config,
        train_config,
        metrics_path=config.get("metrics_out"),
    )
    enc.save_checkpoint(state, checkpoint_out)
    report_out = config.get("report_out")
    if report_out:
        with open(report_out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    _emit(
        {
            "checkpoint": checkpoint_out,
            "epochs": len(report.epoch_losses),
            "final_loss": report.epoch_losses[-1],
            "best_epoch": report.best_epoch,
            "round_switch_epoch": report.round_switch_epoch,
        }
    )


def cmd_eval(args) -> None:
    config = _load_config(args.config)
    if args.manifest:
        config["manifest"] = args.manifest
    if args.checkpoint:
        config["checkpoint"] = args.checkpoint
    state, manifest, cache = _state_and_data(config)
    classes = _class_set(state, cache, _require(config, "class_templates"))
    embeddings = _labeled_embeddings(state, manifest)
    report = {"n_shapes": len(embeddings), "n_classes": len(classes)}
    k_max = min(5, len(classes))
    predictions = evalkit.zero_shot_classify(embeddings, classes, k_max)
    for k in (1, 3, 5):
        if k <= k_max:
            report[f"top{k}"] = evalkit.topk_accuracy(
                predictions, manifest.split_labels, k
            )
    out = config.get("out")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
    _emit(report)


def cmd_probe(args) -> None:
    config = _load_config(args.config)
    if args.manifest:
        config["manifest"] = args.manifest
    if args.checkpoint:
        config["checkpoint"] = args.checkpoint
    state, manifest, cache = _state_and_data(config)
    labels = manifest.split_labels or {}
    if not labels:
        raise ValidationError("manifest has no split_labels to probe against")
    embeddings = _labeled_embeddings(state, manifest)
    test_ids = set(config.get("test_ids", []))
    if not test_ids:
        raise ValidationError("probe config needs test_ids (held-out shapes)")
    train_pairs = [
        (embeddings[sid], labels[sid]) for sid in embeddings if sid not in test_ids
    ]
    test_pairs = [(embeddings[sid], labels[sid]) for sid in embeddings if sid in test_ids]
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    curves = {}
    for shots in config.get("shots", [1, 2, 4, 8]):
        probe_config = evalkit.ProbeConfig(
            shots=int(shots), seeds=int(config.get("seeds", 10))
        )
        result = evalkit.linear_probe(
            train_pairs, test_pairs, probe_config, np.random.default_rng(seed)
        )
        curves[str(shots)] = {
            "mean": result.mean_accuracy,
            "std": result.std_accuracy,
        }
    report = {"shots": curves, "n_train": len(train_pairs), "n_test": len(test_pairs)}
    out = config.get("out")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
    _emit(report)


def _build_index_from_config(config):
    if config.get("index"):
        index = retrieval.load_index(config["index"])
        state = (
            enc.load_checkpoint(config["checkpoint"]) if config.get("checkpoint") else None
        )
        return index, state
    state, manifest, _ = _state_and_data(config)
    embeddings = trainer.embed_records(manifest.records, state)
    metadata = {
        r.id: {"dataset_tag": r.dataset_tag} for r in manifest.records
    }
    return retrieval.build_index(embeddings, metadata), state


def _load_query_spec(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cmd_retrieve(args) -> None:
    config = _load_config(args.config)
    index, state = _build_index_from_config(config)
    resolver = service.QueryResolver(index, state)
    k = args.k if args.k is not None else int(config.get("k", 5))
    if args.joint:
        a = resolver.resolve(_load_query_spec(args.joint[0]))
        b = resolver.resolve(_load_query_spec(args.joint[1]))
        ranked = retrieval.query_joint(index, a, b, k)
    elif args.query:
        vec = resolver.resolve(_load_query_spec(args.query))
        ranked = retrieval.query(index, vec, k)
    elif args.shape_id:
        ranked = retrieval.query(index, index.vector_of(args.shape_id), k)
    else:
        raise ValidationError("retrieve needs --query, --shape-id, or --joint")
    _emit({"results": [{"id": sid, "score": score} for sid, score in ranked]})


def cmd_serve(args) -> None:
    config = _load_config(args.config)
    index, state = _build_index_from_config(config)
    host = args.host or config.get("host", "127.0.0.1")
    port = args.port if args.port is not None else int(config.get("port", 8080))
    server = service.make_server(index, state, host=host, port=port)
    _emit(
        {
            "listening": f"http://{server.server_address[0]}:{server.server_address[1]}",
            "size": len(index),
        }
    )
    sys.stdout.flush()
    service.serve_forever(server)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialign",
        description="Tri-modal contrastive alignment workflows",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--manifest", help="override manifest path")

    p = sub.add_parser("prepare", help="validate a manifest, sampling meshes to points")
    common(p)
    p.add_argument("--out", help="normalized manifest output path")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run the two-round training loop")
    common(p)
    p.add_argument("--out", help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot classification report")
    common(p)
    p.add_argument("--checkpoint", help="override checkpoint path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="few-shot linear probe curves")
    common(p)
    p.add_argument("--checkpoint", help="override checkpoint path")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("retrieve", help="one-shot retrieval query")
    common(p)
    p.add_argument("--query", help="JSON file with a query spec")
    p.add_argument("--shape-id", help="query by an indexed shape id")
    p.add_argument("--joint", nargs=2, metavar=("A", "B"), help="two query spec files")
    p.add_argument("-k", type=int, help="results to return")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("serve", help="start the retrieval HTTP service")
    common(p)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except TriAlignError as exc:
        json.dump({"error": {"code": exc.code, "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        json.dump(
            {"error": {"code": "invalid_input", "message": f"{type(exc).__name__}: {exc}"}},
            sys.stderr,
        )
        sys.stderr.write("\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
