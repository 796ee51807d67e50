"""Command-line entry points: synth, train, eval, retrieve, plot.

Options resolve in three layers: built-in defaults, then an INI config file,
then explicit flags. Config sections ([synth], [train], ...) are purely
organizational; keys from every section merge and are spelled like the long
flags (reg-weight = 0.5). Every command writes the fully resolved
configuration next to its outputs. Exit codes: 0 success, 1 usage, 2 data
error, 3 numeric failure. ADE_OUTPUT_ROOT sets the default output root
(default ./ade-out).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

from .backbone import BackboneConfig, StoreHashMismatch, cache_tokens
from .data import ManifestError, generate_synthetic, load_manifest
from .embedding import DegenerateFeature
from .emd import SolverFailure, UnbalancedProblem
from .evaluation import (ProtocolError, evaluate, plot_curves, read_curve_csv,
                         write_curve_csv, write_metrics_json)
from .inference import (score_table_for_records, select_beta, write_score_dump)
from .model import CompositionModel, ModelConfig
from .trainer import NumericFailure, TrainConfig, fit, load_checkpoint

log = logging.getLogger(__name__)

_DATA_ERRORS = (ManifestError, StoreHashMismatch, FileNotFoundError,
                ProtocolError)
_NUMERIC_ERRORS = (NumericFailure, SolverFailure, UnbalancedProblem,
                   DegenerateFeature)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _out_root() -> Path:
    return Path(os.environ.get("ADE_OUTPUT_ROOT", "ade-out"))


def _load_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ManifestError(f"config file not found: {path}")
    merged = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            merged[key.replace("_", "-")] = value
    return merged


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_vals = _load_config_file(args.config)
        for key, value in file_vals.items():
            if key in resolved:
                resolved[key] = value
    for key in defaults:
        flag_val = getattr(args, key.replace("-", "_"), None)
        if flag_val is not None:
            resolved[key] = flag_val
    return resolved


def _write_resolved(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser()
    parser[command] = {k: str(v) for k, v in sorted(resolved.items())}
    with open(out_dir / "resolved-config.ini", "w", encoding="utf-8") as fh:
        parser.write(fh)


def _backbone_from(resolved: dict) -> BackboneConfig:
    return BackboneConfig(
        mode=str(resolved["backbone-mode"]),
        image_size=int(resolved["image-size"]),
        patch_size=int(resolved["patch-size"]),
        embed_dim=int(resolved["embed-dim"]),
        num_heads=int(resolved["backbone-heads"]),
        num_blocks=int(resolved["backbone-blocks"]),
        seed=int(resolved["backbone-seed"]),
        weight_path=resolved["weights"] or None,
    )


_BACKBONE_DEFAULTS = {
    "backbone-mode": "toy", "image-size": 32, "patch-size": 8,
    "embed-dim": 64, "backbone-heads": 4, "backbone-blocks": 2,
    "backbone-seed": 0, "weights": "",
}


def cmd_synth(args) -> int:
    defaults = {"colors": "red,green,blue,yellow,purple,orange",
                "shapes": "circle,square,triangle,cross,ring",
                "images-per-pair": 20, "eval-images-per-pair": 4,
                "unseen-frac": 0.2, "image-size": 32, "seed": 0}
    resolved = _resolve(args, defaults)
    out_dir = Path(args.out) if args.out else _out_root() / "synth"
    manifest = generate_synthetic(
        colors=str(resolved["colors"]).split(","),
        shapes=str(resolved["shapes"]).split(","),
        images_per_pair=int(resolved["images-per-pair"]),
        unseen_fraction=float(resolved["unseen-frac"]),
        eval_images_per_pair=int(resolved["eval-images-per-pair"]),
        image_size=int(resolved["image-size"]),
        seed=int(resolved["seed"]),
        out_dir=out_dir)
    _write_resolved(out_dir, "synth", resolved)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    defaults = {"epochs": 10, "batch-size": 32, "lr": 1e-4, "tau": 0.05,
                "seed": 0, "solver": "exact", "reg-weight": 1.0,
                "attention": "cross", "heads": 4, "word-dim": 32,
                "dropout": 0.0, "weight-decay": 0.0, "word-vectors": "",
                "checkpoint-every": 1, **_BACKBONE_DEFAULTS}
    resolved = _resolve(args, defaults)
    out_dir = Path(args.out) if args.out else _out_root() / "train"
    config = TrainConfig(
        learning_rate=float(resolved["lr"]),
        batch_size=int(resolved["batch-size"]),
        epochs=int(resolved["epochs"]),
        tau=float(resolved["tau"]),
        seed=int(resolved["seed"]),
        solver=str(resolved["solver"]),
        reg_weight=float(resolved["reg-weight"]),
        checkpoint_every=int(resolved["checkpoint-every"]),
        attention_mode=str(resolved["attention"]),
        num_heads=int(resolved["heads"]),
        word_dim=int(resolved["word-dim"]),
        dropout=float(resolved["dropout"]),
        weight_decay=float(resolved["weight-decay"]),
        word_vector_path=str(resolved["word-vectors"]) or None)
    _write_resolved(out_dir, "train", resolved)
    result = fit(config, args.manifest, _backbone_from(resolved), out_dir)
    print(f"best epoch {result.best_epoch} val AUC {result.best_val_auc:.2f}; "
          f"checkpoint {result.best_checkpoint}")
    return 0


def _load_model(ckpt_path, resolved, vocab):
    model_cfg = ModelConfig(
        token_dim=int(resolved["embed-dim"]),
        word_dim=int(resolved["word-dim"]),
        num_heads=int(resolved["heads"]),
        tau=float(resolved["tau"]),
        attention_mode=str(resolved["attention"]))
    model = CompositionModel(model_cfg, vocab, seed=0)
    load_checkpoint(ckpt_path, model)
    model.eval()
    return model


_MODEL_DEFAULTS = {"heads": 4, "word-dim": 32, "tau": 0.05,
                   "attention": "cross", **_BACKBONE_DEFAULTS}


def cmd_eval(args) -> int:
    defaults = {"world": "closed", "beta": "auto", "split": "test",
                **_MODEL_DEFAULTS}
    resolved = _resolve(args, defaults)
    out_dir = Path(args.out) if args.out else _out_root() / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    records, vocab, split = load_manifest(args.manifest)
    backbone = _backbone_from(resolved)
    store = cache_tokens(records, backbone, out_dir / "tokens.bin"
                         if args.store is None else args.store)
    model = _load_model(args.ckpt, resolved, vocab)

    world = str(resolved["world"])
    beta_arg = str(resolved["beta"])
    beta_table = None
    if beta_arg == "auto":
        val_records = [r for r in records if r.split == "val"]
        beta, beta_table = select_beta(model, store, val_records, vocab, split,
                                       world=world)
    else:
        beta = float(beta_arg)

    eval_split = str(resolved["split"])
    eval_records = [r for r in records if r.split == eval_split]
    table = score_table_for_records(model, store, eval_records, vocab, split,
                                    world=world, eval_split=eval_split, beta=beta)
    curve, report = evaluate(table)
    write_score_dump(out_dir / "scores.jsonl", table)
    write_curve_csv(out_dir / "curve.csv", curve)
    extra = {"beta": beta, "world": world, "split": eval_split,
             "num_candidates": len(table.candidates)}
    if beta_table is not None:
        extra["beta_grid"] = [[b, a] for b, a in beta_table]
    write_metrics_json(out_dir / "metrics.json", report, extra=extra)
    _write_resolved(out_dir, "eval", resolved)
    print(json.dumps({"auc": report.auc, "best_hm": report.best_hm,
                      "best_seen": report.best_seen,
                      "best_unseen": report.best_unseen,
                      "attr_acc": report.attr_acc, "obj_acc": report.obj_acc,
                      "beta": beta, "world": world}, sort_keys=True))
    return 0


def cmd_retrieve(args) -> int:
    from . import retrieval as rtr

    defaults = {"k": 5, "mode": "t2i", "concept": "attribute", **_MODEL_DEFAULTS}
    resolved = _resolve(args, defaults)
    out_dir = Path(args.out) if args.out else _out_root() / "retrieve"
    out_dir.mkdir(parents=True, exist_ok=True)
    records, vocab, split = load_manifest(args.manifest)
    backbone = _backbone_from(resolved)
    store = cache_tokens(records, backbone, out_dir / "tokens.bin"
                         if args.store is None else args.store)
    model = _load_model(args.ckpt, resolved, vocab)
    k = int(resolved["k"])
    mode = str(resolved["mode"])
    records_by_id = {r.id: r for r in records}
    index_records = [r for r in records if r.split == "train"]
    index = rtr.build_index(model, store, index_records)

    import torch

    if mode == "t2i":
        attr_name, obj_name = str(args.query).split(",")
        pair = (vocab.attr_index[attr_name], vocab.obj_index[obj_name])
        results = rtr.text_to_image(pair, k, index, model)
        payload = {"mode": mode, "query": args.query,
                   "truncated": k > len(index.image_ids),
                   "results": [{"id": rid, "similarity": sim,
                                "attribute": vocab.attributes[
                                    records_by_id[rid].attribute_label],
                                "object": vocab.objects[
                                    records_by_id[rid].object_label]}
                               for rid, sim in results]}
        sheet_ids = [rid for rid, _ in results]
    elif mode == "i2t":
        rec = records_by_id[str(args.query)]
        tokens = torch.as_tensor(store.get(rec.id))
        comp_feat, _, _ = rtr.image_features(model, tokens)
        candidates = split.candidates(vocab, "closed")
        results = rtr.image_to_text(comp_feat, k, candidates, model, vocab)
        payload = {"mode": mode, "query": rec.id,
                   "truth": vocab.pair_name((rec.attribute_label,
                                             rec.object_label)),
                   "results": [{"composition": vocab.pair_name(p),
                                "similarity": sim} for p, sim in results]}
        sheet_ids = []
    elif mode == "concept":
        rec = records_by_id[str(args.query)]
        tokens = torch.as_tensor(store.get(rec.id))
        _, attr_feat, obj_feat = rtr.image_features(model, tokens)
        concept = str(resolved["concept"])
        feat = attr_feat if concept == "attribute" else obj_feat
        results = rtr.concept_retrieve(feat, concept, k, index)
        payload = {"mode": mode, "query": rec.id, "concept": concept,
                   "truncated": k > len(index.image_ids),
                   "results": [{"id": rid, "similarity": sim,
                                "attribute": vocab.attributes[
                                    records_by_id[rid].attribute_label],
                                "object": vocab.objects[
                                    records_by_id[rid].object_label]}
                               for rid, sim in results]}
        sheet_ids = [rid for rid, _ in results]
    else:
        print(f"error: unknown retrieval mode '{mode}'", file=sys.stderr)
        return 1

    rtr.write_report(out_dir / "retrieval.json", payload)
    if args.sheet and sheet_ids:
        rtr.contact_sheet(out_dir / "sheet.png",
                          [records_by_id[rid].path for rid in sheet_ids])
    _write_resolved(out_dir, "retrieve", resolved)
    print(json.dumps(payload["results"][:3], sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    curves = {}
    for path in args.curves:
        curves[Path(path).stem] = read_curve_csv(path)
    out = Path(args.out) if args.out else _out_root() / "curves.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    plot_curves(out, curves)
    print(f"wrote {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="ade", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--colors")
    p.add_argument("--shapes")
    p.add_argument("--images-per-pair", type=int)
    p.add_argument("--eval-images-per-pair", type=int)
    p.add_argument("--unseen-frac", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    def add_backbone_flags(p):
        p.add_argument("--backbone-mode", choices=["toy", "external"])
        p.add_argument("--image-size", type=int)
        p.add_argument("--patch-size", type=int)
        p.add_argument("--embed-dim", type=int)
        p.add_argument("--backbone-heads", type=int)
        p.add_argument("--backbone-blocks", type=int)
        p.add_argument("--backbone-seed", type=int)
        p.add_argument("--weights")

    p = sub.add_parser("train", help="cache tokens and fit the model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--solver", choices=["exact", "sinkhorn"])
    p.add_argument("--reg-weight", type=float)
    p.add_argument("--attention", choices=["cross", "self", "none"])
    p.add_argument("--heads", type=int)
    p.add_argument("--word-dim", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--word-vectors")
    p.add_argument("--checkpoint-every", type=int)
    add_backbone_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split and run the protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--store")
    p.add_argument("--world", choices=["closed", "open"])
    p.add_argument("--beta")
    p.add_argument("--split", choices=["val", "test"])
    p.add_argument("--heads", type=int)
    p.add_argument("--word-dim", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--attention", choices=["cross", "self", "none"])
    add_backbone_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="text/image/concept retrieval")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--store")
    p.add_argument("--mode", choices=["t2i", "i2t", "concept"])
    p.add_argument("--concept", choices=["attribute", "object"])
    p.add_argument("--k", type=int)
    p.add_argument("--sheet", action="store_true")
    p.add_argument("--heads", type=int)
    p.add_argument("--word-dim", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--attention", choices=["cross", "self", "none"])
    add_backbone_flags(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("plot", help="overlay unseen-seen curves as SVG")
    p.add_argument("curves", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
