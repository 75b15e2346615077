"""Command-line entry point: ``signsynth <subcommand> [options]``.

Every run logs the resolved config and its hash as the first structured
record; progress records follow, one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import Config, derive_seed
from .core import (NUM_CLASSES, ClassTaxonomy, DatasetManifest, dataset_statistics, load_icons,
                   read_image, validate_taxonomy, write_image)


class Logger:
    def __init__(self, path: str | None):
        self.fh = open(path, "a", encoding="utf-8") if path else sys.stderr

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps({"t": round(time.time(), 3), **record}, default=str) + "\n")
        self.fh.flush()

    def close(self) -> None:
        if self.fh is not sys.stderr:
            self.fh.close()


def _taxonomy(args) -> ClassTaxonomy:
    if getattr(args, "taxonomy", None):
        data = json.loads(Path(args.taxonomy).read_text())
        return ClassTaxonomy.split(int(data["total"]), rare=data["rare"])
    return ClassTaxonomy.split(args.classes, n_rare=args.n_rare)


def _add_taxonomy(p: argparse.ArgumentParser) -> None:
    p.add_argument("--taxonomy", help="JSON file with {total, rare}; overrides --classes/--n-rare")
    p.add_argument("--classes", type=int, default=NUM_CLASSES)
    p.add_argument("--n-rare", type=int, default=99, help="the last N class ids are rare")


PATH_KEYS = ("manifest", "images", "icons", "maps", "out")


def _path_arg(p: argparse.ArgumentParser, name: str) -> None:
    """Required path flag that may instead come from the ``paths.<name>`` config key."""
    p.add_argument(f"--{name}", help=f"required unless paths.{name} is set in the config")
    p.set_defaults(_required=p.get_default("_required") + (name,) if p.get_default("_required") else (name,))


def _fill_paths(args, cfg: Config) -> list[str]:
    """Fill unset path flags from the config; returns the required flags still missing."""
    for name in PATH_KEYS:
        if getattr(args, name, None) is None and hasattr(args, name) and cfg[f"paths.{name}"]:
            setattr(args, name, cfg[f"paths.{name}"])
    return [n for n in getattr(args, "_required", ()) if getattr(args, n, None) is None]


def _seed_all(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# subcommands


def cmd_validate_data(args, cfg: Config, log: Logger) -> int:
    tax = _taxonomy(args)
    train, test = DatasetManifest.load(args.train), DatasetManifest.load(args.test)
    print(f"{'':10s} {'Images':>8s} {'Signs':>8s}")
    for name, m in (("Train", train), ("Test", test)):
        images, signs = dataset_statistics(m)
        print(f"{name:10s} {images:8d} {signs:8d}")
    print()
    report = validate_taxonomy(train, test, tax)
    print(report.summary())
    test_only = sum(1 for c in tax.rare if report.test_counts.get(c, 0) > 0)
    print(f"classes: {tax.total} total, {len(tax.train_present)} train-present, {len(tax.rare)} rare "
          f"({test_only} seen in test)")
    log({"event": "validate-data", "passed": report.passed, "violations": report.violations})
    return 0 if report.passed else 1


def cmd_make_toy(args, cfg: Config, log: Logger) -> int:
    from .toy import write_toy_corpus
    corpus = write_toy_corpus(args.out, args.train_frames, args.test_frames, seed=cfg["seed"])
    log({"event": "make-toy", "root": str(corpus.root), "train_frames": len(corpus.train),
         "test_frames": len(corpus.test), "train_signs": corpus.train.sign_count})
    print(corpus.root)
    return 0


def cmd_train_inpaint(args, cfg: Config, log: Logger) -> int:
    from .inpaint import InpaintNet
    from .training import background_patches, save_net, train_inpaint_loop
    rng = _seed_all(cfg["seed"])
    manifest = DatasetManifest.load(args.manifest)
    patches = background_patches(manifest, args.images, args.patches, rng)
    net = InpaintNet.build(cfg)
    train_inpaint_loop(net, patches, args.steps, cfg["inpaint.batch"], rng, log)
    save_net(args.out, net)
    return 0


def cmd_train_embed(args, cfg: Config, log: Logger) -> int:
    from .embed import EmbedNet
    from .training import background_patches, save_net, sign_patches, train_embed_loop
    rng = _seed_all(cfg["seed"])
    manifest = DatasetManifest.load(args.manifest)
    icons = load_icons(args.icons)
    signs = sign_patches(manifest, args.images, cfg["context.ratio"], cfg["context.mask_margin"])
    bgs = background_patches(manifest, args.images, args.patches, rng)
    net = EmbedNet.build(args.approach, cfg)
    train_embed_loop(net, signs, bgs, icons, args.steps, cfg["inpaint.batch"], rng, log)
    save_net(args.out, net)
    return 0


def cmd_train_styled(args, cfg: Config, log: Logger) -> int:
    from .styled import StyledNet
    from .training import load_net, save_net, sign_patches, styled_items, train_styled_loop
    rng = _seed_all(cfg["seed"])
    manifest = DatasetManifest.load(args.manifest)
    icons = load_icons(args.icons)
    signs = sign_patches(manifest, args.images, cfg["context.ratio"], cfg["context.mask_margin"])
    inp = load_net(args.inpaint) if args.inpaint else None
    items = styled_items(signs, inp, icons)
    net = StyledNet.build(cfg)
    final = args.final_steps if args.final_steps is not None else cfg["styled.steps_per_stage"]
    train_styled_loop(net, items, cfg["styled.steps_per_stage"], cfg["styled.batch"], rng, log, final_steps=final,
                      generator=torch.Generator().manual_seed(cfg["seed"]))
    save_net(args.out, net)
    return 0


def cmd_train_placement(args, cfg: Config, log: Logger) -> int:
    from .placement import WhereModule, collapse_check, ingest_semantic_maps
    from .training import save_net, train_where_loop
    rng = _seed_all(cfg["seed"])
    manifest = DatasetManifest.load(args.manifest)
    store = ingest_semantic_maps(args.maps, [f.frame_id for f in manifest.frames])
    if store.missing:
        log({"event": "missing-maps", "frames": store.missing})
    wm = WhereModule.build(cfg)
    train_where_loop(wm, store, manifest, args.steps, args.batch, rng, log)
    probe = next(iter(store.maps.values()))
    value, ok = collapse_check(wm, probe, rng)
    log({"event": "diversity", "frame": probe.frame_id, "value": value, "collapsed": not ok})
    save_net(args.out, wm)
    return 0


def _kde(cfg: Config, manifest: DatasetManifest):
    from .placement import fit_kde
    bw = cfg["placement.bandwidth"]
    try:
        bw = float(bw)
    except ValueError:
        pass
    return fit_kde(manifest, bw, cfg["placement.max_count"], cfg["placement.budget"])


def cmd_sample_placements(args, cfg: Config, log: Logger) -> int:
    from .placement import ingest_semantic_maps, placement_heatmap, sample_kde, sample_where
    from .training import load_net
    manifest = DatasetManifest.load(args.manifest)
    kde = _kde(cfg, manifest)
    lines = []
    frames = manifest.frames[: args.frames] if args.frames else manifest.frames
    store = wm = None
    if args.method == "nn":
        if not (args.where and args.maps):
            raise ValueError("--method nn needs --where and --maps")
        wm = load_net(args.where)
        store = ingest_semantic_maps(args.maps, [f.frame_id for f in frames])
    shortfall = 0
    for rec in frames:
        rng = np.random.default_rng(derive_seed(cfg["seed"], rec.frame_id, "place"))
        existing = [a.bbox for a in rec.annotations] if args.keep_existing else []
        if args.method == "kde":
            boxes = sample_kde(kde, (rec.width, rec.height), rng, existing)
        else:
            if rec.frame_id not in store:
                continue
            boxes = sample_where(wm, store[rec.frame_id], (rec.width, rec.height), rng, kde.draw_count(rng), existing,
                                 cfg["placement.budget"])
        shortfall += boxes.shortfall
        lines += [f"{rec.frame_id} {b.x} {b.y} {b.w} {b.h}\n" for b in boxes]
    Path(args.out).write_text("".join(lines))
    if args.heatmap:
        sizes = {r.frame_id: (r.width, r.height) for r in frames}
        centers = []
        for line in lines:
            fid, x, y, w, h = line.split()
            fw, fh = sizes[fid]
            centers.append(((int(x) + int(w) / 2) / fw, (int(y) + int(h) / 2) / fh))
        heat = placement_heatmap(centers)
        write_image(args.heatmap, np.repeat(heat[..., None], 3, axis=2))
    log({"event": "sample-placements", "method": args.method, "boxes": len(lines), "shortfall": shortfall})
    return 0


def cmd_generate(args, cfg: Config, log: Logger) -> int:
    from .datagen import GenerationMode, GenerationNets, generate_dataset
    from .placement import ingest_semantic_maps
    from .training import load_net
    mode = GenerationMode(args.approach, args.mode, args.variant)
    manifest = DatasetManifest.load(args.manifest)
    nets = GenerationNets(
        embed=load_net(args.embed) if args.embed else None,
        inpaint=load_net(args.inpaint) if args.inpaint else None,
        styled=load_net(args.styled) if args.styled else None,
        where=load_net(args.where) if args.where else None,
    )
    if mode.placement != "replace":
        nets.kde = _kde(cfg, manifest)
    if args.maps:
        nets.maps = ingest_semantic_maps(args.maps, [f.frame_id for f in manifest.frames])
    tax = _taxonomy(args) if (args.taxonomy or args.balance) else None
    out, report = generate_dataset(mode, manifest, load_icons(args.icons), nets, args.seed, args.images, args.out,
                                   taxonomy=tax, rare_share=cfg["datagen.rare_share"],
                                   ratio=cfg["context.ratio"], margin=cfg["context.mask_margin"])
    log({"event": "generate", "mode": mode.name, "images": report.images, "signs": report.total_signs,
         "skips": len(report.skips), "manifest_sha256": out.sha256()})
    print(out.sha256())
    return 0


def cmd_evaluate(args, cfg: Config, log: Logger) -> int:
    from .metrics import classification_report, detection_auc, format_report, read_detections, read_predictions
    if args.detections:
        gt_manifest = DatasetManifest.load(args.ground_truth)
        gt = {f.frame_id: [(a.bbox, a.class_id) for a in f.annotations] for f in gt_manifest.frames}
        auc = detection_auc(read_detections(args.detections), gt, cfg["eval.iou_threshold"])
        print(f"AUC@{cfg['eval.iou_threshold']:.2f}: {100 * auc:.2f}")
        log({"event": "evaluate", "auc": auc})
        return 0
    preds = {i: c for i, c, _ in read_predictions(args.predictions)}
    labels = {}
    for line in Path(args.labels).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            item, cls = line.split()[:2]
            labels[item] = int(cls)
    missing = sorted(set(labels) - set(preds))
    if missing:
        raise ValueError(f"{len(missing)} labeled items lack predictions, e.g. {missing[:3]}")
    items = sorted(labels)
    rep = classification_report([preds[i] for i in items], [labels[i] for i in items], _taxonomy(args))
    print(format_report({args.name: rep}))
    log({"event": "evaluate", **rep})
    return 0


def cmd_render_grid(args, cfg: Config, log: Logger) -> int:
    from .embed import context_window
    from .core import resize
    manifest = DatasetManifest.load(args.manifest)
    tiles = []
    for rec in manifest.frames:
        anns = [a for a in rec.annotations if args.provenance == "any" or a.provenance.value == args.provenance]
        if not anns:
            continue
        frame = read_image(Path(args.images) / rec.image_path)
        for a in anns:
            win = context_window(rec.width, rec.height, a.bbox, cfg["context.ratio"]) or a.bbox
            tiles.append(resize(frame[win.slices()], args.tile, args.tile))
            if len(tiles) >= args.max:
                break
        if len(tiles) >= args.max:
            break
    if not tiles:
        raise ValueError("no annotations matched")
    cols = min(args.cols, len(tiles))
    rows = -(-len(tiles) // cols)
    grid = np.ones((rows * args.tile, cols * args.tile, 3), np.float32)
    for k, t in enumerate(tiles):
        r, c = divmod(k, cols)
        grid[r * args.tile:(r + 1) * args.tile, c * args.tile:(c + 1) * args.tile] = t
    write_image(args.out, grid)
    log({"event": "render-grid", "tiles": len(tiles), "out": args.out})
    return 0


def cmd_toy_uplift(args, cfg: Config, log: Logger) -> int:
    from .experiments import run_toy_uplift
    results = [run_toy_uplift(Path(args.out) / f"seed{s}", s, log=log) for s in args.seeds]
    for r in results:
        print(f"seed {r.seed}: rare recall {r.rare_recall_real:.3f} -> {r.rare_recall_mixed:.3f}, "
              f"frequent recall {r.frequent_recall_real:.3f} -> {r.frequent_recall_mixed:.3f}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signsynth", description="Synthetic traffic-sign augmentation toolkit")
    parser.add_argument("--config", help="YAML or JSON file of dotted config keys")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--log", help="append structured log records to this file (default: stderr)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-data", help="class taxonomy and dataset counts")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    _add_taxonomy(p)
    p.set_defaults(func=cmd_validate_data)

    p = sub.add_parser("make-toy", help="write a procedural toy corpus")
    _path_arg(p, "out")
    p.add_argument("--train-frames", type=int, default=60)
    p.add_argument("--test-frames", type=int, default=30)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train-inpaint", help="train the patch inpainting network")
    _path_arg(p, "manifest")
    _path_arg(p, "images")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--patches", type=int, default=200, help="sign-free training windows to extract")
    _path_arg(p, "out")
    p.set_defaults(func=cmd_train_inpaint)

    p = sub.add_parser("train-embed", help="train the pasted or cycled embedding networks")
    p.add_argument("--approach", choices=("pasted", "cycled"), required=True)
    _path_arg(p, "manifest")
    _path_arg(p, "images")
    _path_arg(p, "icons")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--patches", type=int, default=200)
    _path_arg(p, "out")
    p.set_defaults(func=cmd_train_embed)

    p = sub.add_parser("train-styled", help="train the background-conditioned sign generator")
    _path_arg(p, "manifest")
    _path_arg(p, "images")
    _path_arg(p, "icons")
    p.add_argument("--inpaint", help="inpainting checkpoint used to clear real signs from their patches")
    p.add_argument("--final-steps", type=int, help="steps at 64x64 (default: styled.steps_per_stage)")
    _path_arg(p, "out")
    p.set_defaults(func=cmd_train_styled)

    p = sub.add_parser("train-placement", help="train the semantic-map placement module")
    _path_arg(p, "manifest")
    _path_arg(p, "maps")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=16)
    _path_arg(p, "out")
    p.set_defaults(func=cmd_train_placement)

    p = sub.add_parser("sample-placements", help="sample new sign boxes per frame")
    p.add_argument("--method", choices=("kde", "nn"), required=True)
    _path_arg(p, "manifest")
    p.add_argument("--maps")
    p.add_argument("--where")
    p.add_argument("--frames", type=int, default=0, help="only the first N frames (0 = all)")
    p.add_argument("--keep-existing", action="store_true", help="treat annotated boxes as obstacles")
    p.add_argument("--heatmap", help="also write a PNG heatmap of the sampled centers")
    _path_arg(p, "out")
    p.set_defaults(func=cmd_sample_placements)

    p = sub.add_parser("generate", help="synthesize a dataset from the training frames")
    p.add_argument("--mode", choices=("replace", "kde", "nn"), default="replace")
    p.add_argument("--approach", choices=("pasted", "cycled", "styled"), required=True)
    p.add_argument("--variant", choices=("additional", "only-synt", "manystyled"))
    _path_arg(p, "manifest")
    _path_arg(p, "images")
    _path_arg(p, "icons")
    p.add_argument("--embed")
    p.add_argument("--inpaint")
    p.add_argument("--styled")
    p.add_argument("--where")
    p.add_argument("--maps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--balance", action="store_true", help="oversample rare classes per the taxonomy")
    _add_taxonomy(p)
    _path_arg(p, "out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="classification or detection metrics")
    p.add_argument("--predictions", help="lines: item_id class score")
    p.add_argument("--labels", help="lines: item_id class")
    p.add_argument("--detections", help="lines: frame_id x y w h score class")
    p.add_argument("--ground-truth", help="manifest with ground-truth boxes")
    p.add_argument("--name", default="run")
    _add_taxonomy(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render-grid", help="tile sign crops of a manifest into one image")
    _path_arg(p, "manifest")
    _path_arg(p, "images")
    p.add_argument("--provenance", choices=("real", "synthetic", "any"), default="any")
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--max", type=int, default=32)
    _path_arg(p, "out")
    p.set_defaults(func=cmd_render_grid)

    p = sub.add_parser("toy-uplift", help="rare-class uplift experiment on the procedural corpus")
    _path_arg(p, "out")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_toy_uplift)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    if args.command == "evaluate" and not (args.detections or (args.predictions and args.labels)):
        parser.print_usage(sys.stderr)
        print("evaluate needs --predictions and --labels, or --detections and --ground-truth", file=sys.stderr)
        return 2
    log = Logger(args.log)
    try:
        cfg = Config.load(args.config, args.set)
        missing = _fill_paths(args, cfg)
        if missing:
            parser.print_usage(sys.stderr)
            print(f"{args.command}: missing " + ", ".join(f"--{n}" for n in missing), file=sys.stderr)
            return 2
        log({"event": "start", "command": args.command, "config_hash": cfg.hash(),
             "config": json.loads(cfg.to_json())})
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            code = args.func(args, cfg, log)
        log({"event": "end", "command": args.command, "code": code})
        return code
    except Exception as exc:  # noqa: BLE001 - every runtime failure becomes exit code 1
        print(f"signsynth {args.command}: error: {exc}", file=sys.stderr)
        log({"event": "error", "command": args.command, "error": repr(exc)})
        return 1
    finally:
        log.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
