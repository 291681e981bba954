"""Command-line surface: dataset generation, two-stage training, archive
compression, indexing, querying, evaluation, and rate-distortion sweeps.

Exit codes are stable for scripting: 0 success, 1 I/O failure, 2 usage or
configuration error, 3 missing entity, 4 format/compatibility error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import archive as archive_mod
from . import coder, counters, dataset, retrieval
from .archive import ArchiveCodec, read_archive, write_archive
from .autodiff import ShapeError
from .codec import CodecConfig, CodecModel, psnr
from .dataset import SyntheticSceneConfig, build_dataset, read_manifest, read_tensor, write_tensor
from .hashhead import HashHead, HashHeadConfig
from .retrieval import (
    HashTable,
    query as table_query,
    read_index,
    timed_retrieval_comparison,
    unpack_code,
    write_index,
)
from .trainer import (
    TrainSchedule,
    eval_psnr,
    load_checkpoint,
    save_checkpoint,
    stage1_train,
    stage2_train,
    write_log,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4


class CLIError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_images(manifest, ids):
    return np.stack([manifest.load_image(i) for i in ids])


def _require_file(path, what):
    if not Path(path).exists():
        raise CLIError(EXIT_USAGE, f"{what} not found: {path}")


# -- subcommands ----------------------------------------------------------


def cmd_gen_data(args):
    cfg = SyntheticSceneConfig(size=args.size, classes=args.classes, noise=args.noise,
                               labels_min=args.labels_min, labels_max=args.labels_max,
                               seed=args.seed)
    ratios = tuple(args.ratios)
    manifest = build_dataset(cfg, args.n, args.out, ratios=ratios)
    sizes = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} images to {args.out}")
    print(f"splits: train={sizes['train']} val={sizes['val']} test={sizes['test']} "
          f"classes={cfg.classes}")
    return EXIT_OK


def cmd_train(args):
    _require_file(args.manifest, "manifest")
    manifest = read_manifest(args.manifest)
    train_ids = manifest.ids("train")
    if not train_ids:
        raise CLIError(EXIT_USAGE, "manifest has no training images")
    images = _load_images(manifest, train_ids)
    labels = np.stack([manifest.entry(i).labels for i in train_ids])
    schedule = TrainSchedule(stage1_steps=args.steps, stage2_steps=args.steps,
                             lr=args.lr, codec_lr_factor=args.codec_lr_factor,
                             batch=args.batch, seed=args.seed,
                             early_stop_window=args.early_stop_window,
                             pcgrad_include_compression=args.pcgrad_tasks == 4)
    log_path = args.log or (str(args.out) + ".log.csv")
    if args.stage == 1:
        cfg = CodecConfig(image_channels=images.shape[3], latent_channels=args.latent_channels,
                          hyper_channels=args.hyper_channels, mixtures=args.mixtures, lam=args.lam)
        model = CodecModel(cfg, seed=args.seed)
        rows = stage1_train(images, model, schedule)
        save_checkpoint(args.out, model, None, schedule, stage=1)
    else:
        if not args.from_checkpoint:
            raise CLIError(EXIT_USAGE, "stage 2 requires --from (the stage-1 checkpoint)")
        _require_file(args.from_checkpoint, "stage-1 checkpoint")
        model, head, _ = load_checkpoint(args.from_checkpoint)
        if head is None:
            head = HashHead(HashHeadConfig(q=args.q, classes=manifest.classes, hidden=args.hidden),
                            latent_channels=model.config.latent_channels, seed=args.seed)
        rows = stage2_train(images, labels, model, head, schedule)
        save_checkpoint(args.out, model, head, schedule, stage=2)
    write_log(log_path, rows)
    print(f"trained stage {args.stage} for {len(rows)} steps; "
          f"checkpoint: {args.out}; log: {log_path}")
    return EXIT_OK


def cmd_compress(args):
    _require_file(args.manifest, "manifest")
    _require_file(args.checkpoint, "checkpoint")
    manifest = read_manifest(args.manifest)
    model, head, _ = load_checkpoint(args.checkpoint)
    if head is None:
        raise CLIError(EXIT_USAGE, "checkpoint has no hash head; run train --stage 2 first")
    ids = manifest.ids(args.split)
    if not ids:
        raise CLIError(EXIT_USAGE, f"no images in split {args.split!r}")
    images = _load_images(manifest, ids)
    ac = ArchiveCodec(model, head)
    entries, stats = ac.compress_batch(images, ids)
    write_archive(args.out, head.config.q, entries)
    h, w = images.shape[1], images.shape[2]
    measured = float(np.mean([s.bpp for s in stats]))
    estimated = float(np.mean([s.est_bits for s in stats])) / (h * w)
    print(f"compressed {len(entries)} images from split {args.split!r} -> {args.out}")
    print(f"bpp measured={measured:.4f} estimated={estimated:.4f} "
          f"(gap {(measured - estimated) / max(estimated, 1e-12) * 100.0:+.2f}%)")
    return EXIT_OK


def cmd_decompress(args):
    _require_file(args.archive, "archive")
    _require_file(args.checkpoint, "checkpoint")
    arc = read_archive(args.archive)
    if args.id not in arc.entries:
        raise CLIError(EXIT_MISSING, f"image id {args.id} not in archive")
    model, head, _ = load_checkpoint(args.checkpoint)
    ac = ArchiveCodec(model, head)
    counters.reset()
    recon = ac.decompress(arc.entries[args.id])
    decoded = counters.IMAGES_DECODED
    write_tensor(args.out, "reconstruction", recon)
    print(f"decompressed id {args.id} -> {args.out} (images decoded: {decoded})")
    if args.manifest:
        manifest = read_manifest(args.manifest)
        original = manifest.load_image(args.id)
        recon_c = recon[: original.shape[0], : original.shape[1], :]
        print(f"psnr vs original: {psnr(original, recon_c):.3f} dB")
    return EXIT_OK


def _table_from_archive(arc):
    table = HashTable(q=arc.q)
    for image_id, entry in arc.entries.items():
        table.buckets.setdefault(entry.code, []).append(image_id)
    for ids in table.buckets.values():
        ids.sort()
    return table


def cmd_index(args):
    _require_file(args.archive, "archive")
    arc = read_archive(args.archive)
    table = _table_from_archive(arc)
    write_index(args.out, table)
    print(f"indexed {table.n_images} images into {len(table.buckets)} buckets -> {args.out}")
    return EXIT_OK


def cmd_query(args):
    _require_file(args.index, "index")
    table = read_index(args.index)
    if args.image:
        _require_file(args.checkpoint, "checkpoint")
        model, head, _ = load_checkpoint(args.checkpoint)
        if head is None:
            raise CLIError(EXIT_USAGE, "checkpoint has no hash head")
        if head.config.q != table.q:
            raise CLIError(EXIT_FORMAT,
                           f"index q={table.q} does not match checkpoint q={head.config.q}")
        _, image = read_tensor(args.image)
        ac = ArchiveCodec(model, head)
        counters.reset()
        start = time.perf_counter()
        code = ac.hash_codes(image[None])[0]
    else:
        _require_file(args.archive, "archive")
        arc = read_archive(args.archive)
        if arc.q != table.q:
            raise CLIError(EXIT_FORMAT, f"index q={table.q} does not match archive q={arc.q}")
        if args.id not in arc.entries:
            raise CLIError(EXIT_MISSING, f"image id {args.id} not in archive")
        counters.reset()
        start = time.perf_counter()
        code = unpack_code(arc.entries[args.id].code, arc.q)
    result = table_query(table, code, top_k=args.top_k)
    elapsed = time.perf_counter() - start
    decode_ops = counters.total_decode_ops()
    for rank, (image_id, dist) in enumerate(zip(result.ids, result.distances), start=1):
        print(f"{rank}\t{image_id}\t{dist}")
    print(f"query time: {elapsed:.6f}s over {table.n_images} images "
          f"(decode operations: {decode_ops})")
    if decode_ops != 0:
        raise CLIError(EXIT_FORMAT, "query path performed decode operations")
    return EXIT_OK


def cmd_evaluate(args):
    _require_file(args.manifest, "manifest")
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.archive, "archive")
    manifest = read_manifest(args.manifest)
    model, head, _ = load_checkpoint(args.checkpoint)
    if head is None:
        raise CLIError(EXIT_USAGE, "checkpoint has no hash head")
    arc = read_archive(args.archive)
    if args.index:
        _require_file(args.index, "index")
        table = read_index(args.index)
        if table.q != arc.q:
            raise CLIError(EXIT_FORMAT, f"index q={table.q} does not match archive q={arc.q}")
    ac = ArchiveCodec(model, head)

    archive_codes = {i: unpack_code(e.code, arc.q) for i, e in sorted(arc.entries.items())}
    archive_labels = {i: manifest.entry(i).labels for i in archive_codes}
    query_ids = manifest.ids(args.query_split)
    queries = [(i, manifest.load_image(i), manifest.entry(i).labels) for i in query_ids]

    def encode_fn(image):
        return ac.hash_codes(image[None])[0]

    def decode_fn(image_id):
        return ac.decompress(arc.entries[image_id])

    timing = not args.no_timing
    (joint, joint_rows), (std, std_rows) = timed_retrieval_comparison(
        archive_codes, archive_labels, queries, encode_fn, decode_fn,
        k=args.k, depth=args.depth, timing=timing)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["query_id", f"P@{args.k}", f"R@{args.k}", "AP", "seconds"]
    _write_csv(out / "metrics_joint.csv", header, joint_rows)
    _write_csv(out / "metrics_standard.csv", header, std_rows)
    summary_header = ["approach", f"P@{args.k}", f"R@{args.k}", "mAP", "mean_query_seconds",
                      "total_seconds", "n_queries", "excluded_queries", "decode_ops"]
    summary_rows = [
        ["joint", joint.precision, joint.recall, joint.mean_ap, joint.mean_query_seconds,
         joint.total_seconds, joint.n_queries, joint.excluded_queries, joint.decode_ops],
        ["standard", std.precision, std.recall, std.mean_ap, std.mean_query_seconds,
         std.total_seconds, std.n_queries, std.excluded_queries, std.decode_ops],
    ]
    _write_csv(out / "summary.csv", summary_header, summary_rows)
    print(f"joint:    P@{args.k}={joint.precision:.4f} R@{args.k}={joint.recall:.4f} "
          f"mAP={joint.mean_ap:.4f} total={joint.total_seconds:.3f}s decode_ops={joint.decode_ops}")
    print(f"standard: P@{args.k}={std.precision:.4f} R@{args.k}={std.recall:.4f} "
          f"mAP={std.mean_ap:.4f} total={std.total_seconds:.3f}s decode_ops={std.decode_ops}")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_rd_curve(args):
    _require_file(args.manifest, "manifest")
    missing = [c for c in args.checkpoints if not Path(c).exists()]
    if missing:
        raise CLIError(EXIT_USAGE, "missing checkpoints: " + ", ".join(missing))
    manifest = read_manifest(args.manifest)
    ids = manifest.ids(args.split)
    if not ids:
        raise CLIError(EXIT_USAGE, f"no images in split {args.split!r}")
    images = _load_images(manifest, ids)
    h, w = images.shape[1], images.shape[2]
    points = []
    for ckpt in args.checkpoints:
        model, head, header = load_checkpoint(ckpt)
        ac = ArchiveCodec(model, head)
        _, stats = ac.compress_batch(images, ids)
        bpp = float(np.mean([s.payload_bits for s in stats])) / (h * w)
        points.append((model.config.lam, bpp, eval_psnr(model, images)))
    points.sort(key=lambda p: p[1])
    _write_csv(args.out, ["lambda", "bpp", "psnr"], points)
    for lam, bpp, p in points:
        print(f"lambda={lam:g} bpp={bpp:.4f} psnr={p:.3f}")
    print(f"rd curve -> {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="hashpress",
                                     description="Jointly learned image compression and "
                                                 "hash-based indexing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-label dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--labels-min", type=int, default=1)
    p.add_argument("--labels-max", type=int, default=2)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.52, 0.24, 0.24])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train stage 1 (codec) or stage 2 (joint)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--from", dest="from_checkpoint")
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--q", type=int, default=64)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--latent-channels", type=int, default=16)
    p.add_argument("--hyper-channels", type=int, default=8)
    p.add_argument("--mixtures", type=int, default=3)
    p.add_argument("--codec-lr-factor", type=float, default=0.1)
    p.add_argument("--pcgrad-tasks", type=int, choices=(3, 4), default=4)
    p.add_argument("--early-stop-window", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="entropy-code a split into an archive")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="reconstruct one image from an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("index", help="build the hash table from an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="decode-free retrieval against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--archive")
    p.add_argument("--id", type=int)
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="joint vs decode-baseline retrieval metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--index")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--depth", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--query-split", default="val")
    p.add_argument("--no-timing", action="store_true",
                   help="write zero seconds columns for bit-reproducible output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rd-curve", help="rate-distortion sweep over trained checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_rd_curve)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "query" and not args.image and args.id is None:
        parser.error("query needs --image or (--id and --archive)")
    if args.command == "query" and args.image and not args.checkpoint:
        parser.error("query --image needs --checkpoint")
    if args.command == "query" and args.id is not None and not args.archive:
        parser.error("query --id needs --archive")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (coder.FormatError, dataset.FormatError, archive_mod.FormatError,
            retrieval.FormatError) as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except ShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
