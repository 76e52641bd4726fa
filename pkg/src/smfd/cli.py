"""Command-line entry point: ``smfd <command> ...``.

Exit codes: 0 success, 2 input error, 3 model or weights error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import degrade as dg
from . import maskops, metrics
from .nets import (KINDS, GraphError, NetConfig, WeightError, WeightFileError, build_network,
                   forward, init_weights, load_weights, param_count, save_weights)
from .rng import derive_seed

EXIT_OK, EXIT_INPUT, EXIT_MODEL = 0, 2, 3

REFERENCE_PARAMS = {"mask_generator": 5_416_159, "smfd_unet": 7_532_601}


class InputError(Exception):
    pass


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# image files


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def read_labels(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                raise InputError(f"{path}: label masks must be single-channel, got mode {im.mode}")
            return np.asarray(im).astype(np.int64)
    except OSError as exc:
        raise InputError(f"cannot read mask {path}: {exc}") from exc


def write_rgb(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def write_labels(path, labels: np.ndarray) -> None:
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# degrade


def manifest_record(name: str, plan: dg.DegradationPlan) -> dict:
    d = plan.to_dict()
    return {"file": name, "seed": d["seed"], "layers": d["layers"], "scale": d["scale"],
            "noise_sigma": d["noise_sigma"]}


def _degrade_one(args):
    index, src, out_dir, master, config = args
    try:
        img = read_rgb(src)
        plan = dg.sample_plan(derive_seed(master, index), config)
        out = dg.apply_plan(img, plan)
    except (InputError, ValueError) as exc:
        return index, src.name, None, str(exc)
    write_rgb(Path(out_dir) / src.name, out)
    return index, src.name, manifest_record(src.name, plan), None


def cmd_degrade(args) -> int:
    src_dir, out_dir = Path(args.input), Path(args.output)
    if not src_dir.is_dir():
        return _fail(f"input directory {src_dir} not found", EXIT_INPUT)
    files = sorted(p for p in src_dir.iterdir() if p.suffix.lower() == ".png")
    if not files:
        return _fail(f"no PNG files in {src_dir}", EXIT_INPUT)
    try:
        kernels = (tuple(int(k) for k in args.kernel_set.split(",")) if args.kernel_set
                   else dg.KERNEL_SIZES)
        config = dg.DegradeConfig(kernel_sizes=kernels, max_layers=args.max_layers)
    except ValueError as exc:
        return _fail(str(exc), EXIT_INPUT)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, f, out_dir, args.seed, config) for i, f in enumerate(files)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_degrade_one, jobs))
    else:
        results = [_degrade_one(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    manifest = Path(args.manifest) if args.manifest else out_dir / "manifest.jsonl"
    ok = 0
    with open(manifest, "w") as fh:
        for _, name, record, err in results:
            if err is not None:
                print(f"skipped {name}: {err}", file=sys.stderr)
                continue
            fh.write(json.dumps(record) + "\n")
            ok += 1
    return EXIT_OK if ok else _fail("no image could be degraded", EXIT_INPUT)


def replay_record(record: dict, image: np.ndarray) -> np.ndarray:
    """Re-apply a manifest record to the source image."""
    return dg.apply_plan(image, dg.DegradationPlan.from_dict(record))


def cmd_count(args) -> int:
    rep = dg.count_report()
    if args.json:
        print(json.dumps(rep, indent=2))
        return EXIT_OK
    for key, row in rep.items():
        print(f"{key:>13}: exact {row['exact']:>20,}  printed {row['printed']:>20,}  "
              f"delta {row['delta']:+,}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics and preprocessing


def cmd_metrics(args) -> int:
    for p in (args.ref, args.test):
        if not Path(p).is_file():
            return _fail(f"file not found: {p}", EXIT_INPUT)
    try:
        with Image.open(args.ref) as a, Image.open(args.test) as b:
            labels = a.mode == "L" and b.mode == "L" and args.classes is not None
            ra, rb = np.asarray(a), np.asarray(b)
        if ra.shape[:2] != rb.shape[:2]:
            if not args.resize:
                return _fail(f"extent mismatch {ra.shape[:2]} vs {rb.shape[:2]} "
                             "(pass --resize to resample the test image)", EXIT_INPUT)
            with Image.open(args.test) as b:
                b = b.resize((ra.shape[1], ra.shape[0]),
                             Image.NEAREST if labels else Image.BILINEAR)
                rb = np.asarray(b)
        if ra.ndim != rb.ndim:
            ra, rb = read_rgb(args.ref), read_rgb(args.test)
            if ra.shape != rb.shape:
                rb = np.asarray(Image.fromarray(rb.astype(np.uint8)).resize(
                    (ra.shape[1], ra.shape[0]), Image.BILINEAR), dtype=np.float64)
        kw = {}
        if labels:
            kw = {"ref_labels": ra.astype(np.int64), "test_labels": rb.astype(np.int64),
                  "classes": args.classes}
        rep = metrics.evaluate(ra.astype(np.float64), rb.astype(np.float64), 255.0, **kw)
    except (ValueError, OSError, maskops.MaskError) as exc:
        return _fail(str(exc), EXIT_INPUT)
    print(json.dumps(rep.to_json_dict()))
    return EXIT_OK


def cmd_prepare(args) -> int:
    try:
        table = maskops.MergeTable.from_json(args.table) if args.table else None
        mask = maskops.LabelMask(read_labels(args.mask), "raw19")
        pair = maskops.prepare_pair(read_rgb(args.sharp), read_rgb(args.blurry), mask, table,
                                    args.size)
    except (InputError, ValueError) as exc:
        return _fail(str(exc), EXIT_INPUT)
    np.savez_compressed(args.out, sharp=pair.sharp, blurry=pair.blurry,
                        blurry_gray=pair.blurry_gray, mask=pair.mask.labels,
                        mask_onehot=pair.mask_onehot)
    return EXIT_OK


# ---------------------------------------------------------------------------
# networks


def _load_config(args) -> NetConfig:
    if not getattr(args, "config", None):
        return NetConfig()
    try:
        return NetConfig.from_json(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise InputError(f"bad config {args.config}: {exc}") from exc


def net_summary(kind: str, config: NetConfig) -> dict:
    graph = build_network(kind, config)
    counts = param_count(graph)
    shapes = {label: list(graph.declared_shape(nid, 1, config.input_size))
              for label, nid in graph.stages.items()}
    shapes["output"] = list(graph.declared_shape(graph.output, 1, config.input_size))
    ref = REFERENCE_PARAMS[kind]
    return {"kind": kind, "total": counts.total, "trainable": counts.trainable,
            "non_trainable": counts.non_trainable, "reference_total": ref,
            "relative_delta": (counts.total - ref) / ref, "stages": shapes}


def _net_inputs(kind, config, image_path, mask_path, mask_space="raw19"):
    size = config.input_size
    img = maskops.resize_image(read_rgb(image_path), size) / 255.0
    if kind == "mask_generator":
        return {"image": maskops.to_grayscale(img)[None]}
    if not config.mask_branch:
        return {"image": img[None]}
    if mask_path is None:
        raise InputError("smfd_unet forward needs --mask")
    mask = maskops.LabelMask(maskops.resize_mask(read_labels(mask_path), size), mask_space)
    labels = maskops.merge_labels(mask).labels if mask_space == "raw19" else mask.labels
    return {"image": img[None], "mask": maskops.one_hot(labels, config.classes)[None]}


def cmd_net(args) -> int:
    try:
        config = _load_config(args)
        if args.action == "summary":
            rep = net_summary(args.kind, config)
            if args.json:
                print(json.dumps(rep, indent=2))
            else:
                print(f"{rep['kind']}")
                print(f"  total parameters:         {rep['total']:,}")
                print(f"  trainable parameters:     {rep['trainable']:,}")
                print(f"  non-trainable parameters: {rep['non_trainable']:,}")
                print(f"  reference total:          {rep['reference_total']:,} "
                      f"(achieved {rep['relative_delta']:+.2%})")
                for label, shape in rep["stages"].items():
                    print(f"  {label:>12}: {tuple(shape)}")
            return EXIT_OK
        graph = build_network(args.kind, config)
        if args.action == "init":
            save_weights(init_weights(graph, args.seed, zeros=args.zeros), args.out)
            return EXIT_OK
        if args.action == "forward":
            if not args.weights or not args.image or not args.out:
                raise InputError("forward needs --weights, --image and --out")
            try:
                weights = load_weights(args.weights)
            except (OSError, WeightFileError) as exc:
                return _fail(str(exc), EXIT_MODEL)
            inputs = _net_inputs(args.kind, config, args.image, args.mask, args.mask_space)
            out = forward(graph, weights, inputs)[0]
            if args.kind == "mask_generator":
                write_labels(args.out, out.argmax(axis=-1))
            else:
                write_rgb(args.out, out * 255.0)
            return EXIT_OK
        if args.action == "train-smoke":
            from .train import synthetic_pairs, train_smoke

            out_dir = Path(args.out or ".")
            out_dir.mkdir(parents=True, exist_ok=True)
            data = synthetic_pairs(args.pairs, args.size, args.seed)
            res = train_smoke(args.kind, config, data, args.steps, args.seed, args.lr)
            res.write_trace(out_dir / "trace.csv")
            save_weights(res.best_weights, out_dir / "best.smfdw")
            save_weights(res.weights, out_dir / "final.smfdw")
            return EXIT_OK
    except WeightError as exc:
        return _fail(str(exc), EXIT_MODEL)
    except (InputError, GraphError, ValueError) as exc:
        return _fail(str(exc), EXIT_INPUT)
    return _fail(f"unknown action {args.action}", EXIT_INPUT)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smfd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("degrade", help="synthesize degraded copies of a PNG folder")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--manifest")
    d.add_argument("--kernel-set", help="comma-separated odd kernel sizes")
    d.add_argument("--max-layers", type=int, default=3)
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_degrade)

    c = sub.add_parser("count", help="print the plan-space combination counts")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_count)

    m = sub.add_parser("metrics", help="compare a test image against a reference")
    m.add_argument("--ref", required=True)
    m.add_argument("--test", required=True)
    m.add_argument("--classes", type=int, help="score single-channel inputs as label masks")
    m.add_argument("--resize", action="store_true")
    m.set_defaults(func=cmd_metrics)

    pr = sub.add_parser("prepare", help="build a normalized training pair (.npz)")
    pr.add_argument("--sharp", required=True)
    pr.add_argument("--blurry", required=True)
    pr.add_argument("--mask", required=True)
    pr.add_argument("--table", help="JSON merge table {raw_label: group}")
    pr.add_argument("--size", type=int, default=maskops.TARGET_SIZE)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_prepare)

    n = sub.add_parser("net", help="network summaries, forward passes and smoke training")
    n.add_argument("action", choices=("summary", "init", "forward", "train-smoke"))
    n.add_argument("--kind", choices=KINDS, required=True)
    n.add_argument("--config")
    n.add_argument("--json", action="store_true")
    n.add_argument("--weights")
    n.add_argument("--image")
    n.add_argument("--mask")
    n.add_argument("--mask-space", choices=("raw19", "merged5"), default="raw19")
    n.add_argument("--out")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--zeros", action="store_true", help="init: all-zero weights")
    n.add_argument("--steps", type=int, default=200)
    n.add_argument("--pairs", type=int, default=8)
    n.add_argument("--size", type=int, default=32)
    n.add_argument("--lr", type=float)
    n.set_defaults(func=cmd_net)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        return _fail(str(exc), EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
