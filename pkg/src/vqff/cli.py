"""``vqff`` command line: synth, segment, build, stats, query and friends.

Every subcommand accepts ``--config <json>``; explicit flags override the
file, which overrides the built-in defaults.  Failures print one line,
``error: <command>: <Type>: <message>``, and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import VqffError
from .feature_io import (
    FeatureMap,
    SceneManifest,
    SyntheticSceneSpec,
    generate_synthetic_scene,
    load_feature_map,
    pca_visualize,
    read_mask_pgm,
    read_ppm,
    read_vqft,
    save_feature_map,
    unit_rows,
    write_pgm,
    write_ppm,
    write_vqft,
)
from .quantizer_global import GlobalBuildParams, SuperpixelParams, build_vqff
from .quantizer_local import quantize_patch, quantize_superpixel
from .query_engine import (
    CANONICAL_PHRASES,
    QueryContext,
    QueryEngine,
    RelevancyMap,
    detection_pr,
    load_annotations,
    load_query,
    max_relevancy_location,
    save_query,
)
from .semantic_lift import compose_edit, select_frames
from .superpixel import save_segmentation, segment_stats, slic_segment
from .vqff_store import (
    cosine_fidelity,
    load_store,
    reconstruct_feature_map,
    reference_map,
    save_store,
    store_stats,
)

log = logging.getLogger("vqff")

PATCH_GRID = [2, 4, 8, 12, 16, 20, 24, 32]
SUPERPIXEL_GRID = [8192, 4096, 2048, 1024, 512, 256, 128, 64]

DEFAULTS = {
    "seed": 0,
    "alpha": 0.05,
    "batches": 1,
    "superpixels": 1024,
    "compactness": 10.0,
    "slic_iters": 10,
    "kmeans_iters": 20,
    "budget": None,
    "merge_batches": False,
    "weighted": False,
    "tau": 0.5,
    "threshold_frac": 0.10,
    "cap_per_group": 25,
    "total_cap": 50,
    "threads": None,
    "images": 20,
    "scales": 2,
    "height": 128,
    "width": 128,
    "dim": 32,
    "regions": 6,
    "noise": 0.05,
    "presence": 1.0,
    "sample_n": 20,
    "patch_sizes": PATCH_GRID,
    "superpixel_grid": SUPERPIXEL_GRID,
    "num_thresholds": 101,
    "format": "json",
}

# Keys that only affect scheduling or file locations, never results.
_NOT_ECHOED = {"threads", "config", "out", "command", "func", "verbose", "options"}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: cli: UsageError: {message}\n")
        sys.exit(2)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of parameter defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--batches", type=int)
    p.add_argument("--superpixels", type=int)
    p.add_argument("--compactness", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--threshold-frac", dest="threshold_frac", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    _common(p)
    for name in ("images", "scales", "height", "width", "dim", "regions"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--presence", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="SLIC superpixels for every image of a scene")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--slic-iters", dest="slic_iters", type=int)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("build", help="quantize a scene into a store")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--budget", help="total codebook cap; 'default', 'inf' or a number")
    p.add_argument("--kmeans-iters", dest="kmeans_iters", type=int)
    p.add_argument("--slic-iters", dest="slic_iters", type=int)
    p.add_argument("--merge-batches", dest="merge_batches", action="store_const", const=True)
    p.add_argument("--weighted", action="store_const", const=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("stats", help="memory accounting of a store")
    _common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--format", choices=["json", "csv"])
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("query", help="relevancy maps and masks for a query file")
    _common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--scale", type=int, help="single scale instead of the multiscale max")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("reconstruct", help="dense feature map from a store")
    _common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("fidelity", help="cosine fidelity of a store against its scene")
    _common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--format", choices=["json", "csv"])
    p.set_defaults(func=cmd_fidelity)

    p = sub.add_parser("compose-edit", help="mask-composite edited images over originals")
    _common(p)
    p.add_argument("--original", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--masks", required=True)
    p.set_defaults(func=cmd_compose_edit)

    p = sub.add_parser("select-frames", help="relevance-based frame selection from masks")
    _common(p)
    p.add_argument("--masks", required=True)
    p.add_argument("--cap-per-group", dest="cap_per_group", type=int)
    p.add_argument("--total-cap", dest="total_cap", type=int)
    p.set_defaults(func=cmd_select_frames)

    p = sub.add_parser("pr-eval", help="max-relevancy precision/recall against boxes")
    _common(p)
    p.add_argument("--relevancy", required=True, help="directory of relevancy .vqft maps")
    p.add_argument("--annotations", required=True)
    p.add_argument("--label", help="query label to evaluate (default: all boxes)")
    p.add_argument("--num-thresholds", dest="num_thresholds", type=int)
    p.set_defaults(func=cmd_pr_eval)

    p = sub.add_parser("visualize", help="PCA false-color render of a feature map")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--feature")
    src.add_argument("--store")
    p.add_argument("--image")
    p.add_argument("--scale", type=int)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("compare-local", help="superpixel vs patch local quantization sweep")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--patch-sizes", dest="patch_sizes", type=int, nargs="+")
    p.add_argument("--superpixel-grid", dest="superpixel_grid", type=int, nargs="+")
    p.add_argument("--sample-n", dest="sample_n", type=int)
    p.set_defaults(func=cmd_compare_local)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise CliError("config file must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
    for key, value in vars(args).items():
        if value is not None:
            cfg[key] = value
        else:
            cfg.setdefault(key, None)
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    cfg["options"] = sorted(vars(args))
    return cfg


def _echo_config(cfg: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    # Input paths are left out so runs over copied inputs echo identically.
    keep = {
        k: cfg[k]
        for k in cfg["options"]
        if k not in _NOT_ECHOED and (not isinstance(cfg[k], str) or k in ("budget", "format", "label"))
    }
    doc = {"command": cfg["command"], "params": dict(sorted(keep.items()))}
    (directory / "run_config.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _write_csv(path_or_none, header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if path_or_none is not None:
        Path(path_or_none).write_text(text, encoding="utf-8")
    return text


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def synthetic_canonicals(region_embeddings: np.ndarray, seed: int) -> np.ndarray:
    """Four background probes near the scene's mean embedding."""
    rng = np.random.default_rng([seed, 3])
    mean = region_embeddings.astype(np.float64).sum(axis=0)
    mean /= max(np.linalg.norm(mean), 1e-12)
    probes = mean[None, :] + 0.1 * rng.standard_normal((len(CANONICAL_PHRASES), len(mean)))
    return unit_rows(probes)[0]


def cmd_synth(cfg: dict) -> None:
    spec = SyntheticSceneSpec(
        num_images=cfg["images"],
        num_scales=cfg["scales"],
        height=cfg["height"],
        width=cfg["width"],
        dim=cfg["dim"],
        num_regions=cfg["regions"],
        noise_sigma=cfg["noise"],
        seed=cfg["seed"],
        region_presence=cfg["presence"],
    )
    scene = generate_synthetic_scene(spec)
    out = Path(cfg["out"])
    scene.write(out)
    (out / "edited").mkdir(exist_ok=True)
    (out / "queries").mkdir(exist_ok=True)
    for image_id, rgb in scene.rgb.items():
        write_ppm(out / "edited" / f"{image_id}.ppm", (255 - rgb).astype(np.uint8))
    canon = synthetic_canonicals(scene.region_embeddings, spec.seed)
    annotations = []
    for r, emb in enumerate(scene.region_embeddings):
        label = f"region_{r:02d}"
        save_query(out / "queries" / f"{label}.vqfq", QueryContext(emb, canon, list(CANONICAL_PHRASES), label=label))
        for i, image_id in enumerate(scene.manifest.image_ids):
            rows, cols = np.nonzero(scene.labels[i] == r)
            boxes = [] if len(rows) == 0 else [[int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())]]
            annotations.append({"image_id": image_id, "query_label": label, "boxes": boxes})
    _write_json(out / "annotations.json", annotations)
    _echo_config(cfg, out)
    print(out / "scene.json")


def _superpixel_params(cfg) -> SuperpixelParams:
    return SuperpixelParams(
        n_superpixels=int(cfg["superpixels"]),
        compactness=float(cfg["compactness"]),
        max_iters=int(cfg["slic_iters"]),
    )


def cmd_segment(cfg: dict) -> None:
    manifest = SceneManifest.load(cfg["scene"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    sp = _superpixel_params(cfg)
    rgb_loader = manifest.rgb_loader()
    feat_loader = manifest.feature_loader()
    report = {}
    for image_id in manifest.image_ids:
        rgb = rgb_loader(image_id)
        if rgb is None:
            rgb = pca_visualize(feat_loader(image_id, manifest.scale_ids[0]))
        n = min(sp.n_superpixels, rgb.shape[0] * rgb.shape[1])
        seg = slic_segment(rgb, n, sp.compactness, sp.max_iters)
        save_segmentation(out / f"{image_id}.vqfs", seg)
        stats = segment_stats(seg)
        report[image_id] = {"num_segments": seg.num_segments, "boundary_pixels": stats["boundary_pixels"]}
    _write_json(out / "segments.json", report)
    _echo_config(cfg, out)


def _parse_budget(value):
    if value is None or value == "default":
        return None
    if isinstance(value, str) and value.lower() in ("inf", "none", "off"):
        return math.inf
    return float(value)


def cmd_build(cfg: dict) -> None:
    manifest = SceneManifest.load(cfg["scene"])
    params = GlobalBuildParams(
        alpha=float(cfg["alpha"]),
        budget_k=_parse_budget(cfg["budget"]),
        num_batches=int(cfg["batches"]),
        kmeans_max_iters=int(cfg["kmeans_iters"]),
        seed=int(cfg["seed"]),
        weighted=bool(cfg["weighted"]),
        merge_batches=bool(cfg["merge_batches"]),
    )
    store = build_vqff(manifest, _superpixel_params(cfg), params, threads=int(cfg["threads"]))
    out = Path(cfg["out"])
    path = save_store(store, out)
    _echo_config(cfg, out)
    print(path)


def cmd_stats(cfg: dict) -> None:
    stats = store_stats(load_store(cfg["store"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    doc = stats.to_json()
    if cfg["format"] == "csv":
        text = _write_csv(out / "stats.csv", ["metric", "value"], [(k, v) for k, v in doc.items() if not isinstance(v, (dict, list))])
    else:
        text = json.dumps(doc, indent=2) + "\n"
        (out / "stats.json").write_text(text, encoding="utf-8")
    _echo_config(cfg, out)
    sys.stdout.write(text)


def cmd_query(cfg: dict) -> None:
    store = load_store(cfg["store"])
    ctx = load_query(cfg["query"], threshold=float(cfg["tau"]))
    engine = QueryEngine(store)
    out = Path(cfg["out"])
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "relevancy").mkdir(parents=True, exist_ok=True)
    report = []
    for rmap in engine.relevancy(ctx, cfg.get("scale")):
        mask = rmap.values > ctx.threshold
        write_pgm(out / "masks" / f"{rmap.image_id}.pgm", mask)
        write_vqft(out / "relevancy" / f"{rmap.image_id}.vqft", rmap.values.astype(np.float32))
        row, col, value = max_relevancy_location(rmap)
        report.append(
            {"image_id": rmap.image_id, "pixel_count": int(mask.sum()), "max": {"row": row, "col": col, "value": value}}
        )
    _write_json(out / "query_report.json", {"label": ctx.label, "tau": ctx.threshold, "images": report})
    _echo_config(cfg, out)


def cmd_reconstruct(cfg: dict) -> None:
    store = load_store(cfg["store"])
    fmap = reconstruct_feature_map(store, cfg["image"], cfg["scale"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_feature_map(out, fmap)


def _ground_truth(scene_path: Path):
    gt = scene_path.parent / "ground_truth.npz"
    if not gt.exists():
        return None
    with np.load(gt) as z:
        return z["labels"], z["region_embeddings"]


def cmd_fidelity(cfg: dict) -> None:
    store = load_store(cfg["store"])
    manifest = SceneManifest.load(cfg["scene"])
    loader = manifest.feature_loader()
    gt = _ground_truth(Path(cfg["scene"]))
    rows = []
    for i, image_id in enumerate(store.image_ids):
        for s in store.scale_ids:
            original = loader(image_id, s)
            recon = reconstruct_feature_map(store, image_id, s)
            row = [image_id, s, cosine_fidelity(original, recon), cosine_fidelity(original, reference_map(original))]
            if gt is not None:
                clean = FeatureMap(gt[1][gt[0][i]])
                row += [cosine_fidelity(clean, recon), cosine_fidelity(clean, reference_map(original))]
            rows.append(row)
    header = ["image_id", "scale_id", "fidelity", "reference"]
    if gt is not None:
        header += ["fidelity_ground_truth", "reference_ground_truth"]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    means = {h: float(np.mean([r[k] for r in rows])) for k, h in enumerate(header) if k >= 2}
    if cfg["format"] == "csv":
        text = _write_csv(out / "fidelity.csv", header, [r[:2] + [_fmt(x) for x in r[2:]] for r in rows])
    else:
        text = json.dumps({"mean": means, "rows": [dict(zip(header, r)) for r in rows]}, indent=2) + "\n"
        (out / "fidelity.json").write_text(text, encoding="utf-8")
    _echo_config(cfg, out)
    sys.stdout.write(json.dumps(means) + "\n")


def _pairs(original: Path, edited: Path, masks: Path):
    if original.is_dir():
        for path in sorted(original.glob("*.ppm")):
            yield path.stem, path, edited / path.name, masks / f"{path.stem}.pgm"
    else:
        yield original.stem, original, edited, masks


def cmd_compose_edit(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for stem, orig, edit, mask in _pairs(Path(cfg["original"]), Path(cfg["edited"]), Path(cfg["masks"])):
        composed = compose_edit(read_ppm(orig), read_ppm(edit), read_mask_pgm(mask))
        write_ppm(out / f"{stem}.ppm", composed)
        count += 1
    _echo_config(cfg, out)
    print(count)


def cmd_select_frames(cfg: dict) -> None:
    mask_dir = Path(cfg["masks"])
    paths = sorted(mask_dir.glob("*.pgm"))
    masks = [read_mask_pgm(p) for p in paths]
    sel = select_frames(
        masks,
        rel_threshold=float(cfg["threshold_frac"]),
        cap_per_group=int(cfg["cap_per_group"]),
        total_cap=int(cfg["total_cap"]),
        image_ids=[p.stem for p in paths],
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "selection.json", sel.to_json())
    _echo_config(cfg, out)
    print(f"{len(sel.selected)}/{len(masks)}")


def cmd_pr_eval(cfg: dict) -> None:
    rel_dir = Path(cfg["relevancy"])
    boxes = load_annotations(cfg["annotations"], cfg.get("label"))
    preds = {}
    for path in sorted(rel_dir.glob("*.vqft")):
        values = read_vqft(path)[:, :, 0].astype(np.float64)
        preds[path.stem] = max_relevancy_location(RelevancyMap(values, path.stem))
    for image_id in preds:
        boxes.setdefault(image_id, [])
    boxes = {k: v for k, v in boxes.items() if k in preds}
    thresholds = np.linspace(0.0, 1.0, int(cfg["num_thresholds"]))
    curve = detection_pr(preds, boxes, thresholds)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "pr.csv",
        ["threshold", "tp", "fp", "fn", "precision", "recall", "precision_defined", "recall_defined"],
        [
            [_fmt(p.threshold), p.tp, p.fp, p.fn, _fmt(p.precision), _fmt(p.recall), int(p.precision_defined), int(p.recall_defined)]
            for p in curve
        ],
    )
    _echo_config(cfg, out)


def cmd_visualize(cfg: dict) -> None:
    if cfg.get("feature"):
        fmap = load_feature_map(cfg["feature"])
    else:
        if cfg.get("image") is None or cfg.get("scale") is None:
            raise CliError("--store needs --image and --scale")
        fmap = reconstruct_feature_map(load_store(cfg["store"]), cfg["image"], cfg["scale"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, pca_visualize(fmap))


def compare_local(
    manifest: SceneManifest,
    patch_sizes=PATCH_GRID,
    superpixel_grid=SUPERPIXEL_GRID,
    sample_n: int = 20,
    compactness: float = 10.0,
    slic_iters: int = 10,
    ground_truth=None,
    feature_loader=None,
    rgb_loader=None,
) -> list[dict]:
    """Mean reconstruction cosine of both local quantizers over the sweep grids.

    Images are sampled at stride ``max(1, N // sample_n)`` (at most
    ``sample_n`` of them); every scale of a sampled image is evaluated.
    ``ground_truth`` is ``(labels, region_embeddings)`` when available.
    """
    feature_loader = feature_loader or manifest.feature_loader()
    rgb_loader = rgb_loader or manifest.rgb_loader()
    ids = manifest.image_ids
    stride = max(1, len(ids) // sample_n)
    sampled = list(range(0, len(ids), stride))[:sample_n]
    if not patch_sizes and not superpixel_grid:
        raise ValueError("both sweep grids are empty")

    acc = {}
    for i in sampled:
        image_id = ids[i]
        maps = {s: feature_loader(image_id, s) for s in manifest.scale_ids}
        first = maps[manifest.scale_ids[0]]
        h, w = first.height, first.width
        clean = None if ground_truth is None else FeatureMap(ground_truth[1][ground_truth[0][i]])
        rgb = rgb_loader(image_id)
        if rgb is None:
            rgb = pca_visualize(first)
        for method, grid in (("patch", patch_sizes), ("superpixel", superpixel_grid)):
            for param in grid:
                if method == "patch" and param > min(h, w):
                    log.warning("skipping patch size %d for %dx%d images", param, h, w)
                    continue
                if method == "superpixel" and param > h * w:
                    log.warning("skipping %d superpixels for %dx%d images", param, h, w)
                    continue
                seg = slic_segment(rgb, param, compactness, slic_iters) if method == "superpixel" else None
                for fmap in maps.values():
                    if seg is None:
                        book, imap = quantize_patch(fmap, param)
                    else:
                        book, imap = quantize_superpixel(fmap, seg)
                    recon = FeatureMap(book.entries[imap])
                    entry = acc.setdefault((method, param), {"cells": [], "orig": [], "gt": []})
                    entry["cells"].append(len(book))
                    entry["orig"].append(cosine_fidelity(fmap, recon))
                    if clean is not None:
                        entry["gt"].append(cosine_fidelity(clean, recon))
    rows = []
    for (method, param), e in acc.items():
        rows.append(
            {
                "method": method,
                "param": param,
                "cells": float(np.mean(e["cells"])),
                "cos_original": float(np.mean(e["orig"])),
                "cos_ground_truth": float(np.mean(e["gt"])) if e["gt"] else None,
                "images": len(sampled),
            }
        )
    return rows


def cmd_compare_local(cfg: dict) -> None:
    scene_path = Path(cfg["scene"])
    manifest = SceneManifest.load(scene_path)
    rows = compare_local(
        manifest,
        patch_sizes=cfg["patch_sizes"],
        superpixel_grid=cfg["superpixel_grid"],
        sample_n=int(cfg["sample_n"]),
        compactness=float(cfg["compactness"]),
        slic_iters=int(cfg["slic_iters"]),
        ground_truth=_ground_truth(scene_path),
    )
    has_gt = any(r["cos_ground_truth"] is not None for r in rows)
    header = ["method", "param", "cells", "cos_original"] + (["cos_ground_truth"] if has_gt else [])
    body = []
    for r in rows:
        line = [r["method"], r["param"], f"{r['cells']:.1f}", _fmt(r["cos_original"])]
        if has_gt:
            line.append(_fmt(r["cos_ground_truth"]))
        body.append(line)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    sys.stdout.write(_write_csv(out / "compare_local.csv", header, body))
    _echo_config(cfg, out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        # BLAS stays single-threaded; parallelism comes from our own pools so
        # results cannot depend on --threads.
        with threadpool_limits(limits=1):
            args.func(cfg)
    except (CliError, VqffError, ValueError, OSError, KeyError, RuntimeError) as exc:
        message = str(exc).replace("\n", " ")
        sys.stderr.write(f"error: {args.command}: {type(exc).__name__}: {message}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
