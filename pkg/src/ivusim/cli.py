"""Command line entry point.

Subcommands cover the full pipeline: ingest -> augment -> simulate-stage0
-> train-stage1 -> train-stage2 -> generate -> evaluate / vtt-export /
vtt-score. Every run writes a manifest (effective config, seed, input
hashes, tool version) next to its outputs; wall-clock numbers go to a
separate timing file so pipeline artifacts stay byte-reproducible.

File conventions: `X.polar.png` for polar-grid images, `X.cart.png` for
scan-converted images, `X.mask.png` for tissue label masks.
"""
from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, bmode, imaging
from .config import SCHEMA, RunConfig, build_config, load_config_file, parse_value
from .dataset import (
    DatasetLayout,
    PhantomParams,
    TissueLabelMask,
    augment_plan,
    load_dataset,
    mask_to_echogenicity,
    rasterize_mask_polar,
    rotate_polar,
    shift_radial,
    synth_phantom,
)
from .imaging import (
    CartesianImage,
    PolarImage,
    TissueClass,
    cartesian_to_polar,
    read_mask_png,
    read_png,
    write_mask_png,
    write_png,
)

CONFIG_ENV_VAR = "IVUSIM_CONFIG"


# ---------------------------------------------------------------------------
# manifest helpers


def _hash_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_path(path: str) -> str:
    """Content hash of a file, or of a directory's sorted file hashes."""
    if os.path.isfile(path):
        return _hash_file(path)
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(path)):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, path)
            digest.update(rel.encode())
            digest.update(_hash_file(full).encode())
    return digest.hexdigest()


def _write_manifest(out_dir: str, command: str, cfg: RunConfig, inputs: dict,
                    extra: dict | None = None) -> None:
    manifest = {
        "tool": "ivusim",
        "version": __version__,
        "command": command,
        "config": cfg.values,
        "inputs": {
            name: {"path": str(path), "sha256": _hash_path(str(path))}
            for name, path in inputs.items()
        },
    }
    manifest.update(extra or {})
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_timing(out_dir: str, timing: dict) -> None:
    with open(os.path.join(out_dir, "timing.json"), "w") as fh:
        json.dump(timing, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# corpus IO helpers


def _mask_paths(directory: str) -> list[str]:
    paths = sorted(glob.glob(os.path.join(directory, "*.mask.png")))
    if not paths:
        raise ValueError(f"no *.mask.png files in {directory}")
    return paths


def _stem(path: str, suffix: str) -> str:
    return os.path.basename(path)[: -len(suffix)]


def _load_polar_corpus(directory: str, size: int | None = None):
    """All *.polar.png images in a directory, optionally resized."""
    paths = sorted(glob.glob(os.path.join(directory, "*.polar.png")))
    if not paths:
        raise ValueError(f"no *.polar.png files in {directory}")
    ids, images = [], []
    for path in paths:
        img = PolarImage(read_png(path))
        if size is not None and img.data.shape != (size, size):
            img = imaging.resize(img, size, size)
        ids.append(_stem(path, ".polar.png"))
        images.append(img.data)
    return ids, np.stack(images)


def _load_annotated_corpus(directory: str, size: int | None = None):
    """(PolarImage, TissueLabelMask) pairs: X.polar.png with X.mask.png."""
    items = []
    for path in sorted(glob.glob(os.path.join(directory, "*.polar.png"))):
        stem = _stem(path, ".polar.png")
        mask_path = os.path.join(directory, f"{stem}.mask.png")
        if not os.path.exists(mask_path):
            continue
        img = PolarImage(read_png(path))
        mask = TissueLabelMask(read_mask_png(mask_path), "polar")
        if size is not None and img.data.shape != (size, size):
            raise ValueError(
                f"{path}: expected {size}x{size}, got {img.data.shape}"
            )
        items.append((img, mask))
    if not items:
        raise ValueError(f"no annotated image pairs in {directory}")
    return items


def _echo_params(cfg: RunConfig):
    return {
        TissueClass.LUMEN: (cfg.echo_lumen_mean, cfg.echo_lumen_spread),
        TissueClass.MEDIA: (cfg.echo_media_mean, cfg.echo_media_spread),
        TissueClass.EXTERNA: (cfg.echo_externa_mean, cfg.echo_externa_spread),
    }


def _psf_params(cfg: RunConfig) -> bmode.PSFParams:
    return bmode.PSFParams(
        f0=cfg.psf_f0,
        sigma_axial=cfg.psf_sigma_axial,
        sigma_lateral=cfg.psf_sigma_lateral,
    )


def _build_stage1_models(cfg: RunConfig):
    from .models import Refiner, RefinerDiscriminator

    refiner = Refiner(
        width=cfg.g1_width, n_blocks=cfg.g1_blocks, input_size=cfg.refiner_size
    )
    disc = RefinerDiscriminator(
        base_width=cfg.d1_width,
        input_size=cfg.refiner_size,
        patch_output=cfg.d1_patch_output,
    )
    return refiner, disc


def _build_stage2_models(cfg: RunConfig):
    from .models import Upscaler, UpscalerDiscriminator

    upscaler = Upscaler(
        width=cfg.g2_width,
        n_blocks=cfg.g2_blocks,
        input_size=cfg.refiner_size,
        use_norm=cfg.g2_norm,
    )
    disc = UpscalerDiscriminator(
        base_width=cfg.d2_width,
        input_size=4 * cfg.refiner_size,
        use_norm=cfg.d2_norm,
    )
    return upscaler, disc


def _write_loss_history(path: str, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_g", "loss_d", "reg", "lr"])
        for r in records:
            writer.writerow([r.step, f"{r.loss_g:.9g}", f"{r.loss_d:.9g}",
                             f"{r.reg:.9g}", f"{r.lr:.9g}"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, cfg: RunConfig) -> int:
    layout = DatasetLayout(
        image_dir=cfg.image_dir,
        image_pattern=cfg.image_pattern,
        lumen_contour_pattern=cfg.lumen_contour_pattern,
        eel_contour_pattern=cfg.eel_contour_pattern,
        patient_id_regex=cfg.patient_id_regex,
    )
    loaded = load_dataset(args.root, layout)
    if loaded.n_images == 0:
        raise ValueError(f"no images found under {args.root}")
    os.makedirs(args.out, exist_ok=True)
    n_masks = 0
    for item in loaded.items:
        polar = cartesian_to_polar(item.image, cfg.n_radial, cfg.n_angular)
        write_png(os.path.join(args.out, f"{item.image_id}.polar.png"), polar.data)
        if item.annotation is not None:
            side = item.image.side
            mask = rasterize_mask_polar(
                item.annotation, side, cfg.n_radial, cfg.n_angular
            )
            write_mask_png(
                os.path.join(args.out, f"{item.image_id}.mask.png"), mask.data
            )
            n_masks += 1
    _write_manifest(
        args.out, "ingest", cfg, {"root": args.root},
        {"n_images": loaded.n_images, "n_annotated": loaded.n_annotated,
         "n_skipped": loaded.n_skipped, "n_masks_written": n_masks},
    )
    print(f"ingested {loaded.n_images} images, wrote {n_masks} polar masks")
    return 0


def cmd_augment(args, cfg: RunConfig) -> int:
    paths = _mask_paths(getattr(args, "in"))
    os.makedirs(args.out, exist_ok=True)
    rows = []
    n_out = 0
    for path in paths:
        source_id = _stem(path, ".mask.png")
        mask = TissueLabelMask(read_mask_png(path), "polar")
        for step, shift in augment_plan(mask.data.shape[0]):
            variant = shift_radial(rotate_polar(mask, step), shift)
            name = f"{source_id}_r{step:02d}_s{shift:+03d}.mask.png"
            write_mask_png(os.path.join(args.out, name), variant.data)
            rows.append((source_id, step, shift, name))
            n_out += 1
    with open(os.path.join(args.out, "augment_manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_id", "rotation_step", "radial_shift", "path"])
        writer.writerows(rows)
    _write_manifest(
        args.out, "augment", cfg, {"in": getattr(args, "in")},
        {"n_sources": len(paths), "n_outputs": n_out},
    )
    print(f"augmented {len(paths)} masks into {n_out} variants")
    return 0


def cmd_simulate_stage0(args, cfg: RunConfig) -> int:
    paths = _mask_paths(getattr(args, "in"))
    os.makedirs(args.out, exist_ok=True)
    psf = _psf_params(cfg)
    echo = _echo_params(cfg)
    for i, path in enumerate(paths):
        stem = _stem(path, ".mask.png")
        mask = TissueLabelMask(read_mask_png(path), "polar")
        emap = mask_to_echogenicity(mask, echo, seed=cfg.seed + 2 * i)
        img = bmode.simulate(emap, psf, cfg.dynamic_range_db, seed=cfg.seed + 2 * i + 1)
        write_png(os.path.join(args.out, f"{stem}.polar.png"), img.data)
    _write_manifest(
        args.out, "simulate-stage0", cfg, {"in": getattr(args, "in")},
        {"n_images": len(paths)},
    )
    print(f"simulated {len(paths)} pseudo B-mode images")
    return 0


def cmd_train_stage1(args, cfg: RunConfig) -> int:
    import torch

    from .training import Stage1Config, train_stage1

    torch.manual_seed(cfg.seed)  # model init draws from the global torch RNG
    _, source = _load_polar_corpus(args.source, size=cfg.refiner_size)
    _, real = _load_polar_corpus(args.real, size=cfg.refiner_size)
    stage_cfg = Stage1Config(
        learning_rate=cfg.s1_lr,
        epochs=cfg.s1_epochs,
        batch_size=cfg.s1_batch,
        lam=cfg.s1_lambda,
        history_batches=cfg.s1_history_batches,
        micro_batch=cfg.s1_micro_batch or None,
    )
    refiner, disc = _build_stage1_models(cfg)
    t0 = time.perf_counter()
    refiner, disc, records = train_stage1(
        source, real, stage_cfg, seed=cfg.seed,
        refiner=refiner, discriminator=disc, out_dir=args.out,
        epoch_callback=lambda e, recs: print(
            f"epoch {e}: loss_g {recs[-1].loss_g:.4f} loss_d {recs[-1].loss_d:.4f}"
        ),
    )
    elapsed = time.perf_counter() - t0
    _write_loss_history(os.path.join(args.out, "stage1_losses.csv"), records)
    _write_manifest(
        args.out, "train-stage1", cfg,
        {"source": args.source, "real": args.real},
        {"n_source": len(source), "n_real": len(real), "n_updates": len(records),
         "micro_batch_deviation": bool(cfg.s1_micro_batch)},
    )
    _write_timing(args.out, {"train_s": elapsed})
    print(f"stage 1 done: {len(records)} updates in {elapsed:.1f}s")
    return 0


def cmd_train_stage2(args, cfg: RunConfig) -> int:
    import torch

    from .training import Stage2Config, load_checkpoint, train_stage2

    torch.manual_seed(cfg.seed)  # model init draws from the global torch RNG
    ckpt = load_checkpoint(args.stage1_checkpoint, expect_stage="stage1")
    refiner = ckpt.models["refiner"]
    _, source = _load_polar_corpus(args.source, size=refiner.input_size)
    _, real = _load_polar_corpus(args.real, size=4 * refiner.input_size)
    stage_cfg = Stage2Config(
        initial_learning_rate=cfg.s2_lr,
        decay=cfg.s2_decay,
        decay_every=cfg.s2_decay_every,
        epochs=cfg.s2_epochs,
        batch_size=cfg.s2_batch,
    )
    upscaler, disc = _build_stage2_models(cfg)
    t0 = time.perf_counter()
    upscaler, disc, records = train_stage2(
        source, real, refiner, stage_cfg, seed=cfg.seed,
        upscaler=upscaler, discriminator=disc, out_dir=args.out,
        epoch_callback=lambda e, recs: print(
            f"epoch {e}: loss_g {recs[-1].loss_g:.4f} loss_d {recs[-1].loss_d:.4f}"
        ),
    )
    elapsed = time.perf_counter() - t0
    _write_loss_history(os.path.join(args.out, "stage2_losses.csv"), records)
    _write_manifest(
        args.out, "train-stage2", cfg,
        {"source": args.source, "real": args.real,
         "stage1_checkpoint": args.stage1_checkpoint},
        {"n_source": len(source), "n_real": len(real), "n_updates": len(records)},
    )
    _write_timing(args.out, {"train_s": elapsed})
    print(f"stage 2 done: {len(records)} updates in {elapsed:.1f}s")
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    from .training import generate, load_checkpoint

    t_load0 = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint, expect_stage="stage2")
    refiner = ckpt.models["refiner"]
    upscaler = ckpt.models["upscaler"]
    load_s = time.perf_counter() - t_load0

    psf = _psf_params(cfg)
    echo = _echo_params(cfg)
    tasks = []
    if args.masks is not None:
        for path in _mask_paths(args.masks):
            tasks.append((_stem(path, ".mask.png"),
                          TissueLabelMask(read_mask_png(path), "polar")))
    else:
        phantom = PhantomParams(n_radial=cfg.n_radial, n_angular=cfg.n_angular)
        for i in range(args.phantoms):
            mask, _ = synth_phantom(seed=cfg.seed + i, params=phantom)
            tasks.append((f"phantom_{i:05d}", mask))

    os.makedirs(args.out, exist_ok=True)
    per_image = []
    for i, (stem, mask) in enumerate(tasks):
        emap = mask_to_echogenicity(mask, echo, seed=cfg.seed + 2 * i)
        result = generate(
            refiner, upscaler, emap, psf, cfg.dynamic_range_db,
            seed=cfg.seed + 2 * i + 1, cart_side=cfg.cart_side,
        )
        write_png(os.path.join(args.out, f"{stem}.polar.png"), result.polar.data)
        write_png(os.path.join(args.out, f"{stem}.cart.png"), result.cartesian.data)
        if args.save_masks:
            write_mask_png(os.path.join(args.out, f"{stem}.mask.png"), mask.data)
        per_image.append(result.elapsed_s)

    inputs = {"checkpoint": args.checkpoint}
    if args.masks is not None:
        inputs["masks"] = args.masks
    _write_manifest(args.out, "generate", cfg, inputs, {"n_images": len(tasks)})
    _write_timing(args.out, {
        "checkpoint_load_s": load_s,
        "per_image_s": per_image,
        "mean_image_s": float(np.mean(per_image)),
        "amortized_s": (load_s + float(np.sum(per_image))) / len(per_image),
    })
    print(
        f"generated {len(tasks)} images: load {load_s * 1e3:.0f} ms, "
        f"mean {float(np.mean(per_image)) * 1e3:.1f} ms/image"
    )
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .evaluation import (
        table1_report,
        table1_to_csv,
        table1_to_text,
        table2_report,
        table2_to_csv,
        table2_to_text,
    )

    real_items = _load_annotated_corpus(args.real)
    sim_sources = {}
    for spec in args.sim:
        name, _, path = spec.rpartition("=")
        if not name:
            name, path = "sim", path
        sim_sources[name] = _load_annotated_corpus(path)

    table1_rows = {
        name: table1_report(real_items, items, n=cfg.eval_n, seed=cfg.seed)
        for name, items in sim_sources.items()
    }
    table2_rows = {"real": table2_report(real_items, n=cfg.eval_n, seed=cfg.seed)}
    for name, items in sim_sources.items():
        table2_rows[name] = table2_report(items, n=cfg.eval_n, seed=cfg.seed)

    os.makedirs(args.out, exist_ok=True)
    text = table1_to_text(table1_rows) + "\n" + table2_to_text(table2_rows)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(text)
    table1_to_csv(table1_rows, os.path.join(args.out, "table1.csv"))
    table2_to_csv(table2_rows, os.path.join(args.out, "table2.csv"))
    inputs = {"real": args.real}
    for spec in args.sim:
        name, _, path = spec.rpartition("=")
        inputs[f"sim:{name or 'sim'}"] = path
    _write_manifest(args.out, "evaluate", cfg, inputs, {})
    print(text, end="")
    return 0


def cmd_vtt_export(args, cfg: RunConfig) -> int:
    from .evaluation import vtt_export

    def load_cart(directory):
        paths = sorted(glob.glob(os.path.join(directory, "*.cart.png")))
        if not paths:
            raise ValueError(f"no *.cart.png files in {directory}")
        return [CartesianImage(read_png(p)) for p in paths]

    manifest = vtt_export(
        load_cart(args.real), load_cart(args.sim),
        n_pairs=args.pairs, seed=cfg.seed, out_dir=args.out,
    )
    _write_manifest(
        args.out, "vtt-export", cfg,
        {"real": args.real, "sim": args.sim}, {"n_pairs": len(manifest.pairs)},
    )
    print(f"exported {len(manifest.pairs)} pairs to {args.out}")
    return 0


def cmd_vtt_score(args, cfg: RunConfig) -> int:
    from .evaluation import VTTManifest, VTTPair, load_vtt_key, vtt_score

    truth = load_vtt_key(args.key)
    with open(args.responses, newline="") as fh:
        rows = list(csv.DictReader(fh))
    responses = [row["guess"].strip() for row in rows]
    manifest = VTTManifest(
        [VTTPair(i, "", "") for i in range(len(truth))], truth, cfg.seed
    )
    score = vtt_score(manifest, responses)
    line = (
        f"accuracy {score.accuracy:.4f} "
        f"(95%CI {score.ci_low:.4f}..{score.ci_high:.4f}, n={score.n})"
    )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "score.json"), "w") as fh:
            json.dump(
                {"accuracy": score.accuracy, "ci_low": score.ci_low,
                 "ci_high": score.ci_high, "n": score.n},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
    print(line)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivusim",
        description="Patho-realistic IVUS simulation from tissue echogenicity maps",
    )
    parser.add_argument("--version", action="version", version=f"ivusim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--jobs", type=int,
                       help="parallelism bound (default 1, deterministic)")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override one config key",
        )

    p = sub.add_parser("ingest", help="convert a contoured dataset to polar images and masks")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("augment", help="expand masks by rotations and radial shifts")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("simulate-stage0", help="speckle simulation from tissue masks")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_simulate_stage0)

    p = sub.add_parser("train-stage1", help="train the refiner")
    p.add_argument("--source", required=True, help="pseudo B-mode corpus dir")
    p.add_argument("--real", required=True, help="real polar corpus dir")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the upscaler")
    p.add_argument("--source", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--stage1-checkpoint", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("generate", help="simulate images from masks or phantoms")
    p.add_argument("--checkpoint", required=True, help="stage 2 checkpoint")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--masks", help="directory of *.mask.png inputs")
    group.add_argument("--phantoms", type=int, help="number of synthetic phantoms")
    p.add_argument("--save-masks", action="store_true",
                   help="copy the input masks next to the outputs")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="region PMF divergence tables")
    p.add_argument("--real", required=True, help="annotated real corpus dir")
    p.add_argument("--sim", required=True, action="append",
                   help="annotated simulated corpus dir, optionally NAME=DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="images sampled per corpus")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("vtt-export", help="export visual Turing test pairs")
    p.add_argument("--real", required=True)
    p.add_argument("--sim", required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_vtt_export)

    p = sub.add_parser("vtt-score", help="score visual Turing test responses")
    p.add_argument("--key", required=True, help="key.csv from vtt-export")
    p.add_argument("--responses", required=True, help="csv with pair_id,guess")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_vtt_score)

    return parser


def _effective_config(args) -> RunConfig:
    file_values = None
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    if path:
        file_values = load_config_file(path)
    overrides = {}
    for item in getattr(args, "overrides", []):
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = parse_value(key.strip(), raw)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise ValueError(f"--jobs must be >= 1, got {args.jobs}")
        overrides["jobs"] = args.jobs
    if getattr(args, "n", None) is not None:
        overrides["eval_n"] = args.n
    return build_config(file_values, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        cfg = _effective_config(args)
        return args.func(args, cfg)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
