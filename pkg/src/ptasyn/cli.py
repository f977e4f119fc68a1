"""Command-line interface.

Commands: phantom, train, synth, eval, selftest. Every command validates
its configuration before doing work, writes the fully resolved config next
to its outputs, and is idempotent for a fixed config and seed. Exit codes:
0 success, 1 runtime failure, 2 configuration or validation failure.

The PTASYN_OUT_ROOT environment variable, when set, anchors relative
output directories.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .config import RunConfig
from .errors import CheckpointError, ConfigurationError, DatasetError, PtasynError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _out_path(raw: str) -> Path:
    root = os.environ.get("PTASYN_OUT_ROOT")
    path = Path(raw)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_dataset(path: Path):
    from .data import load_dataset

    return load_dataset(path)


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    from . import report
    from .data import build_phantom_pair, save_dataset, save_pairing_manifest

    run = RunConfig.load(args.config, args.set)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = run.phantom_config()
    hf, lf, pairing = build_phantom_pair(cfg)
    save_dataset(hf, out / "hf")
    save_dataset(lf, out / "lf")
    save_pairing_manifest(out / "pairing.json", pairing)
    run.write_resolved(out / "config.resolved.json")
    if args.previews:
        report.save_slice_montage(hf, out / "hf_montage.png", title="high-field phantoms")
        report.save_slice_montage(lf, out / "lf_montage.png", title="low-field phantoms")
    print(f"wrote {len(hf)} HF and {len(lf)} LF slices "
          f"({cfg.num_volumes} volumes x {cfg.slices_per_volume}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from . import report
    from .losses import write_loss_csv
    from .nets import load_checkpoint, save_checkpoint, sha256_file
    from .training import pretrain_lsc, pretrain_sgp, train_pta

    run = RunConfig.load(args.config, args.set)
    stage = args.stage
    cfg = run.train_config(stage)
    net_cfg = run.network_config()
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    if stage in ("sgp", "pta") and not args.lf:
        raise ConfigurationError(f"stage {stage} requires --lf")
    if not args.hf:
        raise ConfigurationError(f"stage {stage} requires --hf")
    hf = _load_dataset(_out_path(args.hf))
    lf = _load_dataset(_out_path(args.lf)) if args.lf else None

    checkpoint_hashes = {}
    if stage == "sgp":
        encoder, history = pretrain_sgp(lf, hf, cfg, net_cfg)
        tensors = {f"encoder.{k}": v.detach().clone() for k, v in encoder.named_parameters()}
        ckpt = out / "encoder.ckpt"
        checkpoint_hashes["encoder"] = save_checkpoint(
            ckpt, tensors, stage="sgp", config=net_cfg, seed=cfg.seed,
            extra={"iterations": cfg.iterations, "image_size": hf.height,
                   "sgp_context_slices": cfg.sgp_context_slices},
        )
        reports = _history_reports(history, "sgp", cfg)
        if not args.no_figures:
            report.save_history_curve(history, out / "loss_curves.png",
                                      "contrastive loss", "slice-matching pretraining")
    elif stage == "lsc":
        pretext, history = pretrain_lsc(hf, cfg, net_cfg)
        tensors = {f"pretext.{k}": v.detach().clone() for k, v in pretext.named_parameters()}
        ckpt = out / "pretext.ckpt"
        checkpoint_hashes["pretext"] = save_checkpoint(
            ckpt, tensors, stage="lsc", config=net_cfg, seed=cfg.seed,
            extra={"iterations": cfg.iterations, "image_size": hf.height},
        )
        reports = _history_reports(history, "lsc", cfg)
        if not args.no_figures:
            report.save_history_curve(history, out / "loss_curves.png",
                                      "reconstruction loss", "pretext pretraining")
    else:
        encoder_state = pretext_state = None
        if cfg.use_sgp:
            if not args.encoder:
                raise ConfigurationError(
                    "stage pta with train.use_sgp=true requires --encoder CHECKPOINT"
                )
            manifest, encoder_state = load_checkpoint(_out_path(args.encoder))
            if manifest["stage"] != "sgp":
                raise ConfigurationError(
                    f"--encoder checkpoint has stage {manifest['stage']!r}, expected 'sgp'"
                )
            checkpoint_hashes["encoder_input"] = sha256_file(_out_path(args.encoder))
        if cfg.use_lsc:
            if not args.pretext:
                raise ConfigurationError(
                    "stage pta with train.use_lsc=true requires --pretext CHECKPOINT"
                )
            manifest, pretext_state = load_checkpoint(_out_path(args.pretext))
            if manifest["stage"] != "lsc":
                raise ConfigurationError(
                    f"--pretext checkpoint has stage {manifest['stage']!r}, expected 'lsc'"
                )
            checkpoint_hashes["pretext_input"] = sha256_file(_out_path(args.pretext))
        bundle, reports = train_pta(
            lf, hf, encoder_state, pretext_state, cfg, net_cfg,
            checkpoint_dir=out,
        )
        ckpt = out / "pta.ckpt"
        checkpoint_hashes["pta"] = save_checkpoint(
            ckpt,
            bundle.state_tensors(components=(
                "generator_lf2hf", "generator_hf2lf",
                "discriminator_hf", "discriminator_lf",
            )),
            stage="pta", config=net_cfg, seed=cfg.seed,
            extra={"iterations": cfg.iterations, "image_size": hf.height},
        )
        if not args.no_figures:
            report.save_loss_curves(reports, out / "loss_curves.png",
                                    "adversarial training")

    write_loss_csv(out / "log.csv", reports)
    run.write_resolved(out / "config.resolved.json", stage=stage)
    _write_json(out / "summary.json", {
        "stage": stage,
        "iterations": cfg.iterations,
        "checkpoints": checkpoint_hashes,
        "final_loss": reports[-1].total if reports else None,
        "wall_time_s": round(time.time() - started, 3),
    })
    print(f"stage {stage}: {cfg.iterations} iterations, outputs in {out}")
    return EXIT_OK


def _history_reports(history, stage, cfg):
    from .losses import LossReport

    reports = []
    for i, value in enumerate(history):
        reports.append(LossReport(
            iteration=i,
            sgp=value if stage == "sgp" else 0.0,
            lsc=value if stage == "lsc" else 0.0,
            syn=0.0, cycle=0.0, adv_g=0.0, adv_d=0.0,
            total=value,
            lambda1=cfg.weights.lambda1,
            lambda2=cfg.weights.lambda2,
            lambda3=cfg.weights.lambda3,
        ))
    return reports


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from . import report
    from .data import dataset_entry_hash_list, save_dataset
    from .nets import (
        NetworkBundle,
        load_checkpoint,
        network_config_from_manifest,
        sha256_file,
    )
    from .training import synthesize

    ckpt_path = _out_path(args.checkpoint)
    manifest, tensors = load_checkpoint(ckpt_path)
    if manifest["stage"] != "pta":
        raise ConfigurationError(
            f"synth needs a pta checkpoint, got stage {manifest['stage']!r}"
        )
    net_cfg = network_config_from_manifest(manifest)
    lf = _load_dataset(_out_path(args.lf))
    expected = manifest.get("extra", {}).get("image_size")
    if expected is not None and (lf.height != expected or lf.width != expected):
        raise ConfigurationError(
            f"dataset dims {lf.height}x{lf.width} do not match checkpoint "
            f"image_size {expected}"
        )
    bundle = NetworkBundle(net_cfg)
    bundle.load_state_tensors({k: v for k, v in tensors.items()
                               if k.startswith("generator_lf2hf.")})
    source_manifest = save_manifest_of(lf)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synthesized = synthesize(
        bundle.generator_lf2hf, lf,
        provenance={
            "generator_checkpoint_sha256": sha256_file(ckpt_path),
            "source_dataset_sha256": source_manifest,
        },
    )
    save_dataset(synthesized, out / "synth")
    if args.previews:
        previews = out / "previews"
        previews.mkdir(exist_ok=True)
        from .data import export_preview_png

        for s in synthesized.slices:
            export_preview_png(s, previews / f"{s.volume_id}_{s.slice_index:04d}.png")
        report.save_slice_montage(synthesized, out / "synth_montage.png",
                                  title="synthesized high-field")
    print(f"synthesized {len(synthesized)} slices into {out / 'synth'}")
    return EXIT_OK


def save_manifest_of(ds) -> str:
    """Dataset-level hash over per-slice checksums (no filesystem needed)."""
    import hashlib

    import numpy as np

    h = hashlib.sha256()
    for s in ds.slices:
        payload = np.ascontiguousarray(s.pixels, dtype="<f4").tobytes()
        h.update(hashlib.sha256(payload).hexdigest().encode("ascii"))
    return h.hexdigest()


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    import csv

    from . import report
    from .data import load_pairing_manifest
    from .metrics import default_extractor, evaluate

    run = RunConfig.load(args.config, args.set)
    generated = _load_dataset(_out_path(args.generated))
    reference = _load_dataset(_out_path(args.reference))
    pairing = None
    if args.paired:
        if not args.pairing:
            raise ConfigurationError("--paired requires --pairing MANIFEST")
        pairing = load_pairing_manifest(_out_path(args.pairing))
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = _out_path(args.extractor_cache) if args.extractor_cache else None
    extractor = default_extractor(cache_dir=cache, cfg=run.extractor_config())
    m = run.doc["metrics"]
    result = evaluate(
        generated, reference, pairing=pairing, extractor=extractor,
        is_splits=m["is_splits"], msssim_scales=m["msssim_scales"],
        msssim_pairs=m["msssim_pairs"], seed=run.seed,
    )
    _write_json(out / "report.json", result.to_dict())
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(result.csv_columns())
        writer.writerow(result.csv_row())
    run.write_resolved(out / "config.resolved.json")
    if not args.no_figures:
        report.save_metric_bars(result, out / "metrics.png")
    header = f"{'FID v':>10}  {'IS ^':>16}  {'MS-SSIM v':>16}"
    row = (f"{result.fid:>10.3f}  "
           f"{result.is_mean:>8.3f}+-{result.is_std:<6.3f}  "
           f"{result.msssim_mean:>8.3f}+-{result.msssim_std:<6.3f}")
    print(header)
    print(row)
    print(f"n_generated={result.n_generated} n_reference={result.n_reference} "
          f"msssim_mode={result.msssim_mode} extractor={result.extractor_id[:12]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest(inject_fault=args.inject_fault)


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptasyn",
        description="Unpaired low-field to high-field MRI synthesis on phantom data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", default=None, help="JSON config file (defaults used otherwise)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set train.iterations=100")

    p = sub.add_parser("phantom", help="generate paired HF/LF phantom datasets")
    add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--previews", action="store_true", help="write montage figures")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="run one training stage")
    add_config_args(p)
    p.add_argument("--stage", required=True, choices=("sgp", "lsc", "pta"))
    p.add_argument("--lf", default=None, help="LF dataset directory")
    p.add_argument("--hf", default=None, help="HF dataset directory")
    p.add_argument("--encoder", default=None, help="sgp encoder checkpoint (pta stage)")
    p.add_argument("--pretext", default=None, help="lsc pretext checkpoint (pta stage)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize HF-like slices from an LF dataset")
    p.add_argument("--checkpoint", required=True, help="pta checkpoint")
    p.add_argument("--lf", required=True, help="LF dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--previews", action="store_true",
                   help="write 8-bit grayscale previews and a montage")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="compute FID / IS / MS-SSIM for two datasets")
    add_config_args(p)
    p.add_argument("--generated", required=True, help="generated dataset directory")
    p.add_argument("--reference", required=True, help="reference dataset directory")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--paired", action="store_true",
                   help="MS-SSIM over (generated, reference) pairs instead of intra-generated")
    p.add_argument("--pairing", default=None, help="pairing manifest from the phantom command")
    p.add_argument("--extractor-cache", default=None,
                   help="directory for caching the trained feature extractor")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the built-in oracle suite")
    p.add_argument("--inject-fault", default=None, choices=("rotation-convention",),
                   help="deliberately break a convention to prove the oracles catch it")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PtasynError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:   # noqa: BLE001 - runtime failures map to exit 1
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())
