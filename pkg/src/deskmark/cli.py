"""Command-line entry point: train / embed / extract / bench / attack / registry.

Exit codes: 0 success, 2 usage error (argparse), 3 missing or unreadable
file, 4 invalid configuration, 5 operation failed. Failures print exactly
one machine-parsable line to stderr: error code=<slug> msg="...".
Checkpoint paths that do not exist are also tried under $DESKMARK_CKPT_DIR.
Every file-producing run writes its fully resolved configuration next to
its outputs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import uuid as uuidlib
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

EXIT_MISSING_FILE = 3
EXIT_INVALID_CONFIG = 4
EXIT_OPERATION_FAILED = 5

logger = logging.getLogger("deskmark")


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _missing(path) -> CliError:
    return CliError("missing-file", f"no such file: {path}", EXIT_MISSING_FILE)


def _resolve_checkpoint(path_str: str) -> Path:
    path = Path(path_str)
    if path.exists():
        return path
    env_dir = os.environ.get("DESKMARK_CKPT_DIR")
    if env_dir:
        candidate = Path(env_dir) / path_str
        if candidate.exists():
            logger.info("checkpoint resolved via DESKMARK_CKPT_DIR: %s", candidate)
            return candidate
    raise _missing(path_str)


def _load_model(path_str: str):
    from .model import load_checkpoint

    path = _resolve_checkpoint(path_str)
    try:
        model, meta = load_checkpoint(path)
    except IOError as exc:
        raise CliError("bad-checkpoint", str(exc), EXIT_OPERATION_FAILED) from exc
    return model, meta


def _load_image(path_str: str) -> np.ndarray:
    from . import imaging

    path = Path(path_str)
    if not path.exists():
        raise _missing(path)
    try:
        return imaging.load_image(path)
    except IOError as exc:
        raise CliError("unreadable-image", str(exc), EXIT_MISSING_FILE) from exc


def _write_resolved_config(out_path: Path, resolved: dict):
    cfg_path = out_path.with_name(out_path.stem + ".config.yaml")
    with open(cfg_path, "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True)
    logger.info("resolved config written to %s", cfg_path)


def _load_image_dir(dir_str: str) -> list[np.ndarray]:
    from . import bench, imaging

    try:
        paths = bench.list_images(dir_str)
    except IOError as exc:
        raise CliError("missing-file", str(exc), EXIT_MISSING_FILE) from exc
    return [imaging.load_image(p) for p in paths]


# ---------------------------------------------------------------------------
# subcommands

def _cmd_train(args) -> int:
    from .training import TrainConfig, TrainingDiverged, load_train_config, train

    if args.config:
        if not Path(args.config).exists():
            raise _missing(args.config)
        try:
            cfg = load_train_config(args.config)
        except (TypeError, ValueError, yaml.YAMLError) as exc:
            raise CliError("invalid-config", f"bad train config: {exc}",
                           EXIT_INVALID_CONFIG) from exc
    else:
        cfg = TrainConfig()
    if args.steps is not None:
        logger.info("config resolution: --steps %d overrides config file", args.steps)
        cfg.steps = args.steps
    if args.seed is not None:
        logger.info("config resolution: --seed %d overrides config file", args.seed)
        cfg.seed = args.seed

    imgs = _load_image_dir(args.data)
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise CliError("invalid-config",
                       f"training images must share one shape, got {sorted(shapes)}",
                       EXIT_INVALID_CONFIG)
    images = np.stack(imgs)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        produced = train(images, cfg, out.parent, resume_from=args.resume)
    except TrainingDiverged as exc:
        raise CliError("training-diverged", str(exc), EXIT_OPERATION_FAILED) from exc
    if produced != out:
        os.replace(produced, out)
    print(out)
    return 0


def _bits_for_embed(args, bit_length: int):
    from . import payload

    if args.uuid:
        ecc = payload.EccConfig()
        if bit_length != ecc.total_bits:
            raise CliError(
                "invalid-config",
                f"--uuid needs a {ecc.total_bits}-bit model, checkpoint has {bit_length}",
                EXIT_INVALID_CONFIG)
        try:
            uid = uuidlib.UUID(args.uuid)
        except ValueError as exc:
            raise CliError("invalid-config", f"bad uuid: {args.uuid}",
                           EXIT_INVALID_CONFIG) from exc
        return payload.encode_uuid(uid, ecc), str(uid)
    if args.bits:
        try:
            return payload.hex_to_bits(args.bits, bit_length), args.bits
        except ValueError as exc:
            raise CliError("invalid-config", str(exc), EXIT_INVALID_CONFIG) from exc
    raise CliError("invalid-config", "embed needs --uuid or --bits",
                   EXIT_INVALID_CONFIG)


def _cmd_embed(args) -> int:
    from . import imaging

    model, _ = _load_model(args.ckpt)
    img = _load_image(getattr(args, "in"))
    bits, payload_desc = _bits_for_embed(args, model.config.bit_length)

    out = Path(args.out)
    if out.suffix.lower() in (".jpg", ".jpeg"):
        print("warning: lossy JPEG output degrades the watermark; prefer PNG",
              file=sys.stderr)
    watermarked, _ = model.embed(img, bits)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        imaging.save_image(watermarked, out)
    except ValueError as exc:
        raise CliError("invalid-config", str(exc), EXIT_INVALID_CONFIG) from exc
    _write_resolved_config(out, {
        "command": "embed", "checkpoint": str(args.ckpt), "input": str(getattr(args, "in")),
        "payload": payload_desc, "output": str(out),
        "model": asdict(model.config),
    })
    print(out)
    return 0


def _cmd_extract(args) -> int:
    from . import payload

    model, _ = _load_model(args.ckpt)
    img = _load_image(getattr(args, "in"))
    soft = model.extract(img)
    hard = (soft > 0.5).astype(np.uint8)
    if args.ecc:
        result = payload.decode_uuid(hard, payload.EccConfig())
        if result is None:
            raise CliError("decode-failed", "error correction could not recover a UUID",
                           EXIT_OPERATION_FAILED)
        logger.info("corrected %d bit error(s)", result.corrected)
        print(result.payload)
    else:
        print(payload.bits_to_hex(hard))
    return 0


def _cmd_bench(args) -> int:
    from . import bench, noiser

    model, _ = _load_model(args.ckpt)
    suite = None
    if args.noises:
        if not Path(args.noises).exists():
            raise _missing(args.noises)
        with open(args.noises) as fh:
            try:
                suite = noiser.suite_from_config(yaml.safe_load(fh))
            except (TypeError, KeyError, ValueError, yaml.YAMLError) as exc:
                raise CliError("invalid-config", f"bad noise config: {exc}",
                               EXIT_INVALID_CONFIG) from exc
    try:
        report = bench.evaluate(model, args.data, suite=suite,
                                payload_mode=args.mode, seed=args.seed)
    except IOError as exc:
        raise CliError("missing-file", str(exc), EXIT_MISSING_FILE) from exc
    except ValueError as exc:
        raise CliError("invalid-config", str(exc), EXIT_INVALID_CONFIG) from exc

    out_dir = Path(args.report)
    written = bench.emit_report(report, out_dir)
    _write_resolved_config(out_dir / "report.json", {
        "command": "bench", "checkpoint": str(args.ckpt), "data": str(args.data),
        "mode": args.mode, "seed": args.seed,
        "noises": report.config["noises"], "model": report.config["model"],
    })
    print(bench.render_table(report))
    for p in written:
        logger.info("wrote %s", p)
    return 0


def _cmd_attack_forge(args) -> int:
    import json

    from .attacks import forgery_eval

    model, _ = _load_model(args.ckpt)
    sources = _load_image_dir(args.source)
    targets = _load_image_dir(args.target)
    report = forgery_eval(model, sources, targets, seed=args.seed)
    print(f"{'watermarked':>14s} {'residual':>14s} {'transplant':>14s}")
    print(f"{report.watermarked_acc_pct:14.2f} {report.residual_acc_pct:14.2f} "
          f"{report.transplant_acc_pct:14.2f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(asdict(report), indent=2) + "\n")
        _write_resolved_config(out, {
            "command": "attack forge", "checkpoint": str(args.ckpt),
            "source": str(args.source), "target": str(args.target), "seed": args.seed,
        })
    return 0


def _cmd_registry(args) -> int:
    from . import registry

    store = registry.ManifestStore(args.store)
    if args.registry_cmd == "register":
        img = _load_image(args.image)
        manifest_path = Path(args.manifest)
        if not manifest_path.exists():
            raise _missing(manifest_path)
        try:
            uid = uuidlib.UUID(args.uuid)
        except ValueError as exc:
            raise CliError("invalid-config", f"bad uuid: {args.uuid}",
                           EXIT_INVALID_CONFIG) from exc
        try:
            rec = store.register(uid, img, manifest_path.read_bytes())
        except registry.DuplicateUuid as exc:
            raise CliError("duplicate-uuid", f"uuid already registered: {exc}",
                           EXIT_OPERATION_FAILED) from exc
        print(f"registered {rec.uuid} fingerprint={rec.fingerprint:016x}")
        return 0

    if args.registry_cmd == "lookup":
        try:
            uid = uuidlib.UUID(args.uuid)
        except ValueError as exc:
            raise CliError("invalid-config", f"bad uuid: {args.uuid}",
                           EXIT_INVALID_CONFIG) from exc
        rec = store.lookup(uid)
        if rec is None:
            raise CliError("not-found", f"uuid not registered: {uid}",
                           EXIT_OPERATION_FAILED)
        print(f"{rec.uuid} fingerprint={rec.fingerprint:016x} "
              f"created_at={rec.created_at} manifest_bytes={len(rec.manifest)}")
        return 0

    # verify
    model, _ = _load_model(args.ckpt)
    img = _load_image(args.image)
    result = registry.verify(img, model, store, threshold=args.threshold)
    detail = ""
    if result.payload_uuid is not None:
        detail += f" uuid={result.payload_uuid}"
    if result.fingerprint_distance is not None:
        detail += f" fingerprint_distance={result.fingerprint_distance}"
    print(f"{result.status.value}{detail}")
    return 0 if result.status is registry.VerifyStatus.AUTHENTIC else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskmark",
                                     description="invisible watermarking lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an encoder/decoder pair")
    p.add_argument("--config", help="YAML training config")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, help="override config steps")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("embed", help="embed a payload into an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True, help="cover image")
    p.add_argument("--uuid", help="payload UUID (256-bit models)")
    p.add_argument("--bits", help="raw payload bits as hex")
    p.add_argument("--out", required=True, help="output image (PNG recommended)")
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("extract", help="extract a payload from an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--ecc", action="store_true", help="decode as UUID with error correction")
    p.set_defaults(fn=_cmd_extract)

    p = sub.add_parser("bench", help="run the evaluation protocol over a directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--noises", help="YAML noise suite (default: seeded full suite)")
    p.add_argument("--report", required=True, help="report output directory")
    p.add_argument("--mode", choices=("raw-bits", "uuid-ecc"), default="raw-bits")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("attack", help="attack simulations")
    attack_sub = p.add_subparsers(dest="attack_cmd", required=True)
    pf = attack_sub.add_parser("forge", help="residual transplant forgery")
    pf.add_argument("--ckpt", required=True)
    pf.add_argument("--source", required=True, help="images to steal residuals from")
    pf.add_argument("--target", required=True, help="images to transplant onto")
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("--out", help="JSON report path")
    pf.set_defaults(fn=_cmd_attack_forge)

    p = sub.add_parser("registry", help="provenance registry operations")
    reg_sub = p.add_subparsers(dest="registry_cmd", required=True)
    pr = reg_sub.add_parser("register")
    pr.add_argument("--store", required=True)
    pr.add_argument("--uuid", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--manifest", required=True, help="opaque manifest blob file")
    pr.set_defaults(fn=_cmd_registry)
    pv = reg_sub.add_parser("verify")
    pv.add_argument("--store", required=True)
    pv.add_argument("--ckpt", required=True)
    pv.add_argument("--image", required=True)
    pv.add_argument("--threshold", type=int, default=12)
    pv.set_defaults(fn=_cmd_registry)
    pl = reg_sub.add_parser("lookup")
    pl.add_argument("--store", required=True)
    pl.add_argument("--uuid", required=True)
    pl.set_defaults(fn=_cmd_registry)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f'error code={exc.code} msg="{exc}"', file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
