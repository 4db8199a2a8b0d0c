"""Benchmark harness: imperceptibility, per-noise bit accuracy, success rate.

For every image the harness embeds a fresh payload (random bits, or a random
UUID framed with error correction), measures PSNR/SSIM of the clean
watermarked image at the original resolution, then decodes after each
eval-mode distortion. Reports aggregate one row per noise kind plus a clean
row, ordered pixel noises first, geometric transforms last. The structured
report is deterministic: the same checkpoint, seed and images produce
byte-identical JSON.
"""

from __future__ import annotations

import json
import math
import uuid as uuidlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imaging, noiser, payload
from .model import WatermarkModel

REPORT_SCHEMA_VERSION = 1

# Table row order: clean, pixel-level noises, then geometric transforms
ROW_ORDER = ("clean",) + noiser.NOISE_KINDS

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass
class BenchReport:
    dataset: str
    payload_mode: str
    seed: int
    schema_version: int = REPORT_SCHEMA_VERSION
    images: list = field(default_factory=list)         # per-image file, psnr, ssim
    noise_rows: list = field(default_factory=list)     # per-noise aggregates
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls(**json.loads(text))


def _fmt_float(v: float) -> float | str:
    return "inf" if math.isinf(v) else round(float(v), 6)


def list_images(image_dir: str | Path) -> list[Path]:
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise IOError(f"not a directory: {image_dir}")
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise IOError(f"no images found in {image_dir}")
    return paths


def success_rate(decoded_list, truth_list, cfg: payload.EccConfig | None = None) -> float:
    """Percentage of payloads fully recovered after error correction.

    decoded_list holds decode_uuid results (DecodeResult or None); truth_list
    holds the embedded UUIDs.
    """
    if len(decoded_list) != len(truth_list):
        raise ValueError("decoded and truth lists must align")
    if not decoded_list:
        return 0.0
    hits = sum(1 for dec, truth in zip(decoded_list, truth_list)
               if dec is not None and dec.payload == truth)
    return 100.0 * hits / len(decoded_list)


def evaluate(model: WatermarkModel, image_dir: str | Path,
             suite: list[noiser.NoiseSpec] | None = None,
             payload_mode: str = "raw-bits", seed: int = 0,
             ecc: payload.EccConfig | None = None,
             dataset_id: str | None = None) -> BenchReport:
    """Runs the full protocol over a directory of images."""
    if payload_mode not in ("raw-bits", "uuid-ecc"):
        raise ValueError(f"unknown payload mode: {payload_mode}")
    ecc = ecc or payload.EccConfig()
    bit_length = model.config.bit_length
    if payload_mode == "uuid-ecc" and bit_length != ecc.total_bits:
        raise ValueError(
            f"uuid-ecc mode needs a {ecc.total_bits}-bit model, got {bit_length}")

    paths = list_images(image_dir)
    kinds = [s.kind for s in (suite or noiser.sample_suite(seed, mode="eval"))]

    rng = np.random.default_rng(seed)
    per_image = []
    acc: dict[str, list[float]] = {k: [] for k in ("clean", *kinds)}
    successes: dict[str, list] = {k: [] for k in ("clean", *kinds)}
    truths: list = []

    for path in paths:
        try:
            img = imaging.load_image(path)
        except IOError as exc:
            import warnings

            warnings.warn(f"skipping unreadable image {path}: {exc}")
            continue

        if payload_mode == "uuid-ecc":
            truth = uuidlib.UUID(int=int.from_bytes(rng.bytes(16), "big"))
            bits = payload.encode_uuid(truth, ecc)
        else:
            truth = None
            bits = rng.integers(0, 2, size=bit_length, dtype=np.uint8)
        truths.append(truth)

        watermarked, _ = model.embed(img, bits)
        per_image.append({
            "file": path.name,
            "psnr": _fmt_float(imaging.psnr(img, watermarked)),
            "ssim": _fmt_float(imaging.ssim(img, watermarked)),
        })

        # one sampled parameterization per image per noise
        image_suite = noiser.sample_suite(int(rng.integers(0, 2**31 - 1)),
                                          mode="eval", kinds=tuple(kinds))
        variants = {"clean": watermarked}
        for spec in image_suite:
            variants[spec.kind] = noiser.apply(spec, watermarked, rng)

        for kind, variant in variants.items():
            soft = model.extract(variant)
            hard = (soft > 0.5).astype(np.uint8)
            acc[kind].append(payload.bit_accuracy(hard, bits))
            if payload_mode == "uuid-ecc":
                successes[kind].append(payload.decode_uuid(hard, ecc))

    if not per_image:
        raise IOError(f"no readable images in {image_dir}")

    rows = []
    for kind in ROW_ORDER:
        if kind not in acc:
            continue
        row = {"noise": kind, "bit_accuracy_pct": round(100.0 * float(np.mean(acc[kind])), 4)}
        if payload_mode == "uuid-ecc":
            row["success_rate_pct"] = round(success_rate(successes[kind], truths), 4)
        rows.append(row)

    return BenchReport(
        dataset=dataset_id or Path(image_dir).name,
        payload_mode=payload_mode,
        seed=seed,
        images=per_image,
        noise_rows=rows,
        config={
            "model": asdict(model.config),
            "noises": kinds,
            "ecc": asdict(ecc) if payload_mode == "uuid-ecc" else None,
        },
    )


def render_table(report: BenchReport) -> str:
    """Plain-text table, one row per noise kind plus the clean row."""
    lines = [
        f"dataset: {report.dataset}   payload: {report.payload_mode}   seed: {report.seed}",
        "",
    ]
    psnrs = [r["psnr"] for r in report.images]
    ssims = [r["ssim"] for r in report.images]
    lines.append(f"images: {len(report.images)}")
    lines.append(f"mean PSNR: {_mean_with_inf(psnrs)}   mean SSIM: {_mean_with_inf(ssims)}")
    lines.append("")
    has_success = any("success_rate_pct" in r for r in report.noise_rows)
    header = f"{'noise':22s} {'bit acc %':>10s}"
    if has_success:
        header += f" {'success %':>10s}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in report.noise_rows:
        line = f"{row['noise']:22s} {row['bit_accuracy_pct']:10.2f}"
        if has_success:
            line += f" {row.get('success_rate_pct', 0.0):10.2f}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def _mean_with_inf(values) -> str:
    vals = [math.inf if v == "inf" else float(v) for v in values]
    if any(math.isinf(v) for v in vals):
        return "inf"
    return f"{np.mean(vals):.4f}"


def emit_report(report: BenchReport, out_dir: str | Path,
                formats: tuple[str, ...] = ("structured", "table-text", "plots")) -> list[Path]:
    """Writes the report in the requested formats; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "structured" in formats:
        p = out_dir / "report.json"
        p.write_text(report.to_json() + "\n")
        written.append(p)
    if "table-text" in formats:
        p = out_dir / "report.txt"
        p.write_text(render_table(report))
        written.append(p)
    if "plots" in formats:
        written.extend(_emit_histograms(report, out_dir))
    return written


def _emit_histograms(report: BenchReport, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for metric in ("psnr", "ssim"):
        vals = [v for v in (r[metric] for r in report.images) if v != "inf"]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if vals:
            ax.hist(vals, bins=min(30, max(5, len(vals) // 2)), color="#4878a8")
        ax.set_xlabel(metric.upper())
        ax.set_ylabel("images")
        ax.set_title(f"{report.dataset}: {metric.upper()} distribution")
        fig.tight_layout()
        p = out_dir / f"hist_{metric}_{report.dataset}.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)
    return written
