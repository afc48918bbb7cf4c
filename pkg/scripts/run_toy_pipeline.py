#!/usr/bin/env python3
"""End-to-end toy pipeline demo: synthesize a masked source image, learn a
concept checkpoint, transfer it into a target image, generate a new object
with it, and auto-match the region on the target.

Everything runs on the deterministic toy backend in a few seconds:

    python scripts/run_toy_pipeline.py --outdir /tmp/toy_pipeline
"""

import argparse
import sys
from pathlib import Path

import torch

from localconcept.cli import main as cli_main
from localconcept.images import save_image
from localconcept.masking import BinaryMask, save_mask


def make_inputs(outdir: Path, size: int = 16) -> None:
    g = torch.Generator().manual_seed(3)
    q = size // 2

    source = 0.05 + 0.08 * torch.rand(3, size, size, generator=g, dtype=torch.float64)
    source[:, :q, :q] = 0.85 + 0.1 * torch.rand(3, q, q, generator=g, dtype=torch.float64)
    save_image(source, outdir / "source.png")

    source_mask = torch.zeros(size, size, dtype=torch.float64)
    source_mask[:q, :q] = 1.0
    save_mask(BinaryMask(source_mask), outdir / "source_mask.png")

    target = torch.rand(3, size, size, generator=g, dtype=torch.float64)
    save_image(target, outdir / "target.png")

    target_mask = torch.zeros(size, size, dtype=torch.float64)
    target_mask[q:, q:] = 1.0
    save_mask(BinaryMask(target_mask), outdir / "target_mask.png")


def run(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    make_inputs(outdir, args.size)

    steps = str(args.steps)
    common = ["--seed", str(args.seed)]

    rc = cli_main(
        [
            "learn",
            "--input.source_image", str(outdir / "source.png"),
            "--input.source_mask", str(outdir / "source_mask.png"),
            "--input.object_class", "chair",
            "--output.dir", str(outdir / "learn"),
            "--train.steps", steps,
            "--train.learning_rate", "0.005",
            *common,
        ]
    )
    if rc:
        return rc
    ckpt = str(outdir / "learn" / "checkpoint.bin")

    rc = cli_main(
        [
            "edit",
            "--input.target_image", str(outdir / "target.png"),
            "--input.target_mask", str(outdir / "target_mask.png"),
            "--input.checkpoint", ckpt,
            "--output.dir", str(outdir / "edit"),
            "--edit.eta", "0.05",
            *common,
        ]
    )
    if rc:
        return rc

    rc = cli_main(
        [
            "generate",
            "--input.checkpoint", ckpt,
            "--generate.object_class", "table",
            "--output.dir", str(outdir / "generate"),
            *common,
        ]
    )
    if rc:
        return rc

    rc = cli_main(
        [
            "match-mask",
            "--input.checkpoint", ckpt,
            "--input.source_image", str(outdir / "source.png"),
            "--input.source_mask", str(outdir / "source_mask.png"),
            "--input.target_image", str(outdir / "target.png"),
            "--output.dir", str(outdir / "match"),
            "--match.steps", steps,
            "--match.learning_rate", "0.2",
            *common,
        ]
    )
    if rc:
        return rc

    print(f"\npipeline artifacts under {outdir}/")
    for sub in ("learn", "edit", "generate", "match"):
        for p in sorted((outdir / sub).rglob("*")):
            if p.is_file():
                print(f"  {p.relative_to(outdir)}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--outdir", default="/tmp/toy_pipeline")
    parser.add_argument("--size", type=int, default=16)
    parser.add_argument("--steps", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    sys.exit(run(parser.parse_args()))
