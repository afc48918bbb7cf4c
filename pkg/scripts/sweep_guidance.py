#!/usr/bin/env python3
"""Sweep the guidance step size and report how hard the edit pushes the
concept token's attention toward the target region.

The attention objective after the final blend should fall as eta grows;
eta is the user-facing edit-strength knob.

    python scripts/sweep_guidance.py --etas 0,0.01,0.05,0.1,0.5
"""

import argparse
import sys

import torch

from localconcept import (
    BinaryMask,
    ConceptToken,
    EditConfig,
    edit_image,
    make_schedule,
    make_toy_backend,
)


def run(args) -> int:
    sched = make_schedule(args.T)
    etas = [float(v) for v in args.etas.split(",")]
    mask_data = torch.zeros(args.size, args.size, dtype=torch.float64)
    half = args.size // 2
    mask_data[half:, half:] = 1.0
    mask = BinaryMask(mask_data)

    print(f"{'eta':>8}  {'final objective':>16}  {'mean step drop':>15}")
    for eta in etas:
        backend = make_toy_backend(seed=args.seed, latent_shape=(3, args.size, args.size))
        token = ConceptToken("v*", backend.vocab_embedding("style").clone(), "style")
        prompt = "A chair with [v*] style"
        c = backend.encode_prompt(prompt, [token])
        backend.plant_attention_bias(c.concept_slot("v*"), mask.data * args.bias)

        g = torch.Generator().manual_seed(args.seed + 1)
        image = torch.rand(3, args.size, args.size, generator=g, dtype=torch.float64)
        cfg = EditConfig(t_start=args.t_start, eta=eta, seed=args.seed + 2)
        _, trace = edit_image(backend, token, image, mask, prompt, sched, cfg)
        drops = [s.objective_before - s.objective_after for s in trace.steps]
        mean_drop = sum(drops) / len(drops) if drops else 0.0
        print(f"{eta:>8g}  {trace.final_objective:>16.8f}  {mean_drop:>15.2e}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--etas", default="0,0.01,0.05,0.1,0.5")
    parser.add_argument("--T", type=int, default=50)
    parser.add_argument("--t_start", type=int, default=10)
    parser.add_argument("--size", type=int, default=8)
    parser.add_argument("--bias", type=float, default=2.0)
    parser.add_argument("--seed", type=int, default=0)
    sys.exit(run(parser.parse_args()))
