"""Train the toy denoiser on random moving-shape clips and save a checkpoint.

Optionally a fraction of the clips (``--layout-fraction``) run with the layout
attention modulation on their ground-truth shape masks. The shipped checkpoint
uses the defaults below (plain SGD, no layout clips).

    python scripts/train_checkpoint.py --out src/stlayout/data/toy_checkpoint
"""

import argparse
import json
import logging
import time

import numpy as np
import torch

from stlayout.diffusion import ToyDenoiser, embed_prompt, make_schedule, train_toy
from stlayout.layout import LayoutSet, RegionSpec
from stlayout.modulation import CROSS, SELF, cross_lambda, self_lambda
from stlayout.pipeline import LayoutControl, prepare_conditioning
from stlayout.synth import training_videos


def layout_factory(masks, prompt, params):
    """Level -> LayoutControl for a clip with shapes captioned in order."""
    text = embed_prompt(prompt)
    # "<start> colour kind and colour kind ..."
    spans = {j + 1: range(1 + 3 * j, 3 + 3 * j) for j in range(masks.shape[1])}
    regions = [RegionSpec(rid, tuple(text.tokens[s.start:s.stop])) for rid, s in spans.items()]
    cond = prepare_conditioning(LayoutSet(regions, masks, text.tokens), spans, text.length)

    def control(level):
        t = params.normalized(level)
        cross = {"condition": cond.cross_values, "exempt": cond.cross_exempt,
                 "lam": torch.as_tensor(cross_lambda(cond.owner, cond.areas, t, CROSS),
                                        dtype=torch.float32)}
        self_ = {"condition": cond.self_condition,
                 "lam": torch.as_tensor(self_lambda(cond.labels, cond.areas, t, SELF),
                                        dtype=torch.float32)}
        return LayoutControl(cross, self_)

    return control


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--clips", type=int, default=2048)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--optimizer", default="sgd")
    ap.add_argument("--layout-fraction", type=float, default=0.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.manual_seed(args.seed)

    clips = training_videos(args.seed, args.clips, with_masks=True)
    model = ToyDenoiser(seed=args.seed)
    params = make_schedule(model.dims.train_steps)
    pick = np.random.default_rng(args.seed).random(len(clips)) < args.layout_fraction
    dataset = [(torch.as_tensor(frames), embed_prompt(prompt).vectors,
                layout_factory(masks, prompt, params) if on else None)
               for (frames, prompt, masks), on in zip(clips, pick)]
    start = time.time()
    losses = train_toy(model, dataset, steps=args.steps, lr=args.lr, batch_size=args.batch,
                       seed=args.seed, optimizer=args.optimizer)
    window = min(100, len(losses))
    summary = {"seed": args.seed, "clips": args.clips, "steps": args.steps, "lr": args.lr,
               "batch": args.batch, "optimizer": args.optimizer,
               "layout_fraction": args.layout_fraction,
               "initial_loss": float(np.mean(losses[:window])),
               "final_loss": float(np.mean(losses[-window:])),
               "seconds": round(time.time() - start, 1)}
    model.save(args.out, training=summary)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
