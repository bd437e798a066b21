"""Overfit a small synthetic dataset and report Easy/Medium/Hard AP on it.

Generates the dataset, trains with the desk configuration (augmentation off,
higher peak rate, no 0.99 negative filter) and scores the training images, printing AP every
``--eval-every`` iterations. The end-to-end acceptance check runs the same
recipe through the CLI.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from facedet.config import DetectorConfig
from facedet.dataio import WiderDataset, generate_synthetic_dataset, load_subsets
from facedet.evaluation import evaluate_subsets
from facedet.network import detect
from facedet.training import Trainer


def score(model, dataset, cfg, subsets) -> dict:
    dets = {}
    for i in range(len(dataset)):
        sample = dataset[i]
        found = detect(model, sample.image, cfg)
        dets[sample.name] = (np.array([tuple(b) for b, _ in found]).reshape(-1, 4),
                             np.array([s for _, s in found]))
    curves = evaluate_subsets(dets, dataset.records, subsets)
    return {k: None if c is None else round(c.ap, 4) for k, c in curves.items()}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/overfit")
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--eval-every", type=int, default=200)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--negative-filter", action="store_true",
                    help="keep the 0.99 filter (train-only, so easy second-shot negatives go untrained)")
    ap.add_argument("--set", action="append", default=[], help="extra config override")
    args = ap.parse_args()

    torch.set_num_threads(1)
    root = Path(args.root)
    generate_synthetic_dataset(root / "data", args.images, seed=args.seed)
    dataset = WiderDataset(root / "data")
    subsets = load_subsets(root / "data" / "subsets.json")
    cfg = DetectorConfig().with_overrides([f"optim.scale={120000 / args.iterations}", "sampler.augment=false",
                                           f"optim.lr_peak={args.lr}",
                                           f"losses.use_negative_filter={str(args.negative_filter).lower()}",
                                           *args.set])
    trainer = Trainer(cfg, dataset, root / "run")
    start = time.perf_counter()
    while trainer.iteration < args.iterations:
        record = trainer.step()
        if trainer.iteration % args.eval_every == 0 or trainer.iteration == args.iterations:
            aps = score(trainer.model, dataset, cfg, subsets)
            print(json.dumps({"iteration": trainer.iteration, "loss": round(record["total"], 4),
                              "seconds": round(time.perf_counter() - start), **aps}), flush=True)
    trainer.save(root / "run" / f"ckpt_{trainer.iteration:07d}.npz")


if __name__ == "__main__":
    main()
