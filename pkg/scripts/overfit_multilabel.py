"""Overfit the toy model on synthetic horizons with interval labels.

    python scripts/overfit_multilabel.py --steps 3000 --out runs/overfit.jsonl
"""

import argparse
import json
import logging
import time

from satilt.backbone import build_model, toy_config
from satilt.data import Dataset, DatasetSpec, SyntheticSource
from satilt.train import TrainConfig, evaluate, train_multilabel


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=16)
    ap.add_argument("--angles", type=int, default=24, help="sampled angles per image")
    ap.add_argument("--interval", type=int, default=2)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--lr", type=float, default=0.001)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=250)
    ap.add_argument("--out", help="write the metric history as JSON lines")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = DatasetSpec(
        SyntheticSource(args.images, 64, args.seed),
        interval=args.interval,
        angles_per_image=args.angles,
        input_size=32,
        seed=args.seed,
    )
    ds = Dataset(spec)
    model = build_model(toy_config(), args.seed)
    cfg = TrainConfig(total_steps=args.steps, batch_size=args.batch, lr0=args.lr, seed=args.seed, eval_every=args.eval_every)
    t0 = time.perf_counter()
    result = train_multilabel(model, ds, cfg)
    final = evaluate(model, ds, args.interval)
    summary = {
        "samples": len(ds),
        "first_loss": result.losses[0],
        "accuracy": final["accuracy"],
        "mean_angle_error": final["mean_angle_error"],
        "seconds": round(time.perf_counter() - t0, 1),
    }
    if args.out:
        with open(args.out, "w") as f:
            for row in result.history:
                f.write(json.dumps(row) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
