"""Train the single-output regression variant with the circular angle loss.

    python scripts/regression_run.py --steps 3000
"""

import argparse
import json
import logging

from satilt.backbone import build_model, toy_config
from satilt.data import Dataset, DatasetSpec, SyntheticSource
from satilt.train import TrainConfig, evaluate, train_regression


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=16)
    ap.add_argument("--angles", type=int, default=24)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=250)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = DatasetSpec(SyntheticSource(args.images, 64, args.seed), angles_per_image=args.angles, input_size=32, seed=args.seed)
    ds = Dataset(spec)
    model = build_model(toy_config(out_dim=1, output="linear"), args.seed)
    before = evaluate(model, ds, spec.interval)["mean_angle_error"]
    cfg = TrainConfig(mode="regression", total_steps=args.steps, batch_size=args.batch, seed=args.seed, eval_every=args.eval_every)
    train_regression(model, ds, cfg)
    after = evaluate(model, ds, spec.interval)["mean_angle_error"]
    print(json.dumps({"ae_step0": before, "ae_final": after, "ratio": after / before}))


if __name__ == "__main__":
    main()
