"""Write attention heatmaps for a grid of query regions at every SA block.

    python scripts/export_heatmaps.py --ckpt runs/toy.ckpt --image img.ppm --out runs/heatmaps
"""

import argparse
import os

from satilt import checkpoint, runconfig
from satilt.attention import heatmap
from satilt.backbone import forward
from satilt.cli import config_sidecar, prepare_image
from satilt.imageio import write_pgm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--image", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", help="run config (default: CKPT.cfg)")
    ap.add_argument("--queries", type=int, default=3, help="queries per side")
    args = ap.parse_args()

    rc = runconfig.load(args.config or config_sidecar(args.ckpt))
    model, _ = checkpoint.load(args.ckpt, rc.model)
    capture = {}
    forward(model, prepare_image(args.image, rc.model.input_size), capture=capture)
    os.makedirs(args.out, exist_ok=True)
    sizes = rc.model.feature_sizes()
    for block, a in sorted(capture.items()):
        side = sizes[block]
        steps = sorted({round(i * (side - 1) / max(args.queries - 1, 1)) for i in range(args.queries)})
        for qh in steps:
            for qw in steps:
                path = os.path.join(args.out, f"block{block}_q{qh}_{qw}.pgm")
                write_pgm(path, heatmap(a, qh * side + qw, side, side))
                print(path)


if __name__ == "__main__":
    main()
