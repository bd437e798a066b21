"""Compare face-size distributions produced by BDAS, DAS and SSD cropping.

Prints the band mass of each strategy for several size bands on the
default synthetic statistics corpus, at desk or full scale.
"""

import argparse

from facedet.config import DetectorConfig
from facedet.dataio import default_stats_corpus
from facedet.sampling import format_statistics, sampler_statistics

BANDS = ((8, 32), (32, 128), (128, 512))
STRATEGIES = ("bdas", "das", "ssd", "mixture")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-n", type=int, default=20000, help="draws per strategy")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--full-scale", action="store_true", help="640 px crops and 16..512 px anchors")
    args = ap.parse_args()

    cfg = (DetectorConfig.full_scale() if args.full_scale else DetectorConfig()).sampler
    corpus = default_stats_corpus(args.seed)
    report = sampler_statistics(corpus, cfg, args.n, args.seed)
    edges = report["bin_edges"]
    print(f"{'band':>12} " + " ".join(f"{s:>8}" for s in STRATEGIES))
    for lo, hi in BANDS:
        # bands sit on the power-of-two histogram edges
        cells = slice(edges.index(lo), edges.index(hi))
        row = [sum(report["strategies"][s]["counts"][cells]) / max(report["strategies"][s]["faces"], 1)
               for s in STRATEGIES]
        print(f"{str((lo, hi)):>12} " + " ".join(f"{v:8.4f}" for v in row))
    print()
    print(format_statistics(report))


if __name__ == "__main__":
    main()
