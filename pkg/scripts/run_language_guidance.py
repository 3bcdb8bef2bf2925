"""Few-shot accuracy of SimCLR trained on augmentation pairs vs caption-NN pairs.

    python scripts/run_language_guidance.py --seeds 0 1 2 3 4 --out runs/lg
"""

import argparse

from lgcontrast.experiments import ExperimentConfig, compare_pair_sources


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--objective", default="ntxent", choices=["ntxent", "simsiam", "nnclr", "swav"])
    ap.add_argument("--out", default=None, help="directory for manifests, histories and reports")
    a = ap.parse_args()
    cfg = ExperimentConfig(epochs=a.epochs, objective=a.objective)
    res = compare_pair_sources(a.seeds, cfg, out_dir=a.out)
    print("seed  augment  manifest")
    for aug, lg in zip(res["runs"]["augment"], res["runs"]["manifest"]):
        print(f"{aug.seed:<4}  {aug.fewshot:.4f}   {lg.fewshot:.4f}")
    gap = res["median_manifest"] - res["median_augment"]
    print(f"median  {res['median_augment']:.4f}   {res['median_manifest']:.4f}   (+{gap:.4f})")


if __name__ == "__main__":
    main()
