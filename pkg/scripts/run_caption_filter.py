"""Train on captions with a fraction replaced by cross-class text, before and after ITM filtering."""

import argparse

from lgcontrast.experiments import ExperimentConfig, caption_filter_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--fraction", type=float, default=0.5)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--out", default=None)
    a = ap.parse_args()
    res = caption_filter_experiment(a.seeds, ExperimentConfig(epochs=a.epochs), a.fraction, out_dir=a.out)
    print("seed  rate(unf)  rate(filt)  fewshot(unf)  fewshot(filt)")
    for u, f in zip(res["runs"]["unfiltered"], res["runs"]["filtered"]):
        print(f"{u.seed:<4}  {u.same_class_rate:.3f}      {f.same_class_rate:.3f}       "
              f"{u.fewshot:.4f}        {f.fewshot:.4f}")
    print(f"median few-shot: {res['median_unfiltered']:.4f} -> {res['median_filtered']:.4f}")


if __name__ == "__main__":
    main()
