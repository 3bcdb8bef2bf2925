"""Overfit a tiny dataset and print the per-epoch validation curve with the early-stopping pick."""

import argparse

from lgcontrast.experiments import overfit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--per-class", type=int, default=16)
    a = ap.parse_args()
    out = overfit_run(a.seed, per_class=a.per_class, epochs=a.epochs)
    best = out["result"].best_epoch
    for epoch, acc in enumerate(out["history"]):
        print(f"{epoch:>3}  {acc:.3f}{'  <- best' if epoch == best else ''}")
    print(f"best checkpoint {out['best_acc']:.3f}, final checkpoint {out['final_acc']:.3f}")


if __name__ == "__main__":
    main()
