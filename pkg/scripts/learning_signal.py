"""Train the regressor on in-memory phantoms and compare with the mean curve.

    python scripts/learning_signal.py --epochs 60 --lr 1e-3 --decay-every 40
"""
import argparse
import time
from dataclasses import replace

from dxa3d import harness
from dxa3d.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-test", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--decay-every", type=int, default=40)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--augment", action="store_true", help="crop/contrast/noise augmentation")
    args = ap.parse_args()

    cfg = load_config(args.config).with_seed(args.seed)
    cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs, lr=args.lr, lr_decay_every=args.decay_every,
                                         augment=args.augment))
    t0 = time.perf_counter()

    def log(row):
        print(f"epoch {row.epoch:4d}  train {row.train_loss:.3f}  lr {row.lr:.1e}  {time.perf_counter() - t0:6.0f}s")

    res = harness.learning_signal(cfg, args.n_train, args.n_test, log_fn=log)
    for plane in ("coronal", "sagittal"):
        m, b = res[f"{plane}_mae"], res[f"baseline_{plane}_mae"]
        print(f"{plane:>8} MAE {m:.3f}  mean-curve {b:.3f}  ({1 - m / b:.0%} lower)")


if __name__ == "__main__":
    main()
