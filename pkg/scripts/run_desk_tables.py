"""Train the desk-scale models through the CLI and write the evaluation tables.

Needs the prepared subset (scripts/prepare_mnist_subset.py).  Everything lands
in --out (default runs/desk): checkpoints, per-epoch logs, whitebox.csv,
transfer.csv, lrc-sweep.csv and manifests.  About ten minutes on one CPU.
"""

import argparse
import sys
from pathlib import Path

from sgrlab.cli import main as sgrlab

HERE = Path(__file__).resolve().parent
MODELS = {
    "clean": ["--method", "clean"],
    "sgr_sign": ["--method", "sgr", "--lambda", "1", "--pert-source", "loss_grad_sign"],
    "gn": ["--method", "gn", "--lambda", "5"],
    "sgr_lrc": ["--method", "sgr", "--lambda", "5", "--pert-source", "lrc", "--pert-zeta", "8"],
    "fgsm_aug": ["--method", "adv_augment", "--mix", "0.5"],
}


def run(argv):
    code = sgrlab(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    common = ["--config", str(HERE / "desk.cfg"), "--out-dir", args.out, "--seed", str(args.seed)]
    for name, flags in MODELS.items():
        run(["train", *flags, "--name", name, *common])
    cks = [str(Path(args.out) / f"{name}.npz") for name in MODELS]
    run(["whitebox", *cks, "--eps", "8", "32", "--rho-samples", "500", *common])
    run(["transfer", *cks, "--eps", "32", *common])
    run(["lrc-sweep", *cks, "--zeta", "1", "4", "8", "16", "--eps", "0", "0.1", "0.3", "0.5", *common])


if __name__ == "__main__":
    main()
