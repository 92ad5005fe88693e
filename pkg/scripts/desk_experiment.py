"""Desk-scale training and structure-reward ablation through the CLI.

Generates 200 training and 50 held-out phantoms (unless the manifests already
exist), then trains one model per (beta, seed) with configs/desk.cfg and writes
beta_<b>/seed_<s>/report.txt plus summary.csv under --out.

    python3 scripts/desk_experiment.py --out runs/desk --betas 0,2 --seeds 0,1,2
"""

import argparse
import sys
from pathlib import Path

from posedrl.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--betas", default="2")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-eval", type=int, default=50)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)

    out = Path(args.out)
    data = {"train": (out / "data" / "train", args.n_train, 1), "eval": (out / "data" / "eval", args.n_eval, 2)}
    for where, count, seed in data.values():
        if not (where / "manifest.csv").exists():
            rc = cli(["gen-data", "--config", args.config, "--count", str(count), "--seed", str(seed),
                      "--out", str(where)])
            if rc:
                return rc
    overrides = [f"data.train={data['train'][0] / 'manifest.csv'}", f"data.eval={data['eval'][0] / 'manifest.csv'}"]
    overrides += args.set
    cmd = ["beta-sweep", "--config", args.config, "--betas", args.betas, "--seeds", args.seeds, "--out", str(out)]
    for kv in overrides:
        cmd += ["--set", kv]
    return cli(cmd)


if __name__ == "__main__":
    sys.exit(main())
