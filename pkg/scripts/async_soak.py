"""Run 4 actors and 4 learners against one global model and audit the traffic.

Prints pushed/applied/dropped counts, whether the published versions are
gap-free, and how many learner snapshots failed checksum verification.

    python3 scripts/async_soak.py --seconds 600
"""

import argparse
import json
import sys

from posedrl.net import PRESETS
from posedrl.phantom import PhantomSpec, phantom_set
from posedrl.reward import RewardConfig
from posedrl.trainer import MetricsWriter, TrainConfig, Trainer


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=600.0)
    ap.add_argument("--volumes", type=int, default=40)
    ap.add_argument("--actors", type=int, default=4)
    ap.add_argument("--learners", type=int, default=4)
    ap.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    ap.add_argument("--metrics", default=None, help="optional metrics.jsonl path")
    args = ap.parse_args(argv)

    vols = [v for _, v in phantom_set(PhantomSpec(), args.volumes, seed=1)]
    cfg = TrainConfig(n_actors=args.actors, m_learners=args.learners, warmup=100, total_learner_steps=10**9,
                      verify_snapshots=True, target_sync_period=500)
    trainer = Trainer(vols, cfg, PRESETS[args.preset], RewardConfig(beta=2.0),
                      metrics=MetricsWriter(args.metrics), deterministic=False)
    counts = trainer.run_async(duration_s=args.seconds)
    versions = trainer.model.published_versions
    audit = {
        **counts,
        "versions_gap_free": versions == list(range(len(versions))),
        "last_version": trainer.model.version,
        "checksum_mismatches": trainer.model.checksum_mismatches,
        "actor_steps": [a.steps for a in trainer.actors],
        "learner_steps": [lr.steps for lr in trainer.learners],
    }
    print(json.dumps(audit, indent=2))
    ok = (counts["pushed"] == counts["applied"] and audit["versions_gap_free"]
          and audit["checksum_mismatches"] == 0)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
