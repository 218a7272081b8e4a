"""Run the desk-scale adaptation experiment over several seeds and print a summary.

    python scripts/run_desk_experiment.py --seeds 0 1 2 3 4 --out runs/desk
"""

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from traverse_da.experiment import DeskExperimentConfig, assess, run_seed, summary_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(DeskExperimentConfig().seeds))
    ap.add_argument("--rounds", type=int, default=DeskExperimentConfig().rounds)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--out", type=Path, default=None, help="directory for per-seed rounds CSVs and summary.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = replace(DeskExperimentConfig(), seeds=tuple(args.seeds), rounds=args.rounds)
    t0 = time.perf_counter()
    results = []
    for s in cfg.seeds:
        r = run_seed(s, cfg, threads=args.threads, out_dir=args.out)
        logging.info("seed %d: rote %s", s, " ".join(f"{v:.3f}" for v in r.rote))
        logging.info("seed %d: vanilla %s", s, " ".join(f"{v:.3f}" for v in r.vanilla))
        results.append(r)
    verdict = assess(results)
    print(summary_table(results))
    print(json.dumps({k: v for k, v in verdict.items() if k != "tallies"}, indent=1))
    print(f"total {time.perf_counter() - t0:.1f} s")
    if args.out is not None:
        doc = {
            "verdict": verdict,
            "seeds": [{"seed": r.seed, "source_ap": r.source_ap, "rote": r.rote, "vanilla": r.vanilla,
                       "seconds": r.seconds} for r in results],
        }
        (args.out / "summary.json").write_text(json.dumps(doc, indent=1))


if __name__ == "__main__":
    main()
