#!/usr/bin/env python3
"""Run the three-node demo federation end to end and print the results.

Usage: python scripts/run_demo.py [workdir] [rounds]
"""

import sys
from pathlib import Path

from fedbed.demo import run_demo


def main() -> int:
    workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo-run")
    rounds = int(sys.argv[2]) if len(sys.argv) > 2 else 5
    out = run_demo(workdir, rounds=rounds, transport="tcp")
    state = out["state"]
    print(f"completed {state.round_index} rounds over "
          f"{len(state.history[-1].responders)} nodes")
    for record in state.history:
        losses = {n: round(v.get("holdout_loss", float("nan")), 4)
                  for n, v in record.validation.items()}
        print(f"  round {record.round_index}: holdout loss {losses}")
    report = out["report"]
    print("runtime breakdown (ms): "
          + ", ".join(f"{k}={v:.0f}" for k, v in report.totals.items()))
    print(f"overhead fraction: {report.overhead_fraction:.2f}")
    print(f"checkpoint: {out['checkpoint_path']}")
    print(f"metric log: {out['metrics_path']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
