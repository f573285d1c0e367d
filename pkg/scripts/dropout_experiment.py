#!/usr/bin/env python3
"""Demonstrate drop-out handling: kill one node mid-round under both
shortfall strategies and show what the researcher observes.

Usage: python scripts/dropout_experiment.py
"""

import sys
import tempfile

from fedbed import protocol as P
from fedbed.demo import build_federation
from fedbed.errors import RoundShortfall
from fedbed.node.daemon import _SimulatedCrash


def crash_at(step):
    def injector(event, info):
        if event == "train_step" and info.get("step") == step:
            raise _SimulatedCrash()
    return injector


def run_case(workdir, min_nodes):
    args = P.TrainingArgs(learning_rate=0.05, momentum=0.0, batch_size=8,
                          num_local_updates=6, rng_seed=5,
                          validation_split_holdout_fraction=0.1)
    fed = build_federation(workdir, rounds=1, transport="local", seed=5,
                           training_args=args, reply_timeout_ms=2500,
                           min_nodes_per_round=min_nodes,
                           on_shortfall="continue_with_responders",
                           fault_injectors={"node-1": crash_at(3)})
    try:
        fed.experiment.search_federation(timeout_ms=500)
        try:
            record = fed.experiment.run_round()
            print(f"  min_nodes={min_nodes}: round completed with "
                  f"{len(record.responders)} responders "
                  f"{list(record.responders)}")
        except RoundShortfall as exc:
            print(f"  min_nodes={min_nodes}: RoundShortfall ({exc.message}); "
                  f"round_index still {fed.experiment.state.round_index}")
    finally:
        fed.close()


def main() -> int:
    print("node-1 is killed after its third local update in every case")
    with tempfile.TemporaryDirectory() as td:
        run_case(f"{td}/continue", min_nodes=2)
        run_case(f"{td}/shortfall", min_nodes=3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
