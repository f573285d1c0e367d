#!/usr/bin/env python3
"""Federated-vs-centralized parity: train the same logistic model both ways
(matched update counts, same initialization) and compare holdout losses.

Usage: python scripts/parity_experiment.py [seeds...]
"""

import sys
import tempfile

import numpy as np

from fedbed import protocol as P
from fedbed.clock import ManualClock
from fedbed.demo import build_federation
from fedbed.mlcore import (
    ModelInstance,
    forward,
    gradient,
    iterate_batches,
    loss as compute_loss,
    sgd_step,
    split_holdout,
)
from fedbed.mlcore.data import TabularDataset
from fedbed.util import derive_seed

PER_SITE = 200
ROUNDS = 40
LOCAL_UPDATES = 25
LR, MOMENTUM, BATCH = 0.1, 0.9, 8


def synth_table(n, d, seed):
    rng = np.random.default_rng(seed)
    w_star = np.linspace(-1.5, 1.5, d) * 2.0
    x = rng.uniform(-0.5, 0.5, size=(n, d))
    y = (x @ w_star > 0).astype(float)
    flips = rng.random(n) < 0.25
    y = np.where(flips, 1.0 - y, y)
    return [f"x{j}" for j in range(d)] + ["y"], np.column_stack([x, y])


def run_seed(seed: int, workdir) -> tuple:
    columns, rows = synth_table(3 * PER_SITE, 5, seed)
    tables = [(columns, rows[i * PER_SITE:(i + 1) * PER_SITE])
              for i in range(3)]
    plan = P.TrainingPlan(
        plan_name=f"parity-{seed}",
        model_spec=P.LogisticRegressionSpec(in_dim=5, classes=2),
        optimizer_spec=P.OptimizerSpec(uses_momentum=True),
        loss_spec=P.LossKind.CROSS_ENTROPY,
        validation_metric=P.MetricKind.ACCURACY)
    args = P.TrainingArgs(learning_rate=LR, momentum=MOMENTUM,
                          batch_size=BATCH, num_local_updates=LOCAL_UPDATES,
                          rng_seed=seed,
                          validation_split_holdout_fraction=0.2)
    fed = build_federation(workdir, rounds=ROUNDS, transport="local",
                           seed=seed, site_sizes=(PER_SITE,) * 3,
                           tables=tables, plan=plan, training_args=args,
                           reply_timeout_ms=8000, clock=ManualClock(),
                           node_clock=ManualClock())
    try:
        fed.experiment.search_federation(timeout_ms=500)
        theta0 = fed.experiment.state.global_params
        state = fed.experiment.run()
        trains, holds = [], []
        for i, node_id in enumerate(fed.node_ids):
            dataset = TabularDataset(tuple(columns), tables[i][1], "y")
            split_seed = derive_seed(seed, "holdout", f"{node_id}-data")
            train, hold = split_holdout(dataset, 0.2, split_seed)
            trains.append(train.features_and_target())
            holds.append(hold.features_and_target())
    finally:
        fed.close()

    train_x = np.vstack([t[0] for t in trains])
    train_y = np.concatenate([t[1] for t in trains])
    hold_x = np.vstack([h[0] for h in holds])
    hold_y = np.concatenate([h[1] for h in holds])

    params, velocity = theta0, theta0.zeros_like()
    model = ModelInstance(spec=plan.model_spec, params=params)
    for batch in iterate_batches(len(train_y), BATCH,
                                 ROUNDS * LOCAL_UPDATES,
                                 derive_seed(seed, "centralized")):
        model = model.with_params(params)
        grad = gradient(model, (train_x[batch], train_y[batch]),
                        plan.loss_spec)
        params, velocity = sgd_step(params, grad, velocity, LR, MOMENTUM)

    fed_loss = compute_loss(
        forward(ModelInstance(spec=plan.model_spec,
                              params=state.global_params), hold_x),
        hold_y, plan.loss_spec)
    cen_loss = compute_loss(
        forward(ModelInstance(spec=plan.model_spec, params=params), hold_x),
        hold_y, plan.loss_spec)
    return fed_loss, cen_loss


def main() -> int:
    seeds = [int(s) for s in sys.argv[1:]] or [1, 2, 3, 4, 5]
    fed_losses, cen_losses = [], []
    with tempfile.TemporaryDirectory() as td:
        for seed in seeds:
            fed_loss, cen_loss = run_seed(seed, f"{td}/seed{seed}")
            rel = abs(fed_loss - cen_loss) / cen_loss
            print(f"seed {seed}: federated {fed_loss:.4f}  "
                  f"centralized {cen_loss:.4f}  relative {rel:.3f}")
            fed_losses.append(fed_loss)
            cen_losses.append(cen_loss)
    mean_fed, mean_cen = np.mean(fed_losses), np.mean(cen_losses)
    print(f"means over {len(seeds)} seeds: federated {mean_fed:.4f}  "
          f"centralized {mean_cen:.4f}  "
          f"relative {abs(mean_fed - mean_cen) / mean_cen:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
