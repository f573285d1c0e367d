import pytest

from fedbed import protocol
from fedbed.clock import ManualClock


@pytest.fixture
def zero_clock():
    return ManualClock(0)


def make_plan(name="test-plan", model="linear", d=2, classes=2,
              layer_dims=(2, 4, 1), activation="relu", loss="mse",
              metric="mse", preprocessing=()):
    if model == "linear":
        spec = protocol.LinearRegressionSpec(in_dim=d)
    elif model == "logistic":
        spec = protocol.LogisticRegressionSpec(in_dim=d, classes=classes)
    else:
        spec = protocol.MLPSpec(layer_dims=tuple(layer_dims),
                                activation=activation)
    return protocol.TrainingPlan(
        plan_name=name,
        model_spec=spec,
        optimizer_spec=protocol.OptimizerSpec(uses_momentum=True),
        loss_spec=protocol.LossKind(loss),
        preprocessing_spec=tuple(preprocessing),
        validation_metric=protocol.MetricKind(metric))


def make_args(lr=0.1, momentum=0.0, batch_size=8, updates=2, dropout=0.0,
              seed=0, holdout=0.1):
    return protocol.TrainingArgs(
        learning_rate=lr, momentum=momentum, batch_size=batch_size,
        num_local_updates=updates, dropout_rate=dropout, rng_seed=seed,
        validation_split_holdout_fraction=holdout)


def make_train_request(plan=None, args=None, experiment_id="exp", round_index=0,
                       tags=("demo",), ref="0" * 64, **kwargs):
    plan = plan if plan is not None else make_plan()
    args = args if args is not None else make_args()
    return protocol.TrainRequestBody(
        experiment_id=experiment_id, round_index=round_index, plan=plan,
        plan_hash=protocol.compute_plan_hash(plan), training_args=args,
        dataset_tags=tuple(tags), global_params_ref=ref, **kwargs)


def write_table_csv(path, columns, rows):
    import csv
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def random_params(rng, max_tensors=3, max_dim=4):
    from fedbed.mlcore.params import ParamVector
    n = rng.integers(1, max_tensors + 1)
    tensors = []
    for i in range(n):
        ndim = int(rng.integers(1, 3))
        shape = tuple(int(rng.integers(1, max_dim + 1)) for _ in range(ndim))
        tensors.append((f"t{i}", rng.normal(size=shape)))
    return ParamVector(tensors)
