"""Protocol: envelope round-trips, canonical plan bytes, content hashing."""

import hashlib
import json

import pytest
from hypothesis import given, settings, strategies as st

from fedbed import protocol as P
from fedbed.errors import (
    HashMismatch,
    KindMismatch,
    MalformedMessage,
    UnsupportedVersion,
)

from conftest import make_args, make_plan, make_train_request

# Reference plan with its documented canonical rendering; the digest below
# was produced by an independent SHA-256 run over exactly these bytes.
REFERENCE_CANONICAL = (
    b'{"loss_spec":"mse","model_spec":{"in_dim":2,"kind":"linear_regression"},'
    b'"optimizer_spec":{"kind":"sgd","uses_momentum":false},'
    b'"plan_name":"ref-plan","preprocessing_spec":[],"validation_metric":"mse"}'
)
REFERENCE_DIGEST = "93750a999947ea5919793f1b2f93e0be208f9476f7b55752ddb1739a8c7a4e78"


def reference_plan():
    return P.TrainingPlan(
        plan_name="ref-plan",
        model_spec=P.LinearRegressionSpec(in_dim=2),
        optimizer_spec=P.OptimizerSpec(uses_momentum=False),
        loss_spec=P.LossKind.MSE,
        preprocessing_spec=(),
        validation_metric=P.MetricKind.MSE)


class TestCanonicalBytes:
    def test_reference_bytes(self):
        assert P.canonical_bytes(reference_plan()) == REFERENCE_CANONICAL

    def test_golden_hash_matches_independent_sha256(self):
        assert hashlib.sha256(REFERENCE_CANONICAL).hexdigest() == REFERENCE_DIGEST
        assert P.compute_plan_hash(reference_plan()).digest == REFERENCE_DIGEST

    def test_field_order_does_not_matter(self):
        a = make_plan(name="p", model="mlp", layer_dims=(3, 2), loss="mse")
        b = P.TrainingPlan(
            validation_metric=P.MetricKind.MSE,
            preprocessing_spec=(),
            loss_spec=P.LossKind.MSE,
            optimizer_spec=P.OptimizerSpec(uses_momentum=True),
            model_spec=P.MLPSpec(layer_dims=(3, 2), activation="relu"),
            plan_name="p")
        assert P.canonical_bytes(a) == P.canonical_bytes(b)

    def test_plan_name_is_part_of_identity(self):
        a = make_plan(name="one")
        b = make_plan(name="two")
        assert P.canonical_bytes(a) != P.canonical_bytes(b)

    def test_preprocessing_order_is_significant(self):
        s1 = P.PreprocessingStep(kind="standardize_columns")
        s2 = P.PreprocessingStep(kind="minmax_columns")
        a = make_plan(preprocessing=(s1, s2))
        b = make_plan(preprocessing=(s2, s1))
        assert P.canonical_bytes(a) != P.canonical_bytes(b)

    def test_loss_change_changes_digest(self):
        a = make_plan(loss="mse")
        b = make_plan(loss="soft_dice")
        assert P.compute_plan_hash(a) != P.compute_plan_hash(b)

    def test_hash_deterministic(self):
        plan = make_plan()
        assert P.compute_plan_hash(plan) == P.compute_plan_hash(plan)

    def test_args_never_affect_plan_hash(self):
        plan = make_plan()
        before = P.compute_plan_hash(plan)
        make_args(lr=9.9, batch_size=1234, updates=777, dropout=0.5)
        assert P.compute_plan_hash(plan) == before


class TestTrainingArgsBounds:
    @pytest.mark.parametrize("kwargs", [
        {"lr": 0.0}, {"lr": -1.0}, {"momentum": 1.0}, {"momentum": -0.1},
        {"batch_size": 0}, {"updates": 0}, {"dropout": 1.0},
        {"holdout": 0.0}, {"holdout": 1.0},
    ])
    def test_rejects_out_of_bounds(self, kwargs):
        with pytest.raises(MalformedMessage):
            make_args(**kwargs)


# -- envelope strategies -------------------------------------------------------

_ids = st.text(alphabet="abcdefgh0123456789-", min_size=1, max_size=12)
_tags = st.lists(st.sampled_from(["prostate", "t2w", "demo", "brain"]),
                 min_size=1, max_size=3, unique=True)


def _plans():
    linear = st.integers(1, 6).map(lambda d: P.LinearRegressionSpec(in_dim=d))
    logistic = st.tuples(st.integers(1, 5), st.integers(2, 4)).map(
        lambda t: P.LogisticRegressionSpec(in_dim=t[0], classes=t[1]))
    mlp = st.tuples(
        st.lists(st.integers(1, 5), min_size=2, max_size=4),
        st.sampled_from(["relu", "tanh", "sigmoid"]),
    ).map(lambda t: P.MLPSpec(layer_dims=tuple(t[0]), activation=t[1]))
    steps = st.lists(st.one_of(
        st.just(P.PreprocessingStep(kind="standardize_columns")),
        st.just(P.PreprocessingStep(kind="minmax_columns")),
        st.lists(_ids, min_size=1, max_size=3, unique=True).map(
            lambda names: P.PreprocessingStep(kind="select_columns",
                                              names=tuple(names))),
    ), max_size=3)
    return st.builds(
        P.TrainingPlan,
        plan_name=_ids,
        model_spec=st.one_of(linear, logistic, mlp),
        optimizer_spec=st.builds(P.OptimizerSpec, uses_momentum=st.booleans()),
        loss_spec=st.sampled_from(list(P.LossKind)),
        preprocessing_spec=steps.map(tuple),
        validation_metric=st.sampled_from(list(P.MetricKind)))


def _args():
    return st.builds(
        P.TrainingArgs,
        learning_rate=st.floats(1e-4, 10.0, allow_nan=False),
        momentum=st.floats(0.0, 0.99),
        batch_size=st.integers(1, 512),
        num_local_updates=st.integers(1, 100),
        dropout_rate=st.floats(0.0, 0.9),
        rng_seed=st.integers(-2**31, 2**31),
        validation_split_holdout_fraction=st.floats(0.01, 0.99))


def _timings():
    ms = st.floats(0.0, 1e6, allow_nan=False, allow_infinity=False)
    return st.builds(P.RoundTiming, download_ms=ms, preprocessing_ms=ms,
                     training_ms=ms, upload_ms=ms)


def _payloads():
    matches = st.lists(st.builds(
        P.DatasetMatch, dataset_id=_ids, display_name=_ids,
        sample_count=st.integers(0, 10_000),
        column_summary=st.one_of(st.none(), st.lists(_ids, max_size=4).map(tuple))),
        max_size=3).map(tuple)
    train_request = st.builds(
        lambda plan, args, tags, rid, ref, secagg, validate: P.TrainRequestBody(
            experiment_id="exp", round_index=rid, plan=plan,
            plan_hash=P.compute_plan_hash(plan), training_args=args,
            dataset_tags=tuple(tags), global_params_ref=ref,
            secagg_enabled=secagg, validate_only=validate),
        _plans(), _args(), _tags, st.integers(0, 1000),
        st.text(alphabet="0123456789abcdef", min_size=64, max_size=64),
        st.booleans(), st.booleans())
    success_reply = st.builds(
        lambda rid, nid, n, timing, ref: P.TrainReplyBody(
            experiment_id="exp", round_index=rid, node_id=nid,
            status=P.TrainStatus.SUCCESS, local_params_ref=ref,
            num_samples_trained=n, timing=timing,
            applied_overrides={"batch_size": 8}),
        st.integers(0, 100), _ids, st.integers(1, 10_000), _timings(),
        st.text(alphabet="0123456789abcdef", min_size=64, max_size=64))
    refused_reply = st.builds(
        lambda rid, nid, reason: P.TrainReplyBody(
            experiment_id="exp", round_index=rid, node_id=nid,
            status=P.TrainStatus.REFUSED, refusal_reason=reason),
        st.integers(0, 100), _ids, _ids)
    return st.one_of(
        st.builds(P.SearchRequestBody, tags=_tags.map(tuple)),
        st.builds(P.SearchReplyBody, node_id=_ids, matches=matches),
        train_request,
        success_reply,
        refused_reply,
        _plans().map(lambda plan: P.ApprovalStatusRequestBody(
            plan=plan, plan_hash=P.compute_plan_hash(plan))),
        st.builds(P.ApprovalStatusReplyBody, node_id=_ids,
                  plan_hash=st.text(alphabet="0123456789abcdef",
                                    min_size=64, max_size=64),
                  status=st.sampled_from(["pending", "approved", "rejected"])),
        st.builds(P.MonitorBody, experiment_id=_ids,
                  round_index=st.integers(0, 100), node_id=_ids, name=_ids,
                  value=st.floats(-1e9, 1e9, allow_nan=False)),
        st.builds(P.ErrorBody, error_code=_ids, message=_ids),
        st.builds(P.PingBody, nonce=_ids),
        st.builds(P.PongBody, nonce=_ids))


def envelopes():
    return st.builds(
        lambda sender, payload, ts: P.make_envelope(
            sender, "fedbed/all-nodes", payload, timestamp=ts),
        _ids, _payloads(), st.integers(0, 2**48))


class TestEnvelopeRoundTrip:
    @given(envelopes())
    @settings(max_examples=200, deadline=None)
    def test_decode_encode_identity(self, env):
        assert P.decode(P.encode(env)) == env

    @given(envelopes())
    @settings(max_examples=50, deadline=None)
    def test_encode_deterministic(self, env):
        assert P.encode(env) == P.encode(env)

    def test_ping_round_trip(self):
        env = P.make_envelope("r", "fedbed/all-nodes", P.PingBody(nonce="n"),
                              timestamp=1)
        assert P.decode(P.encode(env)) == env


class TestDecodeErrors:
    def test_truncated_stream(self):
        env = P.make_envelope("r", "fedbed/all-nodes", P.PingBody(), timestamp=1)
        with pytest.raises(MalformedMessage):
            P.decode(P.encode(env)[:-10])

    def test_not_json(self):
        with pytest.raises(MalformedMessage):
            P.decode(b"\xff\xfe not json")

    def test_unsupported_version(self):
        env = P.make_envelope("r", "fedbed/all-nodes", P.PingBody(), timestamp=1)
        doc = json.loads(P.encode(env))
        doc["protocol_version"] = "99.0"
        with pytest.raises(UnsupportedVersion):
            P.decode(json.dumps(doc).encode())

    def test_kind_payload_mismatch_on_construction(self):
        with pytest.raises(KindMismatch):
            P.MessageEnvelope(
                message_id="m", sender_id="s", topic="fedbed/all-nodes",
                kind=P.MessageKind.TRAIN_REQUEST, timestamp=1,
                payload=P.SearchReplyBody(node_id="n", matches=()))

    def test_kind_payload_mismatch_on_decode(self):
        env = P.make_envelope("r", "fedbed/all-nodes",
                              P.SearchRequestBody(tags=("a",)), timestamp=1)
        doc = json.loads(P.encode(env))
        doc["kind"] = "train_reply"
        with pytest.raises(KindMismatch):
            P.decode(json.dumps(doc).encode())

    def test_tampered_plan_same_hash_is_hash_mismatch(self):
        body = make_train_request()
        env = P.make_envelope("r", "fedbed/all-nodes", body, timestamp=1)
        doc = json.loads(P.encode(env))
        doc["payload"]["plan"]["plan_name"] = "tampered"
        with pytest.raises(HashMismatch):
            P.decode(json.dumps(doc).encode())

    def test_unknown_kind(self):
        env = P.make_envelope("r", "fedbed/all-nodes", P.PingBody(), timestamp=1)
        doc = json.loads(P.encode(env))
        doc["kind"] = "no_such_kind"
        with pytest.raises(MalformedMessage):
            P.decode(json.dumps(doc).encode())


class TestInvariants:
    def test_success_reply_requires_params_ref(self):
        with pytest.raises(MalformedMessage):
            P.TrainReplyBody(experiment_id="e", round_index=0, node_id="n",
                             status=P.TrainStatus.SUCCESS,
                             num_samples_trained=5)

    def test_success_reply_requires_samples(self):
        with pytest.raises(MalformedMessage):
            P.TrainReplyBody(experiment_id="e", round_index=0, node_id="n",
                             status=P.TrainStatus.SUCCESS,
                             local_params_ref="a" * 64,
                             num_samples_trained=0)

    @given(_plans())
    @settings(max_examples=100, deadline=None)
    def test_hash_stability_over_random_plans(self, plan):
        again = P.TrainingPlan.from_dict(plan.to_dict())
        assert P.compute_plan_hash(plan) == P.compute_plan_hash(again)

    def test_plan_hash_digest_is_32_bytes(self):
        digest = P.compute_plan_hash(make_plan()).digest_bytes
        assert len(digest) == 32

    def test_message_ids_unique(self):
        ids = {P.new_message_id() for _ in range(1000)}
        assert len(ids) == 1000
