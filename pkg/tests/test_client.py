"""Client phase machine, freeze contracts, and update-rule equivalence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgrow.client import (
    ClientState,
    Phase,
    PhaseError,
    dataset_loss,
    finalize_large,
    install_aggregate,
    load_client,
    new_client,
    pretrain_small,
    save_client,
    train_global_ligo,
    train_local_ligo,
)
from fedgrow.data import make_synthetic_task
from fedgrow.ligo import apply, init_operator, operator_gradients
from fedgrow.model import ModelConfig, audit_shapes, forward, init_params
from fedgrow.optim import AdamW, Sgd
from fedgrow.tensor import Tape, softmax_cross_entropy

SHARED = dict(num_heads=2, num_classes=3, ffn_multiplier=2, vocab_size=16, max_seq_len=6)
SMALL = ModelConfig(hidden_dim=4, num_layers=1, **SHARED)
INTER = ModelConfig(hidden_dim=6, num_layers=2, **SHARED)
LARGE = ModelConfig(hidden_dim=8, num_layers=3, **SHARED)


def make_shard(seed=0, size=48):
    return make_synthetic_task(vocab=16, classes=3, seq_len=6, size=size, seed=seed)


def fresh_client(seed=5, **kwargs):
    return new_client(0, make_shard(), SMALL, INTER, LARGE, seed=seed, **kwargs)


def to_rounds(state):
    pretrain_small(state, 0, Sgd(0.1))
    train_local_ligo(state, 0, Sgd(0.1))
    train_global_ligo(state, 0, Sgd(0.1))


class TestPhaseMachine:
    def test_happy_path(self):
        c = fresh_client()
        assert c.phase is Phase.FRESH
        pretrain_small(c, 0, Sgd(0.1))
        assert c.phase is Phase.PRETRAINED
        train_local_ligo(c, 0, Sgd(0.1))
        assert c.phase is Phase.LOCAL_TRAINED
        train_global_ligo(c, 0, Sgd(0.1))
        assert c.phase is Phase.IN_ROUNDS
        finalize_large(c)
        assert c.phase is Phase.DONE

    def test_out_of_order_calls_rejected(self):
        c = fresh_client()
        with pytest.raises(PhaseError):
            train_local_ligo(c, 0, Sgd(0.1))
        with pytest.raises(PhaseError):
            finalize_large(c)

    OPS = {
        "pretrain": (pretrain_small, {Phase.FRESH}, Phase.PRETRAINED),
        "local": (train_local_ligo, {Phase.PRETRAINED}, Phase.LOCAL_TRAINED),
        "global": (train_global_ligo, {Phase.LOCAL_TRAINED, Phase.IN_ROUNDS}, Phase.IN_ROUNDS),
    }

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.sampled_from(["pretrain", "local", "global", "install", "finalize"]), max_size=8))
    def test_random_call_sequences(self, calls):
        c = fresh_client()
        donor = fresh_client(seed=6)
        to_rounds(donor)
        for op_name in calls:
            phase_before = c.phase
            if op_name == "install":
                allowed, after = {Phase.IN_ROUNDS}, Phase.IN_ROUNDS
                action = lambda: install_aggregate(c, donor.global_ligo)
            elif op_name == "finalize":
                allowed, after = {Phase.IN_ROUNDS}, Phase.DONE
                action = lambda: finalize_large(c)
            else:
                fn, allowed, after = self.OPS[op_name]
                action = lambda: fn(c, 0, Sgd(0.1))
            if phase_before in allowed:
                action()
                assert c.phase is after
            else:
                with pytest.raises(PhaseError):
                    action()
                assert c.phase is phase_before


class TestFreezeContracts:
    def test_pretrain_zero_epochs_keeps_params(self):
        c = fresh_client()
        before = {n: t.data.tobytes() for n, t in c.small_params.items()}
        pretrain_small(c, 0, Sgd(0.1))
        after = {n: t.data.tobytes() for n, t in c.small_params.items()}
        assert before == after and c.phase is Phase.PRETRAINED

    def test_small_frozen_through_local_training(self):
        c = fresh_client()
        pretrain_small(c, 2, Sgd(0.05))
        before = {n: t.data.tobytes() for n, t in c.small_params.items()}
        train_local_ligo(c, 3, AdamW(1e-3), batch_size=16)
        after = {n: t.data.tobytes() for n, t in c.small_params.items()}
        assert before == after

    def test_inter_frozen_through_global_training(self):
        c = fresh_client()
        pretrain_small(c, 1, Sgd(0.05))
        train_local_ligo(c, 1, Sgd(0.05))
        before = {n: t.data.tobytes() for n, t in c.inter_params.items()}
        train_global_ligo(c, 3, AdamW(1e-3), batch_size=16)
        after = {n: t.data.tobytes() for n, t in c.inter_params.items()}
        assert before == after

    def test_local_zero_epochs_materializes_initial_apply(self):
        c = fresh_client()
        pretrain_small(c, 1, Sgd(0.05))
        expected = apply(c.local_ligo, c.small_params)
        train_local_ligo(c, 0, Sgd(0.05))
        for n in expected.names():
            np.testing.assert_array_equal(c.inter_params[n].data, expected[n].data)

    def test_global_zero_epochs_keeps_operator(self):
        c = fresh_client()
        pretrain_small(c, 0, Sgd(0.1))
        train_local_ligo(c, 0, Sgd(0.1))
        before = {k: v.tobytes() for k, v in c.global_ligo.matrices().items()}
        train_global_ligo(c, 0, Sgd(0.1))
        after = {k: v.tobytes() for k, v in c.global_ligo.matrices().items()}
        assert before == after

    def test_identical_seeds_and_shards_give_identical_params(self):
        a = new_client(0, make_shard(3), SMALL, INTER, LARGE, seed=11)
        b = new_client(1, make_shard(3), SMALL, INTER, LARGE, seed=11)
        pretrain_small(a, 3, Sgd(0.05))
        pretrain_small(b, 3, Sgd(0.05))
        for n in a.small_params.names():
            assert a.small_params[n].data.tobytes() == b.small_params[n].data.tobytes()


class TestTrainingEffects:
    def test_pretrain_reaches_above_chance(self):
        c = new_client(0, make_shard(7, size=120), SMALL, INTER, LARGE, seed=3)
        pretrain_small(c, 30, AdamW(5e-3, weight_decay=0.0), batch_size=16)
        from fedgrow.metrics import evaluate

        result = evaluate(c.small_params, SMALL, make_shard(8, size=120))
        assert result.accuracy > 1.0 / 3.0

    def test_pretrain_loss_trend_nonincreasing_within_jitter(self):
        c = new_client(0, make_shard(9, size=120), SMALL, INTER, LARGE, seed=3)
        losses = pretrain_small(c, 12, AdamW(3e-3, weight_decay=0.0), batch_size=16)
        for prev, cur in zip(losses, losses[1:]):
            assert cur <= prev * 1.05

    def test_global_training_does_not_increase_loss_much(self):
        c = fresh_client()
        pretrain_small(c, 6, AdamW(3e-3), batch_size=16)
        train_local_ligo(c, 4, AdamW(3e-3), batch_size=16)
        before = dataset_loss(apply(c.global_ligo, c.inter_params), LARGE, c.shard)
        train_global_ligo(c, 5, AdamW(3e-3), batch_size=16)
        after = dataset_loss(apply(c.global_ligo, c.inter_params), LARGE, c.shard)
        assert after <= before * 1.01


def _single_step_oracle(op, src_params, shard, lr):
    """Independent one-step gradient-descent update on the full shard."""
    tape = Tape()
    generated = apply(op, src_params, tape)
    loss = softmax_cross_entropy(forward(generated, op.dst, shard.sequences), shard.labels)
    grads = operator_gradients(tape, loss, op)
    return {name: op.matrices()[name] - lr * grads[name] for name in op.matrices()}


class TestUpdateRuleEquivalence:
    def test_local_single_step_matches_oracle(self):
        lr = 0.37
        c = fresh_client(seed=21)
        pretrain_small(c, 1, Sgd(0.05), batch_size=16)
        expected = _single_step_oracle(c.local_ligo, c.small_params, c.shard, lr)
        train_local_ligo(c, 1, Sgd(lr), batch_size=len(c.shard))
        for name, want in expected.items():
            np.testing.assert_allclose(c.local_ligo.matrices()[name], want, atol=1e-12)

    def test_global_single_step_matches_oracle(self):
        lr = 0.19
        c = fresh_client(seed=22)
        pretrain_small(c, 1, Sgd(0.05), batch_size=16)
        train_local_ligo(c, 1, Sgd(0.05), batch_size=16)
        expected = _single_step_oracle(c.global_ligo, c.inter_params, c.shard, lr)
        train_global_ligo(c, 1, Sgd(lr), batch_size=len(c.shard))
        for name, want in expected.items():
            np.testing.assert_allclose(c.global_ligo.matrices()[name], want, atol=1e-12)


class TestInstallAndFinalize:
    def test_install_replaces_wholesale(self):
        c = fresh_client()
        to_rounds(c)
        donor = fresh_client(seed=33)
        to_rounds(donor)
        install_aggregate(c, donor.global_ligo)
        for name, arr in donor.global_ligo.matrices().items():
            np.testing.assert_array_equal(c.global_ligo.matrices()[name], arr)

    def test_install_zero_operator_yields_zero_model(self):
        c = fresh_client()
        to_rounds(c)
        zeros = c.global_ligo.with_matrices(
            {k: np.zeros_like(v) for k, v in c.global_ligo.matrices().items()}
        )
        install_aggregate(c, zeros)
        large = finalize_large(c)
        for name in large.names():
            if name != "head.b":  # class bias passes through untouched by the maps
                assert not large[name].data.any(), name

    def test_install_shape_mismatch_rejected(self):
        c = fresh_client()
        to_rounds(c)
        other = init_operator(SMALL, LARGE, seed=0)
        with pytest.raises(ValueError, match="config"):
            install_aggregate(c, other)

    def test_finalize_equals_direct_apply(self):
        c = fresh_client()
        to_rounds(c)
        expected = apply(c.global_ligo, c.inter_params)
        large = finalize_large(c)
        for n in expected.names():
            np.testing.assert_array_equal(large[n].data, expected[n].data)
        audit_shapes(large, LARGE)

    def test_different_intermediates_give_different_larges(self):
        a, b = fresh_client(seed=1), fresh_client(seed=2)
        for c in (a, b):
            pretrain_small(c, 2, Sgd(0.05), batch_size=16)
            train_local_ligo(c, 1, Sgd(0.05), batch_size=16)
            train_global_ligo(c, 0, Sgd(0.05))
        install_aggregate(b, a.global_ligo)
        la, lb = finalize_large(a), finalize_large(b)
        assert any(not np.array_equal(la[n].data, lb[n].data) for n in la.names())


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        c = fresh_client(seed=8)
        pretrain_small(c, 2, AdamW(1e-3), batch_size=16)
        train_local_ligo(c, 1, AdamW(1e-3), batch_size=16)
        train_global_ligo(c, 1, AdamW(1e-3), batch_size=16)
        save_client(c, tmp_path / "c0")
        back = load_client(tmp_path / "c0")
        assert back.id == c.id and back.phase == c.phase and back.seed == c.seed
        assert back.global_epochs == c.global_epochs
        for n in c.small_params.names():
            assert back.small_params[n].data.tobytes() == c.small_params[n].data.tobytes()
        for name, arr in c.global_ligo.matrices().items():
            assert back.global_ligo.matrices()[name].tobytes() == arr.tobytes()
        np.testing.assert_array_equal(back.shard.sequences, c.shard.sequences)
        for n in c.inter_params.names():
            assert back.inter_params[n].data.tobytes() == c.inter_params[n].data.tobytes()
