"""Synthetic task generation and Dirichlet sharding properties."""

import json

import numpy as np
import pytest

from fedgrow.data import (
    LabeledDataset,
    PartitionSpec,
    dirichlet_indices,
    dirichlet_partition,
    export_shard_manifest,
    load_shard_manifest,
    make_synthetic_task,
    train_test_split,
)


class TestMakeSyntheticTask:
    def test_size_and_coverage(self):
        ds = make_synthetic_task(vocab=32, classes=4, seq_len=8, size=1000, seed=0)
        assert len(ds) == 1000
        assert set(np.unique(ds.labels)) == {0, 1, 2, 3}

    def test_deterministic(self):
        a = make_synthetic_task(16, 3, 5, 200, seed=9)
        b = make_synthetic_task(16, 3, 5, 200, seed=9)
        np.testing.assert_array_equal(a.sequences, b.sequences)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_tokens_in_vocab(self):
        ds = make_synthetic_task(16, 3, 5, 300, seed=2)
        assert ds.sequences.min() >= 0 and ds.sequences.max() < 16

    def test_separation_shapes_token_blocks(self):
        ds = make_synthetic_task(vocab=40, classes=4, seq_len=20, size=2000, seed=1, separation=0.9)
        # tokens of class-0 examples should concentrate in block [0, 10)
        tokens = ds.sequences[ds.labels == 0].ravel()
        in_block = np.mean(tokens < 10)
        assert in_block > 0.8

    def test_rejects_size_below_classes(self):
        with pytest.raises(ValueError, match="cover"):
            make_synthetic_task(16, 5, 4, 3, seed=0)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError, match="classes"):
            make_synthetic_task(16, 1, 4, 10, seed=0)


class TestTrainTestSplit:
    def test_partition_sizes_and_disjoint(self):
        ds = make_synthetic_task(16, 2, 4, 100, seed=0)
        train, test = train_test_split(ds, 0.25, seed=1)
        assert len(train) == 75 and len(test) == 25


class TestDirichletPartition:
    def test_single_client_gets_everything(self):
        ds = make_synthetic_task(16, 3, 5, 120, seed=0)
        shards = dirichlet_partition(ds, PartitionSpec(n_clients=1, beta=0.5, seed=0))
        assert len(shards) == 1 and len(shards[0]) == 120

    def test_disjoint_cover(self):
        ds = make_synthetic_task(16, 4, 5, 500, seed=3)
        idx = dirichlet_indices(ds.labels, ds.class_count, PartitionSpec(5, 0.5, seed=7))
        merged = np.sort(np.concatenate(idx))
        np.testing.assert_array_equal(merged, np.arange(500))

    def test_deterministic(self):
        ds = make_synthetic_task(16, 4, 5, 300, seed=1)
        spec = PartitionSpec(4, 0.3, seed=11, min_shard=2)
        a = dirichlet_indices(ds.labels, ds.class_count, spec)
        b = dirichlet_indices(ds.labels, ds.class_count, spec)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_high_beta_close_to_global_histogram(self):
        ds = make_synthetic_task(32, 4, 6, 4000, seed=5)
        global_hist = ds.label_histogram()
        shards = dirichlet_partition(ds, PartitionSpec(10, 100.0, seed=3, min_shard=10))
        gaps = []
        for shard in shards:
            gaps.append(np.abs(shard.label_histogram() - global_hist).max())
        assert np.mean(gaps) < 0.05

    def test_low_beta_more_skewed_than_high(self):
        ds = make_synthetic_task(32, 4, 6, 2000, seed=5)
        shares = {0.5: [], 100.0: []}
        for beta in shares:
            for seed in range(20):
                shards = dirichlet_partition(ds, PartitionSpec(10, beta, seed=seed, min_shard=1))
                shares[beta].append(np.mean([s.label_histogram().max() for s in shards]))
        assert np.mean(shares[0.5]) > np.mean(shares[100.0])

    def test_monotone_skew_in_beta(self):
        ds = make_synthetic_task(32, 4, 6, 2000, seed=8)
        global_hist = ds.label_histogram()

        def mean_tv(beta):
            tvs = []
            for seed in range(20):
                shards = dirichlet_partition(ds, PartitionSpec(8, beta, seed=100 + seed, min_shard=1))
                tvs.append(
                    np.mean([0.5 * np.abs(s.label_histogram() - global_hist).sum() for s in shards])
                )
            return np.mean(tvs)

        tv_01, tv_05, tv_100 = mean_tv(0.1), mean_tv(0.5), mean_tv(100.0)
        assert tv_01 > tv_05 > tv_100

    def test_min_shard_enforced(self):
        ds = make_synthetic_task(16, 4, 5, 400, seed=2)
        shards = dirichlet_partition(ds, PartitionSpec(4, 0.2, seed=1, min_shard=40))
        assert min(len(s) for s in shards) >= 40

    def test_infeasible_min_shard_rejected(self):
        ds = make_synthetic_task(16, 4, 5, 100, seed=2)
        with pytest.raises(ValueError, match="infeasible"):
            dirichlet_partition(ds, PartitionSpec(4, 0.5, seed=1, min_shard=30))

    def test_manifest_roundtrip(self, tmp_path):
        ds = make_synthetic_task(16, 3, 5, 200, seed=4)
        idx = dirichlet_indices(ds.labels, ds.class_count, PartitionSpec(3, 0.5, seed=5))
        path = tmp_path / "shards.json"
        export_shard_manifest(path, idx)
        loaded = load_shard_manifest(path)
        for x, y in zip(idx, loaded):
            np.testing.assert_array_equal(x, y)
        # manifest is plain JSON keyed by client id
        raw = json.loads(path.read_text())
        assert set(raw) == {"0", "1", "2"}


class TestLabeledDataset:
    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError, match="labels"):
            LabeledDataset(np.zeros((3, 2), dtype=np.int64), np.array([0, 1, 5]), 3)

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="non-empty"):
            LabeledDataset(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64), 2)

    def test_subset(self):
        ds = make_synthetic_task(16, 3, 5, 50, seed=0)
        sub = ds.subset([0, 2, 4])
        assert len(sub) == 3
        np.testing.assert_array_equal(sub.sequences, ds.sequences[[0, 2, 4]])


class TestLearnability:
    def test_small_model_beats_twice_chance(self):
        # training-run oracle pinning the task as learnable by a tiny encoder
        from fedgrow.client import train_model_params
        from fedgrow.metrics import evaluate
        from fedgrow.model import ModelConfig, init_params
        from fedgrow.optim import AdamW

        ds = make_synthetic_task(vocab=64, classes=4, seq_len=12, size=900, seed=12, separation=0.5)
        train, test = train_test_split(ds, 1 / 3, seed=0)
        cfg = ModelConfig(
            hidden_dim=64, num_layers=1, num_heads=4, num_classes=4,
            ffn_multiplier=2, vocab_size=64, max_seq_len=12,
        )
        params, losses = train_model_params(
            init_params(cfg, 0), cfg, train, epochs=50, optimizer=AdamW(3e-3, weight_decay=0.0),
            batch_size=32, base_seed=77,
        )
        assert evaluate(params, cfg, test).accuracy > 0.5  # 2x chance of 0.25
        assert losses[-1] < losses[0]
