"""Evaluation metrics, cross-client statistics, similarity diagnostic."""

import math

import numpy as np
import pytest

from fedgrow.data import LabeledDataset, make_synthetic_task
from fedgrow.metrics import (
    config_digest,
    cross_client_stats,
    evaluate,
    export_metrics_csv,
    export_similarity_csv,
    intermediate_similarity,
)
from fedgrow.model import ModelConfig, ParamSet, init_params

CFG = ModelConfig(hidden_dim=4, num_layers=1, num_heads=2, num_classes=3, ffn_multiplier=2, vocab_size=16, max_seq_len=6)


def constant_class_params(cfg, winner: int) -> ParamSet:
    arrays = init_params(cfg, 0).arrays()
    for name in list(arrays):
        if name.startswith(("layer", "embed")):
            arrays[name] = np.zeros_like(arrays[name])
        if name.endswith("gamma"):
            arrays[name] = np.ones_like(arrays[name])
    arrays["head.w"] = np.zeros_like(arrays["head.w"])
    bias = np.zeros_like(arrays["head.b"])
    bias[winner] = 10.0
    arrays["head.b"] = bias
    return ParamSet.from_arrays(arrays)


class TestEvaluate:
    def test_constant_predictor_on_single_class(self):
        data = LabeledDataset(np.ones((20, 4), dtype=np.int64), np.full(20, 1, dtype=np.int64), 3)
        result = evaluate(constant_class_params(CFG, 1), CFG, data)
        assert result.accuracy == 1.0
        assert result.per_class_precision[1] == 1.0

    def test_random_model_near_chance_with_binomial_bound(self):
        # separation=0 removes any token-label signal, so predictions are
        # label-independent and the binomial bound applies
        data = make_synthetic_task(vocab=16, classes=3, seq_len=6, size=1200, seed=4, separation=0.0)
        result = evaluate(init_params(CFG, 123), CFG, data)
        p = 1.0 / 3.0
        delta = 4.0 * math.sqrt(p * (1 - p) / len(data))  # 4-sigma binomial bound
        assert abs(result.accuracy - p) < delta

    def test_shuffle_invariant(self):
        data = make_synthetic_task(vocab=16, classes=3, seq_len=6, size=90, seed=5)
        params = init_params(CFG, 9)
        base = evaluate(params, CFG, data)
        order = np.random.default_rng(0).permutation(len(data))
        shuffled = evaluate(params, CFG, data.subset(order))
        assert base.accuracy == shuffled.accuracy
        assert base.macro_precision == pytest.approx(shuffled.macro_precision, abs=1e-12)

    def test_deterministic(self):
        data = make_synthetic_task(vocab=16, classes=3, seq_len=6, size=60, seed=6)
        params = init_params(CFG, 1)
        assert evaluate(params, CFG, data) == evaluate(params, CFG, data)

    def test_macro_precision_counts_unpredicted_classes_as_zero(self):
        data = LabeledDataset(np.ones((9, 4), dtype=np.int64), np.arange(9, dtype=np.int64) % 3, 3)
        result = evaluate(constant_class_params(CFG, 0), CFG, data)
        assert result.per_class_precision[1] == 0.0 and result.per_class_precision[2] == 0.0
        assert result.macro_precision == pytest.approx((1 / 3 + 0 + 0) / 3)


class TestCrossClientStats:
    def test_all_equal_gives_zero_std(self):
        mean, std = cross_client_stats([0.4, 0.4, 0.4])
        assert mean == pytest.approx(0.4)
        assert std == pytest.approx(0.0, abs=1e-12)

    def test_forced_two_point(self):
        mean, std = cross_client_stats([0.0, 1.0])
        assert mean == 0.5 and std == 0.5  # population divisor

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(7)
        values = rng.uniform(0, 1, 10)
        mean, std = cross_client_stats(values)
        oracle_mean = sum(values) / len(values)
        oracle_std = math.sqrt(sum((v - oracle_mean) ** 2 for v in values) / len(values))
        assert mean == pytest.approx(oracle_mean, abs=1e-12)
        assert std == pytest.approx(oracle_std, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cross_client_stats([])


class TestIntermediateSimilarity:
    def _sets(self, vectors):
        # wrap plain vectors as single-entry param sets
        return [ParamSet.from_arrays({"w": np.asarray(v, dtype=float)}) for v in vectors]

    def test_self_similarity_is_exactly_one(self):
        sim, flags = intermediate_similarity(self._sets([[1.0, 2.0], [3.0, 4.0]]))
        assert sim[0, 0] == 1.0 and sim[1, 1] == 1.0 and flags == []

    def test_orthogonal_vectors(self):
        sim, _ = intermediate_similarity(self._sets([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        assert sim[0, 1] == 0.0

    def test_hand_value(self):
        sim, _ = intermediate_similarity(self._sets([[1.0, 0.0], [1.0, 1.0]]))
        assert sim[0, 1] == pytest.approx(math.sqrt(0.5), abs=1e-9)

    def test_zero_norm_flagged_and_zeroed(self):
        sim, flags = intermediate_similarity(self._sets([[0.0, 0.0], [1.0, 1.0]]))
        assert flags == [0]
        assert sim[0, 1] == 0.0 and sim[0, 0] == 0.0

    def test_symmetric_entries_bounded(self):
        rng = np.random.default_rng(8)
        sim, _ = intermediate_similarity(self._sets(rng.standard_normal((5, 12))))
        np.testing.assert_allclose(sim, sim.T, atol=1e-12)
        assert (np.abs(sim) <= 1.0 + 1e-12).all()

    def test_heterogeneous_sets_rejected(self):
        a = ParamSet.from_arrays({"w": np.ones(3)})
        b = ParamSet.from_arrays({"v": np.ones(3)})
        with pytest.raises(ValueError, match="homogeneous"):
            intermediate_similarity([a, b])


class TestExports:
    def test_metrics_csv_has_provenance_header(self, tmp_path):
        path = tmp_path / "metrics.csv"
        export_metrics_csv(path, [(1, 0, "accuracy", 0.5)], seed=7, digest="deadbeef")
        lines = path.read_text().splitlines()
        assert lines[0] == "# seed=7 config_sha256=deadbeef"
        assert lines[1] == "round,client,metric,value"
        assert lines[2] == "1,0,accuracy,0.5"

    def test_similarity_csv_grid(self, tmp_path):
        path = tmp_path / "sim.csv"
        export_similarity_csv(path, np.array([[1.0, 0.25], [0.25, 1.0]]), seed=1, digest="ff")
        lines = path.read_text().splitlines()
        assert lines[1] == "client,0,1"
        assert lines[2].startswith("0,1.0,0.25")

    def test_config_digest_stable(self):
        a = config_digest({"x": 1, "y": [1, 2]})
        b = config_digest({"y": [1, 2], "x": 1})
        assert a == b and len(a) == 16
