"""End-to-end experiment runs for the four presets, plus accounting-only
reports. Every run is reproducible bit-exactly from (config, seed); wall
clock goes to a separate timing file so the deterministic outputs stay
byte-identical.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .client import (
    ClientState,
    dataset_loss,
    finalize_large,
    load_client,
    new_client,
    pretrain_small,
    save_client,
    train_local_ligo,
    train_model_params,
)
from .config import ExperimentConfig, build_suite
from .data import (
    LabeledDataset,
    PartitionSpec,
    dirichlet_indices,
    export_shard_manifest,
    make_synthetic_task,
)
from .ligo import apply, operator_count
from .metrics import (
    config_digest,
    cross_client_stats,
    evaluate,
    export_metrics_csv,
    export_similarity_csv,
    intermediate_similarity,
)
from .model import ModelConfig, ParamSet, count_params, init_params, load_params, save_params
from .optim import make_optimizer
from .serialize import dumps_entries, loads_entries
from .server import RoundLedger, RoundRecord, average_paramsets, comm_cost_report, run_rounds


def _seed(base: int, stream: int, extra: int = 0) -> int:
    return int(np.random.SeedSequence([base, stream, extra]).generate_state(1)[0])


def _make_data(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    t = config.task
    full = make_synthetic_task(
        vocab=t.vocab_size,
        classes=t.num_classes,
        seq_len=t.seq_len,
        size=t.train_size + t.test_size,
        seed=_seed(config.seed, 1),
        separation=t.separation,
    )
    train = full.subset(np.arange(t.train_size))
    test = full.subset(np.arange(t.train_size, t.train_size + t.test_size))
    return train, test


def _shards(config: ExperimentConfig, train: LabeledDataset) -> list[np.ndarray]:
    spec = PartitionSpec(
        n_clients=config.n_clients,
        beta=config.beta,
        seed=_seed(config.seed, 2),
        min_shard=config.min_shard,
    )
    return dirichlet_indices(train.labels, train.class_count, spec)


def find_comm_matched_config(
    reference: ModelConfig, target_params: int, tolerance: float = 0.10
) -> ModelConfig:
    """Smallest-error resize of `reference` whose count approximates target_params.

    Searches layer counts and head-aligned widths no larger than the
    reference. Raises with the nearest achievable option when nothing lands
    within the tolerance.
    """
    best = None
    for layers in range(1, reference.num_layers + 1):
        for width in range(reference.num_heads, reference.hidden_dim + 1, reference.num_heads):
            cand = ModelConfig(
                hidden_dim=width,
                num_layers=layers,
                num_heads=reference.num_heads,
                num_classes=reference.num_classes,
                ffn_multiplier=reference.ffn_multiplier,
                vocab_size=reference.vocab_size,
                max_seq_len=reference.max_seq_len,
            )
            count = count_params(cand).total
            err = abs(count - target_params) / target_params
            if best is None or err < best[0]:
                best = (err, cand, count)
    err, cand, count = best
    if err > tolerance:
        raise ValueError(
            f"no resize within {tolerance:.0%} of {target_params} params; nearest is "
            f"{cand.hidden_dim}/{cand.num_layers} with {count} ({err:.1%} off)"
        )
    return cand


def resource_report(config: ExperimentConfig) -> dict:
    """Parameter and communication accounting; no training."""
    suite = config.suite()
    per = config.operator.per_family
    local_counts = [operator_count(s, suite.intermediate, per) for s in suite.smalls]
    global_count = operator_count(suite.intermediate, suite.large, per)
    scratch = count_params(suite.large)
    avg_local = sum(c.total for c in local_counts) / len(local_counts)
    avg_dual = avg_local + global_count.total
    per_round_comm = 2 * global_count.total
    scratch_comm = 2 * scratch.total
    report = {
        "scale": config.scale,
        "hetero_case": config.hetero_case,
        "per_family": per,
        "local_ligo_params": [c.total for c in local_counts],
        "global_ligo_params": global_count.total,
        "global_ligo_parts": global_count.parts,
        "scratch_large_params": scratch.total,
        "scratch_large_families": scratch.families,
        "avg_dual_ligo_trainable": avg_dual,
        "trainable_reduction_vs_scratch": 1.0 - avg_dual / scratch.total,
        "per_round_per_client_comm": per_round_comm,
        "scratch_per_round_per_client_comm": scratch_comm,
        "comm_reduction_vs_scratch": 1.0 - per_round_comm / scratch_comm,
    }
    if config.preset == "fedavg_matched":
        try:
            cand = find_comm_matched_config(suite.large, global_count.total)
            report["fedavg_matched_model"] = cand.to_dict()
            report["fedavg_matched_params"] = count_params(cand).total
        except ValueError as exc:
            report["fedavg_matched_error"] = str(exc)
    return report


def _json_write(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _dual_ligo_run(config: ExperimentConfig, out: Path, train, test, shard_idx) -> dict:
    suite = config.suite()
    tr = config.training
    aggregate_updates = config.preset == "agg"
    clients = []
    for k, idx in enumerate(shard_idx):
        clients.append(
            new_client(
                client_id=k,
                shard=train.subset(idx),
                small_config=suite.smalls[k % len(suite.smalls)],
                inter_config=suite.intermediate,
                large_config=suite.large,
                seed=_seed(config.seed, 4, k),
                local_scheme=config.operator.local_scheme,
                global_scheme=config.operator.global_scheme,
                per_family=config.operator.per_family,
            )
        )
    for c in clients:
        pretrain_small(c, tr.e_pre, make_optimizer(tr.optimizer, tr.lr_pretrain, tr.weight_decay), tr.batch_size)
    for c in clients:
        train_local_ligo(c, tr.e_l, make_optimizer(tr.optimizer, tr.lr_local, tr.weight_decay), tr.batch_size)

    metric_rows: list[tuple] = []

    def on_round(r: int, cs) -> None:
        for c in cs:
            result = evaluate(apply(c.global_ligo, c.inter_params), suite.large, test)
            metric_rows.append((r, c.id, "accuracy", result.accuracy))
            metric_rows.append((r, c.id, "macro_precision", result.macro_precision))

    ledger = run_rounds(
        clients,
        rounds=tr.rounds,
        e_g=tr.e_g,
        optimizer_factory=lambda: make_optimizer(tr.optimizer, tr.lr_global, tr.weight_decay),
        batch_size=tr.batch_size,
        aggregate_updates=aggregate_updates,
        on_round=on_round,
    )

    sim, zero_flags = intermediate_similarity([c.inter_params for c in clients])
    finals = {}
    for c in clients:
        large = finalize_large(c)
        finals[c.id] = evaluate(large, suite.large, test)
        save_client(c, out / "checkpoints" / f"client_{c.id}")
        save_params(out / "checkpoints" / f"client_{c.id}" / "large.bin", large, suite.large)

    accs = [finals[c.id].accuracy for c in clients]
    precs = [finals[c.id].macro_precision for c in clients]
    mean_acc, std_acc = cross_client_stats(accs)
    mean_prec, std_prec = cross_client_stats(precs)
    digest = config_digest(config.to_dict())
    export_metrics_csv(out / "metrics.csv", metric_rows, config.seed, digest)
    export_similarity_csv(out / "similarity.csv", sim, config.seed, digest)
    ledger.to_csv(out / "ledger.csv", header_comment=f"seed={config.seed} config_sha256={digest}")
    ledger.to_json(out / "ledger.json")

    off_diag = sim[~np.eye(len(clients), dtype=bool)] if len(clients) > 1 else np.zeros(0)
    return {
        "final_accuracy": {str(c.id): finals[c.id].accuracy for c in clients},
        "final_macro_precision": {str(c.id): finals[c.id].macro_precision for c in clients},
        "mean_accuracy": mean_acc,
        "std_accuracy": std_acc,
        "mean_macro_precision": mean_prec,
        "std_macro_precision": std_prec,
        "similarity_max_offdiag": float(off_diag.max()) if off_diag.size else 0.0,
        "similarity_zero_norm_clients": zero_flags,
        "ledger": ledger.summary(),
        "comm": comm_cost_report(ledger, suite.large) if ledger.rows else {},
    }


def _fedavg_run(config: ExperimentConfig, out: Path, train, test, shard_idx, model_config: ModelConfig) -> dict:
    """Full-model federated averaging from random init (scratch and matched presets)."""
    tr = config.training
    shards = [train.subset(idx) for idx in shard_idx]
    global_params = init_params(model_config, _seed(config.seed, 5))
    per_client_comm = count_params(model_config).total
    ledger = RoundLedger()
    metric_rows: list[tuple] = []
    for r in range(1, tr.rounds + 1):
        start = time.perf_counter()
        locals_ = []
        for k, shard in enumerate(shards):
            params, _ = train_model_params(
                global_params.clone(),
                model_config,
                shard,
                tr.e_g,
                make_optimizer(tr.optimizer, tr.lr_global, tr.weight_decay),
                tr.batch_size,
                base_seed=_seed(config.seed, 6, k * 100003 + r),
            )
            locals_.append(params)
        # exchange through the codec, mirroring the operator transport
        payloads = [dumps_entries(p.arrays()) for p in locals_]
        uploads = [ParamSet.from_arrays(loads_entries(p)[0]) for p in payloads]
        merged = average_paramsets(uploads, [len(s) for s in shards])
        broadcast = dumps_entries(merged.arrays())
        global_params = ParamSet.from_arrays(loads_entries(broadcast)[0])
        wall = time.perf_counter() - start
        result = evaluate(global_params, model_config, test)
        for k, shard in enumerate(shards):
            loss = dataset_loss(global_params, model_config, shard)
            ledger.add(
                RoundRecord(
                    round=r,
                    client=k,
                    upload_params=per_client_comm,
                    download_params=per_client_comm,
                    loss=loss,
                    wall_seconds=wall,
                )
            )
            metric_rows.append((r, k, "accuracy", result.accuracy))
            metric_rows.append((r, k, "macro_precision", result.macro_precision))

    digest = config_digest(config.to_dict())
    export_metrics_csv(out / "metrics.csv", metric_rows, config.seed, digest)
    ledger.to_csv(out / "ledger.csv", header_comment=f"seed={config.seed} config_sha256={digest}")
    ledger.to_json(out / "ledger.json")
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    save_params(ckpt / "global_model.bin", global_params, model_config)

    final = evaluate(global_params, model_config, test)
    accs = [final.accuracy] * len(shards)
    return {
        "final_accuracy": {str(k): final.accuracy for k in range(len(shards))},
        "final_macro_precision": {str(k): final.macro_precision for k in range(len(shards))},
        "mean_accuracy": cross_client_stats(accs)[0],
        "std_accuracy": cross_client_stats(accs)[1],
        "mean_macro_precision": final.macro_precision,
        "std_macro_precision": 0.0,
        "model": model_config.to_dict(),
        "ledger": ledger.summary(),
        "comm": comm_cost_report(ledger, config.suite().large) if ledger.rows else {},
    }


def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Run one preset end to end and write the artifact bundle; returns the summary."""
    started = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _json_write(out / "config.json", config.to_dict())
    train, test = _make_data(config)
    shard_idx = _shards(config, train)
    export_shard_manifest(out / "shards.json", shard_idx)

    if config.preset in ("agg", "noagg"):
        body = _dual_ligo_run(config, out, train, test, shard_idx)
    elif config.preset == "scratch":
        body = _fedavg_run(config, out, train, test, shard_idx, config.suite().large)
    elif config.preset == "fedavg_matched":
        suite = config.suite()
        target = operator_count(suite.intermediate, suite.large, config.operator.per_family).total
        matched = find_comm_matched_config(suite.large, target)
        body = _fedavg_run(config, out, train, test, shard_idx, matched)
    else:
        raise ValueError(f"unknown preset {config.preset!r}")

    summary = {
        "preset": config.preset,
        "seed": config.seed,
        "n_clients": config.n_clients,
        "beta": config.beta,
        "config_digest": config_digest(config.to_dict()),
        "counts": resource_report(config),
        **body,
    }
    _json_write(out / "summary.json", summary)
    _json_write(out / "timing.json", {"wall_seconds": time.perf_counter() - started})
    return summary


def reemit_reports(bundle_dir) -> dict:
    """Rebuild summary.json and final metrics from the checkpoints in a bundle."""
    from .config import config_from_dict

    out = Path(bundle_dir)
    config = config_from_dict(json.loads((out / "config.json").read_text()))
    _, test = _make_data(config)
    suite = config.suite()
    digest = config_digest(config.to_dict())
    ckpt = out / "checkpoints"
    if (ckpt / "global_model.bin").exists():
        params, model_config = load_params(ckpt / "global_model.bin")
        result = evaluate(params, model_config, test)
        summary = {
            "preset": config.preset,
            "seed": config.seed,
            "config_digest": digest,
            "mean_accuracy": result.accuracy,
            "mean_macro_precision": result.macro_precision,
        }
    else:
        clients = sorted(ckpt.glob("client_*"))
        results = {}
        inters = []
        for path in clients:
            state = load_client(path)
            inters.append(state.inter_params)
            large = apply(state.global_ligo, state.inter_params)
            results[str(state.id)] = evaluate(large, suite.large, test)
        accs = [r.accuracy for r in results.values()]
        mean_acc, std_acc = cross_client_stats(accs)
        sim, zero_flags = intermediate_similarity(inters)
        export_similarity_csv(out / "similarity.csv", sim, config.seed, digest)
        summary = {
            "preset": config.preset,
            "seed": config.seed,
            "config_digest": digest,
            "final_accuracy": {k: r.accuracy for k, r in results.items()},
            "mean_accuracy": mean_acc,
            "std_accuracy": std_acc,
            "similarity_zero_norm_clients": zero_flags,
        }
    _json_write(out / "summary.json", summary)
    return summary
