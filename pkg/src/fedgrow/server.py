"""Parameter-server aggregation, round orchestration, and comm accounting.

Rounds are synchronous with full participation. Every exchange goes through
the binary codec, so swapping in a real transport later only has to honor
the same payload boundary.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .client import ClientState, dataset_loss, install_aggregate, train_global_ligo
from .ligo import (
    GrowthOperator,
    apply,
    count_operator_params,
    operator_from_bytes,
    operator_to_bytes,
)
from .model import ModelConfig, ParamSet, count_params


class RoundError(RuntimeError):
    """A client failed inside a round; the round was aborted before aggregation."""


@dataclass(frozen=True)
class RoundRecord:
    round: int
    client: int
    upload_params: int
    download_params: int
    loss: float
    wall_seconds: float


@dataclass
class RoundLedger:
    rows: list[RoundRecord] = field(default_factory=list)

    def add(self, record: RoundRecord) -> None:
        self.rows.append(record)

    def num_rounds(self) -> int:
        return max((r.round for r in self.rows), default=0)

    def total_upload(self) -> int:
        return sum(r.upload_params for r in self.rows)

    def total_download(self) -> int:
        return sum(r.download_params for r in self.rows)

    def total_comm(self) -> int:
        return self.total_upload() + self.total_download()

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with Path(path).open("w", newline="") as fp:
            if header_comment:
                fp.write(f"# {header_comment}\n")
            writer = csv.writer(fp)
            writer.writerow(["round", "client", "upload_params", "download_params", "loss"])
            for r in self.rows:
                writer.writerow([r.round, r.client, r.upload_params, r.download_params, repr(r.loss)])

    def summary(self) -> dict:
        return {
            "rounds": self.num_rounds(),
            "clients": len({r.client for r in self.rows}),
            "total_upload_params": self.total_upload(),
            "total_download_params": self.total_download(),
            "total_comm_params": self.total_comm(),
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), sort_keys=True, indent=2) + "\n")


def aggregate(operators: Sequence[GrowthOperator], weights: Sequence[float]) -> GrowthOperator:
    """Element-wise average of operators weighted by dataset sizes."""
    if not operators:
        raise ValueError("nothing to aggregate")
    if len(operators) != len(weights):
        raise ValueError(f"{len(operators)} operators but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if (w <= 0).any():
        raise ValueError(f"weights must be positive, got {list(weights)}")
    w = w / w.sum()
    first = operators[0]
    for op in operators[1:]:
        if op.src != first.src or op.dst != first.dst or op.per_family != first.per_family:
            raise ValueError("operators are not shape-compatible")
    names = first.matrices().keys()
    merged = {}
    for name in names:
        stack = [op.matrices()[name] for op in operators]
        for arr in stack[1:]:
            if arr.shape != stack[0].shape:
                raise ValueError(f"matrix {name!r} shapes disagree")
        merged[name] = sum(wi * arr for wi, arr in zip(w, stack))
    return first.with_matrices(merged)


def average_paramsets(sets: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    """Weighted average of homogeneous ParamSets (full-model federated averaging)."""
    if not sets:
        raise ValueError("nothing to average")
    w = np.asarray(weights, dtype=np.float64)
    if len(sets) != len(w) or (w <= 0).any():
        raise ValueError("need one positive weight per param set")
    w = w / w.sum()
    names = sets[0].names()
    for ps in sets[1:]:
        if ps.names() != names:
            raise ValueError("param sets are not homogeneous")
    return ParamSet.from_arrays(
        {name: sum(wi * ps[name].data for wi, ps in zip(w, sets)) for name in names}
    )


def run_rounds(
    clients: Sequence[ClientState],
    rounds: int,
    e_g: int,
    optimizer_factory: Callable[[], object],
    batch_size: int = 32,
    aggregate_updates: bool = True,
    on_round: Callable[[int, Sequence[ClientState]], None] | None = None,
) -> RoundLedger:
    """Run R global rounds: train, collect, aggregate, broadcast.

    aggregate_updates=False keeps each client's own operator (the
    no-aggregation baseline); uploads and downloads are then zero. Client
    order is fixed by id and any client failure aborts the round before
    aggregation.
    """
    clients = sorted(clients, key=lambda c: c.id)
    ids = [c.id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids: {ids}")
    ledger = RoundLedger()
    for r in range(1, rounds + 1):
        start = time.perf_counter()
        for c in clients:
            try:
                train_global_ligo(c, e_g, optimizer_factory(), batch_size)
            except Exception as exc:
                raise RoundError(f"round {r}: client {c.id} failed: {exc}") from exc
        if aggregate_updates:
            payloads = [operator_to_bytes(c.global_ligo) for c in clients]
            uploads = [operator_from_bytes(p) for p in payloads]
            merged = aggregate(uploads, [len(c.shard) for c in clients])
            broadcast = operator_to_bytes(merged)
            for c in clients:
                install_aggregate(c, operator_from_bytes(broadcast))
            per_client = [count_operator_params(c.global_ligo).total for c in clients]
        else:
            per_client = [0 for _ in clients]
        wall = time.perf_counter() - start
        for c, comm in zip(clients, per_client):
            loss = dataset_loss(apply(c.global_ligo, c.inter_params), c.global_ligo.dst, c.shard)
            ledger.add(
                RoundRecord(
                    round=r,
                    client=c.id,
                    upload_params=comm,
                    download_params=comm,
                    loss=loss,
                    wall_seconds=wall,
                )
            )
        if on_round is not None:
            on_round(r, clients)
    return ledger


def comm_cost_report(ledger: RoundLedger, large_config: ModelConfig) -> dict:
    """Compare per-round parameter transfer against full-model averaging."""
    if not ledger.rows:
        raise ValueError("ledger is empty")
    rounds = ledger.num_rounds()
    clients = len({r.client for r in ledger.rows})
    per_round_client = max(r.upload_params + r.download_params for r in ledger.rows)
    scratch_per_round_client = 2 * count_params(large_config).total
    total = ledger.total_comm()
    total_scratch = rounds * clients * scratch_per_round_client
    return {
        "rounds": rounds,
        "clients": clients,
        "per_round_per_client": per_round_client,
        "scratch_per_round_per_client": scratch_per_round_client,
        "total_comm_params": total,
        "total_scratch_comm_params": total_scratch,
        "comm_reduction": 1.0 - per_round_client / scratch_per_round_client,
    }
