"""Client state machine: pretrain small, train the local operator, then
iterate rounds on the shared one.

Phases advance strictly Fresh -> Pretrained -> LocalTrained -> InRounds ->
Done. The small model freezes after pretraining and the intermediate model
freezes once materialized; only the operator under training ever moves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .ligo import GrowthOperator, apply, init_operator, load_operator, operator_gradients, save_operator
from .model import ModelConfig, ParamSet, forward, init_params, load_params, save_params
from .serialize import read_entries, save_entries
from .tensor import Tape, backward, softmax_cross_entropy


class Phase(Enum):
    FRESH = "fresh"
    PRETRAINED = "pretrained"
    LOCAL_TRAINED = "local_trained"
    IN_ROUNDS = "in_rounds"
    DONE = "done"


_PHASE_ORDER = [Phase.FRESH, Phase.PRETRAINED, Phase.LOCAL_TRAINED, Phase.IN_ROUNDS, Phase.DONE]


class PhaseError(RuntimeError):
    """Operation called outside its allowed phase."""


@dataclass
class ClientState:
    id: int
    seed: int
    small_config: ModelConfig
    small_params: ParamSet
    shard: LabeledDataset
    local_ligo: GrowthOperator
    global_ligo: GrowthOperator
    inter_params: ParamSet | None = None
    phase: Phase = Phase.FRESH
    global_epochs: int = 0  # counts train_global_ligo epochs for rng derivation

    def _require(self, op: str, *allowed: Phase) -> None:
        if self.phase not in allowed:
            names = ", ".join(p.value for p in allowed)
            raise PhaseError(f"client {self.id}: {op} requires phase in ({names}), is {self.phase.value}")


def new_client(
    client_id: int,
    shard: LabeledDataset,
    small_config: ModelConfig,
    inter_config: ModelConfig,
    large_config: ModelConfig,
    seed: int,
    local_scheme: str = "identity_preserving",
    global_scheme: str = "identity_preserving",
    per_family: bool = False,
) -> ClientState:
    small = init_params(small_config, seed=_derive(seed, 1))
    local = init_operator(small_config, inter_config, _derive(seed, 2), local_scheme, per_family)
    glob = init_operator(inter_config, large_config, _derive(seed, 3), global_scheme, per_family)
    return ClientState(
        id=client_id,
        seed=seed,
        small_config=small_config,
        small_params=small,
        shard=shard,
        local_ligo=local,
        global_ligo=glob,
    )


def _derive(seed: int, stream: int, extra: int = 0) -> int:
    # Stable scalar sub-seed; keeps checkpoints free of generator state.
    return int(np.random.SeedSequence([seed, stream, extra]).generate_state(1)[0])


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def dataset_loss(params: ParamSet, config: ModelConfig, data: LabeledDataset, batch_size: int = 64) -> float:
    """Mean cross-entropy over the dataset with fixed parameters."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        seqs = data.sequences[start : start + batch_size]
        labs = data.labels[start : start + batch_size]
        loss = softmax_cross_entropy(forward(params, config, seqs), labs)
        total += float(loss.data) * len(labs)
    return total / len(data)


def train_model_params(
    params: ParamSet,
    config: ModelConfig,
    data: LabeledDataset,
    epochs: int,
    optimizer,
    batch_size: int,
    base_seed: int,
) -> tuple[ParamSet, list[float]]:
    """Plain epoch/minibatch training of a full ParamSet; returns new params."""
    losses = []
    for epoch in range(epochs):
        rng = np.random.default_rng([base_seed, epoch])
        epoch_loss = 0.0
        for idx in _minibatches(len(data), batch_size, rng):
            tape = Tape()
            leaves = {name: tape.parameter(arr, name=name) for name, arr in params.arrays().items()}
            logits = forward(ParamSet(leaves), config, data.sequences[idx])
            loss = softmax_cross_entropy(logits, data.labels[idx])
            grads = backward(tape, loss)
            params = ParamSet.from_arrays(
                optimizer.step(params.arrays(), {name: grads[t] for name, t in leaves.items()})
            )
            epoch_loss += float(loss.data) * len(idx)
        losses.append(epoch_loss / len(data))
    return params, losses


def pretrain_small(state: ClientState, epochs: int, optimizer, batch_size: int = 32) -> list[float]:
    """Train the small model on the shard; freezes it by advancing the phase."""
    state._require("pretrain_small", Phase.FRESH)
    if len(state.shard) == 0:
        raise ValueError("empty shard")
    state.small_params, losses = train_model_params(
        state.small_params,
        state.small_config,
        state.shard,
        epochs,
        optimizer,
        batch_size,
        base_seed=_derive(state.seed, 10),
    )
    state.phase = Phase.PRETRAINED
    return losses


def _train_operator(
    state: ClientState,
    op: GrowthOperator,
    src_params: ParamSet,
    epochs: int,
    optimizer,
    batch_size: int,
    rng_stream: int,
    epoch_offset: int = 0,
) -> tuple[GrowthOperator, list[float]]:
    losses = []
    for epoch in range(epochs):
        rng = np.random.default_rng(_derive(state.seed, rng_stream, epoch_offset + epoch))
        epoch_loss = 0.0
        for idx in _minibatches(len(state.shard), batch_size, rng):
            tape = Tape()
            generated = apply(op, src_params, tape)
            logits = forward(generated, op.dst, state.shard.sequences[idx])
            loss = softmax_cross_entropy(logits, state.shard.labels[idx])
            grads = operator_gradients(tape, loss, op)
            op = op.with_matrices(optimizer.step(op.matrices(), grads))
            epoch_loss += float(loss.data) * len(idx)
        losses.append(epoch_loss / len(state.shard))
    return op, losses


def train_local_ligo(state: ClientState, epochs: int, optimizer, batch_size: int = 32) -> list[float]:
    """Fit the local operator on the shard, then materialize the intermediate model."""
    state._require("train_local_ligo", Phase.PRETRAINED)
    if state.local_ligo.src != state.small_config:
        raise ValueError("local operator source config does not match the small model")
    op, losses = _train_operator(
        state, state.local_ligo, state.small_params, epochs, optimizer, batch_size, rng_stream=20
    )
    state.local_ligo = op
    state.inter_params = apply(op, state.small_params)
    state.phase = Phase.LOCAL_TRAINED
    return losses


def train_global_ligo(state: ClientState, epochs: int, optimizer, batch_size: int = 32) -> list[float]:
    """Fit the shared operator on the shard against the frozen intermediate model."""
    state._require("train_global_ligo", Phase.LOCAL_TRAINED, Phase.IN_ROUNDS)
    if state.inter_params is None:
        raise ValueError("intermediate model absent")
    op, losses = _train_operator(
        state,
        state.global_ligo,
        state.inter_params,
        epochs,
        optimizer,
        batch_size,
        rng_stream=30,
        epoch_offset=state.global_epochs,
    )
    state.global_ligo = op
    state.global_epochs += epochs
    state.phase = Phase.IN_ROUNDS
    return losses


def install_aggregate(state: ClientState, aggregated: GrowthOperator) -> None:
    """Replace the shared operator wholesale with the server's aggregate."""
    state._require("install_aggregate", Phase.IN_ROUNDS)
    current = state.global_ligo
    if aggregated.src != current.src or aggregated.dst != current.dst:
        raise ValueError("aggregated operator configs do not match")
    if aggregated.per_family != current.per_family:
        raise ValueError("aggregated operator width-map structure does not match")
    for name, arr in aggregated.matrices().items():
        if arr.shape != current.matrices()[name].shape:
            raise ValueError(f"aggregated matrix {name!r} has shape {arr.shape}")
    state.global_ligo = aggregated


def finalize_large(state: ClientState) -> ParamSet:
    """Materialize the large model from the shared operator; ends the protocol."""
    state._require("finalize_large", Phase.IN_ROUNDS)
    large = apply(state.global_ligo, state.inter_params)
    state.phase = Phase.DONE
    return large


# ---------------------------------------------------------------------------
# checkpoint bundle (JSON state + binary tensors)


def save_client(state: ClientState, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "id": state.id,
        "seed": state.seed,
        "phase": state.phase.value,
        "global_epochs": state.global_epochs,
        "small_config": state.small_config.to_dict(),
        "has_inter": state.inter_params is not None,
    }
    (d / "state.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    save_params(d / "small.bin", state.small_params, state.small_config)
    save_operator(d / "local_ligo.bin", state.local_ligo)
    save_operator(d / "global_ligo.bin", state.global_ligo)
    save_entries(
        d / "shard.bin",
        {"sequences": state.shard.sequences.astype(np.float64), "labels": state.shard.labels.astype(np.float64)},
        {"kind": "shard", "class_count": state.shard.class_count},
    )
    if state.inter_params is not None:
        save_params(d / "inter.bin", state.inter_params, state.local_ligo.dst)


def load_client(directory) -> ClientState:
    d = Path(directory)
    meta = json.loads((d / "state.json").read_text())
    small_params, small_config = load_params(d / "small.bin")
    entries, shard_meta = read_entries(d / "shard.bin")
    shard = LabeledDataset(
        entries["sequences"].astype(np.int64),
        entries["labels"].astype(np.int64),
        int(shard_meta["class_count"]),
    )
    state = ClientState(
        id=int(meta["id"]),
        seed=int(meta["seed"]),
        small_config=small_config,
        small_params=small_params,
        shard=shard,
        local_ligo=load_operator(d / "local_ligo.bin"),
        global_ligo=load_operator(d / "global_ligo.bin"),
        phase=Phase(meta["phase"]),
        global_epochs=int(meta["global_epochs"]),
    )
    if meta["has_inter"]:
        state.inter_params = load_params(d / "inter.bin")[0]
    return state
