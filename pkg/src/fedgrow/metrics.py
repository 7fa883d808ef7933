"""Evaluation metrics and report files: accuracy/precision, cross-client
spread, and the cosine-similarity diagnostic over intermediate models."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabeledDataset
from .model import ModelConfig, ParamSet, forward


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    macro_precision: float
    per_class_precision: tuple[float, ...]


def evaluate(params: ParamSet, config: ModelConfig, dataset: LabeledDataset, batch_size: int = 64) -> EvalResult:
    """Top-1 accuracy plus macro precision; argmax ties go to the lowest class."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    preds = np.empty(len(dataset), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        logits = forward(params, config, dataset.sequences[start : start + batch_size])
        preds[start : start + len(logits.data)] = np.argmax(logits.data, axis=1)
    labels = dataset.labels
    accuracy = float(np.mean(preds == labels))
    per_class = []
    for c in range(dataset.class_count):
        predicted = preds == c
        # classes never predicted score zero precision
        per_class.append(float(np.mean(labels[predicted] == c)) if predicted.any() else 0.0)
    return EvalResult(
        accuracy=accuracy,
        macro_precision=float(np.mean(per_class)),
        per_class_precision=tuple(per_class),
    )


def cross_client_stats(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (divisor n) across clients."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no values")
    return float(arr.mean()), float(arr.std(ddof=0))


def intermediate_similarity(inter_params: Sequence[ParamSet]) -> tuple[np.ndarray, list[int]]:
    """Cosine similarity of fully flattened parameter vectors, one per client.

    Returns the symmetric matrix and the (flagged) client indices whose
    vectors have zero norm; those rows/columns are defined as 0.
    """
    if not inter_params:
        raise ValueError("no intermediate models")
    names = inter_params[0].names()
    for ps in inter_params[1:]:
        if ps.names() != names:
            raise ValueError("intermediate models are not homogeneous")
    vectors = [ps.to_vector() for ps in inter_params]
    norms = [float(np.linalg.norm(v)) for v in vectors]
    zero = [i for i, nrm in enumerate(norms) if nrm == 0.0]
    n = len(vectors)
    sim = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                value = 0.0
            elif i == j:
                value = 1.0
            else:
                value = float(np.dot(vectors[i], vectors[j]) / (norms[i] * norms[j]))
            sim[i, j] = sim[j, i] = value
    return sim, zero


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _provenance(seed: int, digest: str) -> str:
    return f"seed={seed} config_sha256={digest}"


def export_metrics_csv(path, rows: Sequence[tuple], seed: int, digest: str) -> None:
    """Rows of (round, client, metric, value) with a provenance header."""
    with Path(path).open("w", newline="") as fp:
        fp.write(f"# {_provenance(seed, digest)}\n")
        writer = csv.writer(fp)
        writer.writerow(["round", "client", "metric", "value"])
        for r, client, metric, value in rows:
            writer.writerow([r, client, metric, repr(float(value))])


def export_similarity_csv(path, matrix: np.ndarray, seed: int, digest: str) -> None:
    with Path(path).open("w", newline="") as fp:
        fp.write(f"# {_provenance(seed, digest)}\n")
        writer = csv.writer(fp)
        writer.writerow(["client"] + [str(j) for j in range(matrix.shape[1])])
        for i, row_values in enumerate(matrix):
            writer.writerow([i] + [repr(float(v)) for v in row_values])
