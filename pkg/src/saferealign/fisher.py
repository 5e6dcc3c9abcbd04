"""Diagonal Fisher information as a per-parameter safety-importance score."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence

import numpy as np

from .refmodel import Batch, RefModelConfig, loss_and_grads
from .tensors import KINDS, ParamSet, assert_compatible

PER_TENSOR = "per-tensor"
GLOBAL = "global"
SCOPES = (PER_TENSOR, GLOBAL)


class FisherDiag(ParamSet):
    kind = "fisher"

    def __init__(self, entries=None, metadata=None):
        entries = {k: np.asarray(v, dtype=np.float64) for k, v in (entries or {}).items()}
        for k, v in entries.items():
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"fisher entry {k!r} must be finite and non-negative")
        super().__init__(entries, {**(metadata or {}), "kind": self.kind})

    @property
    def n_samples(self) -> int:
        return int(self.metadata.get("n_samples", 0))


KINDS["fisher"] = FisherDiag


def estimate_fisher(model: ParamSet, cfg: RefModelConfig, safety_batches: Sequence[Batch]) -> FisherDiag:
    """Average of squared per-sample gradients of ``log p(target | prompt)``.

    Each sample's gradient is squared on its own before averaging. Per-sample
    squares are sorted before summation so the result does not depend on the
    order of the samples.
    """
    if not safety_batches or sum(len(b) for b in safety_batches) == 0:
        raise ValueError("estimate_fisher needs at least one sample")
    data = Batch.concat(list(safety_batches))
    n = len(data)
    squares: dict[str, list[np.ndarray]] = {name: [] for name in model}
    for k in range(n):
        _, grads = loss_and_grads(model, cfg, data[k])
        for name, g in grads.items():
            squares[name].append(g * g)
    entries = {}
    for name, parts in squares.items():
        stacked = np.sort(np.stack(parts), axis=0)
        entries[name] = stacked.sum(axis=0) / n
    return FisherDiag(entries, {"n_samples": n})


def ratio_count(rho: float, n: int) -> int:
    """``ceil(rho% of n)``, tolerant of float noise in ``rho`` (e.g. 100/3 of 3 is 1)."""
    if not 0 <= rho <= 100:
        raise ValueError(f"ratio must lie in [0, 100], got {rho}")
    return min(n, max(0, math.ceil(rho * n / 100.0 - 1e-9)))


def _kth_largest(scores: np.ndarray, k: int) -> float:
    if k <= 0 or scores.size == 0:
        return math.inf
    return float(np.partition(scores, scores.size - k)[scores.size - k])


def topk_threshold(f: Mapping[str, np.ndarray], candidates: Mapping[str, np.ndarray], rho: float, scope: str = PER_TENSOR) -> dict[str, float]:
    """Score of the ``ceil(rho% * |candidates|)``-th largest candidate, per scope.

    ``+inf`` means nothing is selected (``rho == 0`` or no candidates).
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    assert_compatible(f, candidates)
    if scope == PER_TENSOR:
        out = {}
        for name in f:
            scores = np.asarray(f[name], np.float64)[np.asarray(candidates[name], bool)]
            out[name] = _kth_largest(scores, ratio_count(rho, scores.size))
        return out
    pooled = np.concatenate([np.asarray(f[n], np.float64)[np.asarray(candidates[n], bool)].ravel() for n in f] or [np.zeros(0)])
    s = _kth_largest(pooled, ratio_count(rho, pooled.size))
    return {name: s for name in f}
