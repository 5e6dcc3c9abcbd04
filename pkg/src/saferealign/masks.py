"""Unsafe-delta masks from interference candidates and Fisher thresholds."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .deltas import MaskSet
from .fisher import GLOBAL, PER_TENSOR, SCOPES, ratio_count, topk_threshold
from .tensors import assert_compatible

NONCANDIDATES = "noncandidates"
ALL_PARAMS = "all"


def build_mask(candidates: Mapping[str, np.ndarray], f: Mapping[str, np.ndarray], rho: float, scope: str = PER_TENSOR) -> MaskSet:
    """Select candidates whose Fisher score reaches the top-``rho``% threshold of their scope.

    Ties at the threshold are all selected, so the selected count can exceed
    ``ceil(rho% * |candidates|)`` when scores repeat.
    """
    assert_compatible(candidates, f)
    thresholds = topk_threshold(f, candidates, rho, scope)
    out = {}
    for name in candidates:
        cand = np.asarray(candidates[name], bool)
        out[name] = cand & (np.asarray(f[name], np.float64) >= thresholds[name])
    return MaskSet(out, {"rho": rho, "scope": scope})


def extend_mask_more(
    m: Mapping[str, np.ndarray],
    candidates: Mapping[str, np.ndarray],
    f: Mapping[str, np.ndarray],
    extra: float,
    scope: str = PER_TENSOR,
    denominator: str = NONCANDIDATES,
) -> MaskSet:
    """Additionally mark the ``extra``% lowest-importance non-candidate positions.

    ``m`` must already contain every candidate. ``denominator`` picks what
    ``extra`` is a percentage of: the non-candidate positions (default) or
    all positions in the scope. Ties are broken by flat parameter index.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    if denominator not in (NONCANDIDATES, ALL_PARAMS):
        raise ValueError(f"denominator must be {NONCANDIDATES!r} or {ALL_PARAMS!r}")
    assert_compatible(m, candidates)
    assert_compatible(m, f)
    base = {n: np.asarray(m[n], bool) for n in m}
    for n in base:
        missing = np.asarray(candidates[n], bool) & ~base[n]
        if missing.any():
            raise ValueError(f"mask {n!r} omits {int(missing.sum())} candidate positions; extend_mask_more needs the full candidate mask")

    out = {n: base[n].copy() for n in base}
    groups = [[n] for n in base] if scope == PER_TENSOR else [list(base)]
    for names in groups:
        free = [~base[n].ravel() for n in names]
        scores = np.concatenate([np.asarray(f[n], np.float64).ravel()[fr] for n, fr in zip(names, free)] or [np.zeros(0)])
        pool = scores.size
        total = sum(base[n].size for n in names) if denominator == ALL_PARAMS else pool
        k = min(pool, ratio_count(extra, total))
        if k == 0:
            continue
        chosen = np.argsort(scores, kind="stable")[:k]
        pick = np.zeros(pool, bool)
        pick[chosen] = True
        offset = 0
        for n, fr in zip(names, free):
            flat = out[n].ravel()
            idx = np.flatnonzero(fr)
            flat[idx[pick[offset:offset + idx.size]]] = True
            out[n] = flat.reshape(base[n].shape)
            offset += idx.size
    return MaskSet(out, {"extra": extra, "scope": scope})


def random_mask(shapes: Mapping[str, tuple[int, ...]], rho: float, seed: int, scope: str = PER_TENSOR) -> MaskSet:
    """Uniformly random ``rho``% of positions; stands in for the identification step in ablations."""
    rng = np.random.default_rng(seed)
    names = sorted(shapes)
    out = {}
    if scope == GLOBAL:
        total = sum(int(np.prod(shapes[n])) for n in names)
        flat = np.zeros(total, bool)
        flat[rng.permutation(total)[:ratio_count(rho, total)]] = True
        offset = 0
        for n in names:
            size = int(np.prod(shapes[n]))
            out[n] = flat[offset:offset + size].reshape(shapes[n])
            offset += size
        return MaskSet(out, {"rho": rho, "scope": scope})
    for n in names:
        size = int(np.prod(shapes[n]))
        flat = np.zeros(size, bool)
        flat[rng.permutation(size)[:ratio_count(rho, size)]] = True
        out[n] = flat.reshape(shapes[n])
    return MaskSet(out, {"rho": rho, "scope": scope})


def all_candidates(shapes: Mapping[str, tuple[int, ...]]) -> MaskSet:
    return MaskSet({n: np.ones(s, bool) for n, s in shapes.items()})
