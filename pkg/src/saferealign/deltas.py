"""Delta-parameter arithmetic, interference candidates, removal and the DARE/RESTA baselines."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .tensors import KINDS, ParamSet, assert_compatible


class DeltaSet(ParamSet):
    """Per-tensor differences between two checkpoints.

    Deltas are held in float64: the difference of two float32 values is
    exact in float64 for all but extreme exponent gaps, so
    ``before + delta`` reproduces ``after`` bit-for-bit once cast back.
    """

    kind = "delta"

    def __init__(self, entries=None, metadata=None):
        entries = {k: np.asarray(v, dtype=np.float64) for k, v in (entries or {}).items()}
        super().__init__(entries, {**(metadata or {}), "kind": self.kind})


class MaskSet(ParamSet):
    """Per-tensor boolean masks; True marks a delta entry selected for removal."""

    kind = "mask"

    def __init__(self, entries=None, metadata=None):
        checked = {}
        for name, v in (entries or {}).items():
            arr = np.asarray(v)
            if arr.dtype != np.bool_:
                if not np.all((arr == 0) | (arr == 1)):
                    raise ValueError(f"mask {name!r} has values outside {{0, 1}}")
                arr = arr.astype(bool)
            checked[name] = arr
        super().__init__(checked, {**(metadata or {}), "kind": self.kind})

    def count(self) -> int:
        return int(sum(int(m.sum()) for m in self.values()))

    def masked_fraction(self, name: str | None = None) -> float:
        if name is not None:
            return float(self[name].mean()) if self[name].size else 0.0
        total = self.numel()
        return self.count() / total if total else 0.0

    def issubset(self, other: "MaskSet") -> bool:
        return all(not np.any(self[k] & ~other[k]) for k in self)


KINDS["delta"] = DeltaSet
KINDS["mask"] = MaskSet


def compute_delta(after: Mapping[str, np.ndarray], before: Mapping[str, np.ndarray]) -> DeltaSet:
    """``after - before`` per tensor, in float64."""
    assert_compatible(after, before)
    return DeltaSet({n: np.asarray(after[n], np.float64) - np.asarray(before[n], np.float64) for n in after})


def safety_vector(aligned: Mapping[str, np.ndarray], unaligned: Mapping[str, np.ndarray]) -> DeltaSet:
    """Direction that moves an unaligned model back to its aligned counterpart."""
    return compute_delta(aligned, unaligned)


def interference_candidates(d_sft: Mapping[str, np.ndarray], d_safe: Mapping[str, np.ndarray]) -> MaskSet:
    """Mark entries whose fine-tuning delta does not agree in sign with the safety vector.

    The test is ``d_sft * d_safe <= 0``, so zero deltas on either side count
    as candidates.
    """
    assert_compatible(d_sft, d_safe)
    out = {}
    for n in d_sft:
        a = np.asarray(d_sft[n], np.float64)
        b = np.asarray(d_safe[n], np.float64)
        # sign product avoids underflow of a*b to 0 for tiny same-sign values
        out[n] = np.sign(a) * np.sign(b) <= 0
    return MaskSet(out)


def remove_deltas(d_sft: Mapping[str, np.ndarray], pre: ParamSet, m: Mapping[str, np.ndarray]) -> ParamSet:
    """Revert masked deltas: ``pre + (1 - m) * d_sft``, written back in ``pre``'s dtype."""
    assert_compatible(d_sft, pre)
    assert_compatible(m, pre)
    mask = m if isinstance(m, MaskSet) else MaskSet(m)
    out = {}
    for n in pre:
        base = pre[n]
        kept = np.where(mask[n], 0.0, np.asarray(d_sft[n], np.float64))
        out[n] = (base.astype(np.float64) + kept).astype(base.dtype)
    return ParamSet(out, pre.metadata)


def dare_transform(d_sft: Mapping[str, np.ndarray], drop_rate: float, seed: int) -> DeltaSet:
    """Drop each delta entry with probability ``drop_rate`` and rescale survivors by ``1/(1-drop_rate)``."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    if drop_rate == 0.0:
        return DeltaSet(d_sft)
    rng = np.random.default_rng(seed)
    scale = 1.0 / (1.0 - drop_rate)
    out = {}
    for n in sorted(d_sft):
        d = np.asarray(d_sft[n], np.float64)
        keep = rng.random(d.shape) >= drop_rate
        out[n] = np.where(keep, d * scale, 0.0)
    return DeltaSet(out, {"dare_drop_rate": drop_rate, "dare_seed": seed})


def apply_delta(base: ParamSet, delta: Mapping[str, np.ndarray], scale: float = 1.0) -> ParamSet:
    """``base + scale * delta`` computed in float64 and cast back to ``base``'s dtypes."""
    assert_compatible(base, delta)
    out = {}
    for n in base:
        b = base[n]
        out[n] = (b.astype(np.float64) + scale * np.asarray(delta[n], np.float64)).astype(b.dtype)
    return ParamSet(out, base.metadata)


def resta_merge(sft: ParamSet, d_safe: Mapping[str, np.ndarray], scale: float) -> ParamSet:
    """Add a scaled safety vector to every parameter of a fine-tuned model."""
    if scale < 0:
        raise ValueError(f"scale must be non-negative, got {scale}")
    return apply_delta(sft, d_safe, scale)
