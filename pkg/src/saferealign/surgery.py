"""Layer-wise removal of masked deltas with inverse-Hessian compensation.

For a linear layer with calibration inputs ``X`` (``n x fan_in``) the
reconstruction Hessian is ``H = (2/n) X^T X + lambda I``. Each output row of
the delta matrix is an independent problem: masked entries are forced to
zero and the retained entries absorb the removal so that
``(delta - delta_hat)^T H (delta - delta_hat)`` is minimal.

Columns are visited in blocks, left to right. Within a block each masked
column is eliminated in column order with a rank-1 downdate of the inverse
Hessian; the compensation reaches every retained column of the row, and
the downdate is then propagated to the columns of later blocks.
"""

from __future__ import annotations

import logging
import re
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from . import kernels
from .refmodel import CalibRecord
from .tensors import ParamSet, assert_compatible

log = logging.getLogger(__name__)

SEQUENTIAL = "sequential"
INDEPENDENT = "independent"


class SingularHessianError(np.linalg.LinAlgError):
    pass


class MissingCalibrationError(ValueError):
    pass


@dataclass
class LayerHessian:
    layer_name: str
    H: np.ndarray = field(repr=False)
    damping: float
    n_samples: int

    @property
    def fan_in(self) -> int:
        return self.H.shape[0]

    @cached_property
    def inverse(self) -> np.ndarray:
        try:
            factor = scipy.linalg.cho_factor(self.H, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularHessianError(f"{self.layer_name}: Hessian is not positive definite ({exc})") from None
        hinv = scipy.linalg.cho_solve(factor, np.eye(self.fan_in))
        return (hinv + hinv.T) / 2

    def undamped(self) -> np.ndarray:
        return self.H - self.damping * np.eye(self.fan_in)


@dataclass
class SurgeryPlan:
    block_size: int = 128
    damping_fraction: float = 0.01
    layer_order: list[str] | None = None
    mode: str = SEQUENTIAL
    # 2-D tensors whose names match are treated like embeddings: removal only
    exclude: str = r"embed"

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.damping_fraction < 0:
            raise ValueError("damping_fraction must be >= 0")
        if self.mode not in (SEQUENTIAL, INDEPENDENT):
            raise ValueError(f"mode must be {SEQUENTIAL!r} or {INDEPENDENT!r}")


def build_hessian(calib: CalibRecord, damping_fraction: float = 0.01) -> LayerHessian:
    """``(2/n) X^T X`` plus ``damping_fraction * mean(diag)`` on the diagonal."""
    x = np.asarray(calib.activations, np.float64)
    n = x.shape[0]
    if n < 1:
        raise ValueError(f"{calib.layer_name}: need at least one calibration sample")
    h = (2.0 / n) * (x.T @ x)
    h = (h + h.T) / 2
    lam = damping_fraction * float(np.mean(np.diag(h)))
    h[np.diag_indices_from(h)] += lam
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        raise SingularHessianError(
            f"{calib.layer_name}: Hessian is singular (damping {lam:g}); use nonzero activations or damping"
        ) from None
    return LayerHessian(calib.layer_name, h, lam, n)


def _eliminate_row(w: np.ndarray, hinv: np.ndarray, masked_cols: np.ndarray, block_size: int, kern) -> None:
    d = w.shape[0]
    g = hinv.copy()
    for c0 in range(0, d, block_size):
        c1 = min(c0 + block_size, d)
        cols = masked_cols[(masked_cols >= c0) & (masked_cols < c1)]
        if cols.size == 0:
            continue
        g0_m = g[:, cols].copy()
        panel = np.ascontiguousarray(g[:, c0:c1])
        kern.eliminate_block(w, panel, c0, cols)
        g[:, c0:c1] = panel
        later = masked_cols[masked_cols >= c1]
        if later.size:
            # downdate only the columns later blocks will read
            factor = scipy.linalg.cho_factor(g0_m[cols], lower=True)
            g[:, later] -= g0_m @ scipy.linalg.cho_solve(factor, g0_m[later].T)


def recalibrate_layer(delta: np.ndarray, mask: np.ndarray, hess: LayerHessian, plan: SurgeryPlan | None = None, backend: str | None = None) -> np.ndarray:
    """Zero the masked deltas of a ``[fan_out, fan_in]`` matrix and compensate the rest.

    Returns a float64 matrix whose masked entries are exactly 0. Rows
    without masked entries are returned unchanged.
    """
    plan = plan or SurgeryPlan()
    delta = np.asarray(delta, np.float64)
    mask = np.asarray(mask)
    if delta.ndim != 2 or mask.shape != delta.shape:
        raise ValueError(f"delta {delta.shape} and mask {mask.shape} must be equal 2-D shapes")
    if mask.dtype != np.bool_:
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        mask = mask.astype(bool)
    if delta.shape[1] != hess.fan_in:
        raise ValueError(f"{hess.layer_name}: delta fan_in {delta.shape[1]} != Hessian size {hess.fan_in}")
    out = delta.copy()
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return out
    hinv = hess.inverse
    if plan.mode == INDEPENDENT:
        coef = np.where(mask[rows], delta[rows] / np.diag(hinv), 0.0)
        out[rows] = delta[rows] - coef @ hinv
    else:
        kern = kernels.get(backend)
        for r in rows:
            w = out[r].copy()
            _eliminate_row(w, hinv, np.flatnonzero(mask[r]).astype(np.int64), plan.block_size, kern)
            out[r] = w
    out[mask] = 0.0
    return out


def reconstruction_error(diff: np.ndarray, hess: LayerHessian) -> float:
    """Sum over rows of ``diff_r^T H0 diff_r``, with ``H0`` the undamped Hessian (``(2/n)||X d||^2``)."""
    h0 = hess.undamped()
    return float(np.einsum("ij,jk,ik->", diff, h0, diff))


def _layer_index(name: str) -> tuple:
    m = re.match(r"layer\.(\d+)\.(.*)", name)
    return (0, int(m.group(1)), m.group(2)) if m else (1, 0, name)


def run_surgery(
    sft: Mapping[str, np.ndarray],
    pre: Mapping[str, np.ndarray],
    mask: Mapping[str, np.ndarray],
    calib: Sequence[CalibRecord] | Mapping[str, LayerHessian | CalibRecord],
    plan: SurgeryPlan | None = None,
    recalibrate: bool = True,
    report: Callable[[dict], None] | None = None,
    sink: Callable[[str, np.ndarray], None] | None = None,
    backend: str | None = None,
) -> ParamSet | None:
    """Remove masked deltas from every tensor, compensating eligible linear layers.

    Eligible tensors are 2-D, not matched by ``plan.exclude``, and have
    calibration data. Everything else gets plain removal. Tensors are
    processed one at a time; with ``sink`` set, each finished tensor is
    handed over instead of being collected, and ``None`` is returned.
    """
    plan = plan or SurgeryPlan()
    assert_compatible(sft, pre)
    assert_compatible(sft, mask)
    if isinstance(calib, Mapping):
        calib_map = dict(calib)
    else:
        calib_map = {r.layer_name: r for r in calib}
    exclude = re.compile(plan.exclude) if plan.exclude else None
    order = list(plan.layer_order) if plan.layer_order else sorted(sft, key=_layer_index)
    if sorted(order) != sorted(sft):
        raise ValueError("plan.layer_order must list every tensor exactly once")

    def eligible(name, shape):
        return recalibrate and len(shape) == 2 and not (exclude and exclude.search(name))

    missing = [n for n in order if eligible(n, np.shape(sft[n])) and n not in calib_map and np.any(mask[n])]
    if missing:
        raise MissingCalibrationError(f"no calibration data for masked layers: {', '.join(missing)}")

    collected = {} if sink is None else None
    for name in order:
        t0 = time.perf_counter()
        s = np.asarray(sft[name])
        p = np.asarray(pre[name])
        m = np.asarray(mask[name], bool)
        entry = {"layer": name, "masked_count": int(m.sum()), "masked_fraction": float(m.mean()) if m.size else 0.0}
        if not m.any():
            out = s.copy()
        elif eligible(name, s.shape) and name in calib_map:
            hess = calib_map[name]
            if isinstance(hess, CalibRecord):
                hess = build_hessian(hess, plan.damping_fraction)
            delta = s.astype(np.float64) - p.astype(np.float64)
            new_delta = recalibrate_layer(delta, m, hess, plan, backend)
            out = (p.astype(np.float64) + new_delta).astype(s.dtype)
            touched = m.any(axis=1)
            out[~touched] = s[~touched]
            out[m] = p[m]
            naive = np.where(m, delta, 0.0)
            entry["recon_err_removed"] = reconstruction_error(naive, hess)
            entry["recon_err_recalibrated"] = reconstruction_error(delta - new_delta, hess)
        else:
            out = np.where(m, p, s)
        entry["seconds"] = time.perf_counter() - t0
        if report is not None:
            report(entry)
        log.debug("surgery %s: %d masked", name, entry["masked_count"])
        if sink is not None:
            sink(name, out)
        else:
            collected[name] = out
        del s, p, m, out
    if sink is not None:
        return None
    return ParamSet(collected, getattr(sft, "metadata", {}))
