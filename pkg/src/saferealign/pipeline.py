"""End-to-end realignment runs, ratio sweeps and the synthetic harmful fine-tuning scenario.

The safety metric throughout is the refusal rate of the reference model on
held-out synthetic harmful prompts. It is a desk-scale proxy, not a judged
safety score, and every report says so.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import deltas, masks, refmodel
from .deltas import DeltaSet, MaskSet
from .fisher import PER_TENSOR, SCOPES, FisherDiag, estimate_fisher
from .refmodel import Batch, RefModelConfig
from .surgery import SEQUENTIAL, LayerHessian, SurgeryPlan, build_hessian, run_surgery
from .tensors import ParamSet, assert_compatible, load_checkpoint, save_checkpoint
from .world import SafetyWorld

log = logging.getLogger(__name__)

PROXY_NOTE = (
    "safety metric is the refusal rate on held-out synthetic harmful prompts of the reference model; "
    "it is a desk-scale proxy, not a judged safety score"
)

SFT = "SFT"
IRR = "IRR"
NO_RECAL = "IRR w/o Recal"
NO_SI = "IRR w/o SI"
NO_ID = "IRR w/o ID"
DARE_IRR = "DARE+IRR"
RESTA = "RESTA"
DARE = "DARE"
IRR_MORE = "IRR_more"
METHODS = (IRR, NO_RECAL, NO_SI, NO_ID, DARE_IRR, RESTA, DARE)
COLUMNS = ("method", "rho", "extra", "scale", "drop_rate", "refusal_rate", "task_accuracy", "masked_fraction")

DEFAULT_RHOS = [10.0 * k for k in range(1, 11)]
DEFAULT_RESTA_SCALES = [0.1 * k for k in range(1, 11)]


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class StructureError(AssertionError):
    """A surgery output broke the masked/untouched exactness guarantees."""


@dataclass
class RunConfig:
    pre: str | None = None
    sft: str | None = None
    align: str | None = None
    unalign: str | None = None
    safety_vector: str | None = None
    fisher: str | None = None
    safety_data: str | None = None
    calib: str | None = None
    calib_data: str | None = None
    safety_eval: str | None = None
    task_eval: str | None = None
    refuse_token: int | None = None
    rho: list[float] = field(default_factory=lambda: list(DEFAULT_RHOS))
    block_size: int = 128
    damping: float = 0.01
    scope: str = PER_TENSOR
    calib_samples: int = 128
    seed: int = 0
    out: str = "out"
    recalibrate: bool = True
    mode: str = SEQUENTIAL
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    resta_scales: list[float] = field(default_factory=lambda: list(DEFAULT_RESTA_SCALES))
    dare_rate: float = 0.5

    @classmethod
    def from_file(cls, path: str, **overrides) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        base = os.path.dirname(os.path.abspath(path))
        for key in _PATH_KEYS + ("out",):
            if data.get(key) and not os.path.isabs(data[key]):
                data[key] = os.path.join(base, data[key])
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self, need: Sequence[str] = ()) -> None:
        if not self.rho:
            raise ValueError("rho list is empty")
        for r in self.rho:
            if not 0 <= r <= 100:
                raise ValueError(f"rho {r} outside [0, 100]")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")
        unknown = set(self.methods) - set(METHODS) - {IRR_MORE}
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        SurgeryPlan(self.block_size, self.damping, mode=self.mode)
        for key in need:
            if not getattr(self, key):
                raise ValueError(f"config needs {key!r}")
        for key in _PATH_KEYS:
            path = getattr(self, key)
            if path and not os.path.exists(path):
                raise FileNotFoundError(f"{key}: {path} does not exist")


_PATH_KEYS = ("pre", "sft", "align", "unalign", "safety_vector", "fisher", "safety_data", "calib", "calib_data", "safety_eval", "task_eval")


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# identification and surgery on in-memory checkpoints


def irr_mask(d_sft: DeltaSet, d_safe: DeltaSet, fisher: FisherDiag, rho: float, scope: str = PER_TENSOR) -> MaskSet:
    candidates = deltas.interference_candidates(d_sft, d_safe)
    return masks.build_mask(candidates, fisher, rho, scope)


def verify_surgery(sft: Mapping, pre: Mapping, mask: Mapping, out: Mapping) -> None:
    """Masked coordinates must equal ``pre`` and rows without masked entries must equal ``sft``, bitwise."""
    for name in sft:
        m = np.asarray(mask[name], bool)
        o, p, s = np.asarray(out[name]), np.asarray(pre[name]), np.asarray(sft[name])
        if o.dtype != s.dtype:
            raise StructureError(f"{name}: dtype changed from {s.dtype} to {o.dtype}")
        if not np.array_equal(o[m], p[m]):
            raise StructureError(f"{name}: masked coordinates differ from the pre-trained values")
        untouched = ~m.any(axis=1) if m.ndim == 2 else ~m
        if not np.array_equal(o[untouched], s[untouched]):
            raise StructureError(f"{name}: untouched coordinates differ from the fine-tuned values")


@dataclass
class SweepInputs:
    pre: ParamSet
    sft: ParamSet
    d_safe: DeltaSet
    fisher: FisherDiag
    hessians: dict[str, LayerHessian]
    cfg: RefModelConfig
    safety_eval: Batch
    task_eval: Batch
    refuse_token: int

    def evaluate(self, model: Mapping) -> tuple[float, float]:
        return refmodel.eval_suite(model, self.cfg, self.safety_eval, self.task_eval, self.refuse_token)


def _row(method, refusal, accuracy, masked_fraction, rho=None, extra=None, scale=None, drop_rate=None) -> dict:
    return {
        "method": method,
        "rho": rho,
        "extra": extra,
        "scale": scale,
        "drop_rate": drop_rate,
        "refusal_rate": refusal,
        "task_accuracy": accuracy,
        "masked_fraction": masked_fraction,
    }


def run_sweep(
    inputs: SweepInputs,
    rhos: Sequence[float],
    methods: Sequence[str] = METHODS,
    scope: str = PER_TENSOR,
    plan: SurgeryPlan | None = None,
    seed: int = 0,
    resta_scales: Sequence[float] = DEFAULT_RESTA_SCALES,
    dare_rate: float = 0.5,
    timings: list | None = None,
) -> list[dict]:
    """Evaluate every method over the ratio grid and return one row per point."""
    plan = plan or SurgeryPlan()
    pre, sft = inputs.pre, inputs.sft
    d_sft = deltas.compute_delta(sft, pre)
    candidates = deltas.interference_candidates(d_sft, inputs.d_safe)
    everything = masks.all_candidates(pre.shapes())
    total = pre.numel()
    rows = [_row(SFT, *inputs.evaluate(sft), 0.0)]

    def surgery(model, mask, recal=True):
        t0 = time.perf_counter()
        out = run_surgery(model, pre, mask, inputs.hessians, plan, recalibrate=recal)
        verify_surgery(model, pre, mask, out)
        if timings is not None:
            timings.append(time.perf_counter() - t0)
        return out

    dare_sft = dare_cands = None
    if DARE_IRR in methods:
        d_dare = deltas.dare_transform(d_sft, dare_rate, seed)
        dare_sft = deltas.apply_delta(pre, d_dare)
        dare_cands = deltas.interference_candidates(deltas.compute_delta(dare_sft, pre), inputs.d_safe)

    for rho in rhos:
        rho = float(rho)
        mask = None
        if IRR in methods or NO_RECAL in methods:
            mask = masks.build_mask(candidates, inputs.fisher, rho, scope)
        if IRR in methods:
            rows.append(_row(IRR, *inputs.evaluate(surgery(sft, mask)), mask.masked_fraction(), rho=rho))
        if NO_RECAL in methods:
            rows.append(_row(NO_RECAL, *inputs.evaluate(surgery(sft, mask, recal=False)), mask.masked_fraction(), rho=rho))
        if NO_SI in methods:
            m = masks.build_mask(everything, inputs.fisher, rho, scope)
            rows.append(_row(NO_SI, *inputs.evaluate(surgery(sft, m)), m.masked_fraction(), rho=rho))
        if NO_ID in methods:
            m = masks.random_mask(pre.shapes(), rho, seed, scope)
            rows.append(_row(NO_ID, *inputs.evaluate(surgery(sft, m)), m.masked_fraction(), rho=rho))
        if DARE_IRR in methods:
            m = masks.build_mask(dare_cands, inputs.fisher, rho, scope)
            rows.append(_row(DARE_IRR, *inputs.evaluate(surgery(dare_sft, m)), m.masked_fraction(), rho=rho, drop_rate=dare_rate))
        if DARE in methods and rho < 100:
            p = rho / 100.0
            d_dare = deltas.dare_transform(d_sft, p, seed)
            dropped = sum(int(np.count_nonzero((d_dare[n] == 0) & (d_sft[n] != 0))) for n in d_sft)
            rows.append(_row(DARE, *inputs.evaluate(deltas.apply_delta(pre, d_dare)), dropped / total, rho=rho, drop_rate=p))
        if IRR_MORE in methods:
            m = masks.extend_mask_more(masks.build_mask(candidates, inputs.fisher, 100.0, scope), candidates, inputs.fisher, rho, scope)
            rows.append(_row(IRR_MORE, *inputs.evaluate(surgery(sft, m)), m.masked_fraction(), rho=100.0, extra=rho))
    if RESTA in methods:
        for scale in resta_scales:
            merged = deltas.resta_merge(sft, inputs.d_safe, float(scale))
            rows.append(_row(RESTA, *inputs.evaluate(merged), 0.0, scale=float(scale)))
    return rows


def tradeoff_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k])) for k in COLUMNS})
    return buf.getvalue()


def write_tradeoff(rows: Sequence[dict], out_dir: str, stem: str = "tradeoff") -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(tradeoff_csv(rows))
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"note": PROXY_NOTE, "rows": list(rows)}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path


def best_task_at(rows: Sequence[dict], method: str, min_refusal: float) -> float | None:
    """Highest task accuracy ``method`` reaches among rows with refusal rate >= ``min_refusal``."""
    accs = [r["task_accuracy"] for r in rows if r["method"] == method and r["refusal_rate"] >= min_refusal]
    return max(accs) if accs else None


# ---------------------------------------------------------------------------
# file-based runs


class _Outputs:
    """Tracks files written by a run so a failed run leaves nothing behind."""

    def __init__(self, out_dir: str):
        self.dir = out_dir
        self.created_dir = not os.path.isdir(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        self.paths: list[str] = []

    def path(self, name: str) -> str:
        p = os.path.join(self.dir, name)
        self.paths.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.paths:
            for q in (p, p + ".tmp"):
                if os.path.exists(q):
                    os.unlink(q)
        if self.created_dir and os.path.isdir(self.dir) and not os.listdir(self.dir):
            os.rmdir(self.dir)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _load_inputs(config: RunConfig) -> dict:
    pre = load_checkpoint(config.pre, ParamSet)
    sft = load_checkpoint(config.sft, ParamSet)
    assert_compatible(sft, pre)
    return {"pre": pre, "sft": sft}


def _safety_vector(config: RunConfig, pre: ParamSet) -> DeltaSet:
    if config.safety_vector:
        return load_checkpoint(config.safety_vector, DeltaSet)
    if not config.unalign:
        raise ValueError("need either safety_vector or unalign")
    aligned = load_checkpoint(config.align or config.pre, ParamSet)
    return deltas.safety_vector(aligned, load_checkpoint(config.unalign, ParamSet))


def _model_config(model: ParamSet) -> RefModelConfig:
    return refmodel.config_of(model)


def _fisher(config: RunConfig, pre: ParamSet) -> FisherDiag:
    if config.fisher:
        return load_checkpoint(config.fisher, FisherDiag)
    if not config.safety_data:
        raise ValueError("need either fisher or safety_data")
    aligned = load_checkpoint(config.align or config.pre, ParamSet)
    return estimate_fisher(aligned, _model_config(aligned), [refmodel.read_dataset(config.safety_data)])


def _hessians(config: RunConfig, sft: ParamSet) -> dict[str, LayerHessian]:
    if config.calib:
        records = load_checkpoint(config.calib, refmodel.CalibSet).records()
    elif config.calib_data:
        data = refmodel.read_dataset(config.calib_data)
        data = data[: config.calib_samples]
        records = refmodel.capture_calibration(sft, _model_config(sft), data)
    else:
        return {}
    return {r.layer_name: build_hessian(r, config.damping) for r in records}


def _refuse_token(config: RunConfig, model: ParamSet) -> int:
    if config.refuse_token is not None:
        return int(config.refuse_token)
    if "refuse_token" in model.metadata:
        return int(model.metadata["refuse_token"])
    raise ValueError("refuse_token not given and not recorded in the checkpoint metadata")


def _input_hashes(config: RunConfig) -> dict[str, str]:
    return {k: file_sha256(getattr(config, k)) for k in _PATH_KEYS if getattr(config, k)}


def realign(config: RunConfig) -> dict:
    """Identify, remove and recalibrate at one ratio; writes the realigned checkpoint and reports."""
    config.validate(need=("pre", "sft"))
    if len(config.rho) != 1:
        raise ValueError("realign takes exactly one rho value")
    rho = float(config.rho[0])
    outputs = _Outputs(config.out)
    timings: dict[str, float] = {}
    try:
        t = time.perf_counter()
        loaded = _stage("load", _load_inputs, config)
        pre, sft = loaded["pre"], loaded["sft"]
        timings["load"] = time.perf_counter() - t

        t = time.perf_counter()
        d_safe = _stage("safety-vector", _safety_vector, config, pre)
        _stage("safety-vector", assert_compatible, d_safe, pre)
        timings["safety_vector"] = time.perf_counter() - t

        t = time.perf_counter()
        fisher = _stage("fisher", _fisher, config, pre)
        _stage("fisher", assert_compatible, fisher, pre)
        timings["fisher"] = time.perf_counter() - t

        t = time.perf_counter()
        d_sft = _stage("identify", deltas.compute_delta, sft, pre)
        mask = _stage("identify", irr_mask, d_sft, d_safe, fisher, rho, config.scope)
        timings["identify"] = time.perf_counter() - t

        t = time.perf_counter()
        hessians = _stage("calibrate", _hessians, config, sft) if config.recalibrate else {}
        timings["calibrate"] = time.perf_counter() - t

        t = time.perf_counter()
        layer_reports: list[dict] = []
        plan = SurgeryPlan(config.block_size, config.damping, mode=config.mode)
        out = _stage("surgery", run_surgery, sft, pre, mask, hessians, plan, config.recalibrate, layer_reports.append)
        _stage("surgery", verify_surgery, sft, pre, mask, out)
        timings["surgery"] = time.perf_counter() - t

        ckpt = outputs.path("realigned.safetensors")
        save_checkpoint(out.with_metadata(realign_rho=rho), ckpt)
        save_checkpoint(mask.with_metadata(rho=rho, scope=config.scope), outputs.path("mask.safetensors"))
        with open(outputs.path("surgery.jsonl"), "w", encoding="utf-8") as fh:
            for entry in layer_reports:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        report = {
            "config": config.to_dict(),
            "input_sha256": _input_hashes(config),
            "output_sha256": file_sha256(ckpt),
            "rho": rho,
            "masked_fraction": mask.masked_fraction(),
            "masked_fraction_per_layer": {n: mask.masked_fraction(n) for n in mask},
            "timings_seconds": timings,
            "note": PROXY_NOTE,
        }
        if "refmodel_config" in sft.metadata and config.safety_eval and config.task_eval:
            cfg = _model_config(sft)
            tok = _refuse_token(config, sft)
            s, tset = refmodel.read_dataset(config.safety_eval), refmodel.read_dataset(config.task_eval)
            report["eval"] = {
                "sft": dict(zip(("refusal_rate", "task_accuracy"), refmodel.eval_suite(sft, cfg, s, tset, tok))),
                "realigned": dict(zip(("refusal_rate", "task_accuracy"), refmodel.eval_suite(out, cfg, s, tset, tok))),
            }
        with open(outputs.path("report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return report
    except BaseException:
        outputs.cleanup()
        raise


def prepare_sweep(config: RunConfig) -> SweepInputs:
    config.validate(need=("pre", "sft", "safety_eval", "task_eval"))
    loaded = _stage("load", _load_inputs, config)
    pre, sft = loaded["pre"], loaded["sft"]
    d_safe = _stage("safety-vector", _safety_vector, config, pre)
    fisher = _stage("fisher", _fisher, config, pre)
    hessians = _stage("calibrate", _hessians, config, sft)
    cfg = _stage("load", _model_config, sft)
    return SweepInputs(
        pre=pre,
        sft=sft,
        d_safe=d_safe,
        fisher=fisher,
        hessians=hessians,
        cfg=cfg,
        safety_eval=refmodel.read_dataset(config.safety_eval),
        task_eval=refmodel.read_dataset(config.task_eval),
        refuse_token=_stage("load", _refuse_token, config, sft),
    )


def sweep(config: RunConfig) -> list[dict]:
    """Run every configured method over ``config.rho``; writes ``tradeoff.csv``/``.json`` to ``config.out``."""
    outputs = _Outputs(config.out)
    try:
        inputs = prepare_sweep(config)
        timings: list[float] = []
        plan = SurgeryPlan(config.block_size, config.damping, mode=config.mode)
        rows = _stage(
            "sweep", run_sweep, inputs, config.rho, config.methods, config.scope, plan,
            config.seed, config.resta_scales, config.dare_rate, timings,
        )
        outputs.paths += [os.path.join(config.out, n) for n in ("tradeoff.csv", "tradeoff.json")]
        write_tradeoff(rows, config.out)
        with open(outputs.path("sweep_report.json"), "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "config": config.to_dict(),
                    "input_sha256": _input_hashes(config),
                    "surgery_seconds_total": float(sum(timings)),
                    "note": PROXY_NOTE,
                },
                fh,
                indent=1,
                sort_keys=True,
            )
            fh.write("\n")
        return rows
    except BaseException:
        outputs.cleanup()
        raise


# ---------------------------------------------------------------------------
# synthetic harmful fine-tuning scenario


@dataclass(frozen=True)
class ScenarioSettings:
    hidden_dims: tuple[int, ...] = (16, 32)
    n_general: int = 1000
    n_align_harmful: int = 500
    n_unalign: int = 256
    n_downstream: int = 800
    n_mix_harmful: int = 100
    n_fisher: int = 128
    n_eval: int = 500
    align_lr: float = 0.5
    align_epochs: int = 60
    ft_lr: float = 0.2
    ft_epochs: int = 30
    rhos: tuple[float, ...] = tuple(10.0 * k for k in range(0, 11))


def build_scenario_models(seed: int, settings: ScenarioSettings = ScenarioSettings(), calib_samples: int = 128) -> dict:
    """Train the aligned, unaligned, benign-SFT and harmful-mix-SFT reference models and their data."""
    world = SafetyWorld()
    rng = np.random.default_rng(seed)
    cfg = RefModelConfig(world.vocab_size, world.context_len, settings.hidden_dims, seed)
    meta = {"refuse_token": str(world.refuse)}
    init = refmodel.init_params(cfg).with_metadata(**meta)

    data = {
        "align_train": Batch.concat([world.task_batch(rng, settings.n_general, "general"), world.harmful_batch(rng, settings.n_align_harmful, "refuse")]),
        "unalign_train": world.harmful_batch(rng, settings.n_unalign, "comply"),
        "downstream_train": world.task_batch(rng, settings.n_downstream, "downstream"),
        "mix_harmful_train": world.harmful_batch(rng, settings.n_mix_harmful, "comply"),
        "fisher_safety": world.harmful_batch(rng, settings.n_fisher, "refuse"),
        "calib": world.task_batch(rng, calib_samples, "downstream"),
        "safety_eval": world.harmful_batch(rng, settings.n_eval, "refuse"),
        "task_eval": world.task_batch(rng, settings.n_eval, "downstream"),
    }
    aligned = refmodel.train(init, cfg, data["align_train"], settings.align_lr, settings.align_epochs, seed)
    unaligned = refmodel.train(aligned, cfg, data["unalign_train"], settings.ft_lr, settings.ft_epochs, seed + 1)
    harmful_mix = refmodel.train(
        aligned, cfg, Batch.concat([data["downstream_train"], data["mix_harmful_train"]]), settings.ft_lr, settings.ft_epochs, seed + 2
    )
    benign = refmodel.train(aligned, cfg, data["downstream_train"], settings.ft_lr, settings.ft_epochs, seed + 3)
    return {
        "world": world,
        "cfg": cfg,
        "data": data,
        "models": {"aligned": aligned, "unaligned": unaligned, "sft_harmful_mix": harmful_mix, "sft_benign": benign},
    }


def scenario_harmful_ft(seed: int = 0, out: str | None = None, settings: ScenarioSettings = ScenarioSettings(),
                        block_size: int = 128, damping: float = 0.01, scope: str = PER_TENSOR,
                        calib_samples: int = 128) -> dict:
    """Full synthetic run: train models, build safety vector and Fisher, sweep all methods plus IRR_more.

    With ``out`` set, every checkpoint, dataset, the sweep table and a
    config file that reproduces the sweep through the CLI are written there.
    """
    built = build_scenario_models(seed, settings, calib_samples)
    world, cfg, data, models = built["world"], built["cfg"], built["data"], built["models"]
    aligned, unaligned, harmful_mix = models["aligned"], models["unaligned"], models["sft_harmful_mix"]

    d_safe = deltas.safety_vector(aligned, unaligned)
    roundtrip = deltas.apply_delta(unaligned, d_safe)
    fisher = estimate_fisher(aligned, cfg, [data["fisher_safety"]])
    calib = refmodel.capture_calibration(harmful_mix, cfg, data["calib"])
    hessians = {r.layer_name: build_hessian(r, damping) for r in calib}

    inputs = SweepInputs(aligned, harmful_mix, d_safe, fisher, hessians, cfg, data["safety_eval"], data["task_eval"], world.refuse)
    plan = SurgeryPlan(block_size, damping)
    rows = run_sweep(inputs, settings.rhos, list(METHODS) + [IRR_MORE], scope, plan, seed)

    evals = {name: dict(zip(("refusal_rate", "task_accuracy"), inputs.evaluate(m))) for name, m in models.items()}
    summary = {
        "seed": seed,
        "models": evals,
        "safety_vector_roundtrip_exact": roundtrip.equal(aligned),
        "note": PROXY_NOTE,
    }
    if out:
        os.makedirs(out, exist_ok=True)
        for name, m in models.items():
            save_checkpoint(m, os.path.join(out, f"{name}.safetensors"))
        save_checkpoint(d_safe, os.path.join(out, "safety_vector.safetensors"))
        save_checkpoint(fisher, os.path.join(out, "fisher.safetensors"))
        save_checkpoint(refmodel.calib_to_paramset(calib), os.path.join(out, "calib.safetensors"))
        for name, batch in data.items():
            refmodel.write_dataset(batch, os.path.join(out, f"{name}.tsv"))
        write_tradeoff(rows, out)
        run_cfg = RunConfig(
            pre="aligned.safetensors",
            sft="sft_harmful_mix.safetensors",
            unalign="unaligned.safetensors",
            fisher="fisher.safetensors",
            calib_data="calib.tsv",
            safety_eval="safety_eval.tsv",
            task_eval="task_eval.tsv",
            refuse_token=world.refuse,
            rho=list(settings.rhos),
            methods=list(METHODS) + [IRR_MORE],
            block_size=block_size,
            damping=damping,
            scope=scope,
            calib_samples=calib_samples,
            seed=seed,
            out="sweep",
        )
        with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
            json.dump(run_cfg.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return {"rows": rows, "summary": summary, **built, "d_safe": d_safe, "fisher": fisher, "hessians": hessians}
