"""Command-line entry point: ``saferealign <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import deltas, masks, pipeline, refmodel
from .deltas import DeltaSet, MaskSet
from .fisher import SCOPES, FisherDiag, estimate_fisher
from .refmodel import CalibSet, RefModelConfig
from .surgery import INDEPENDENT, SEQUENTIAL, SurgeryPlan, build_hessian, run_surgery
from .tensors import CheckpointError, ParamSet, load_checkpoint, save_checkpoint

log = logging.getLogger("saferealign")


def _load(path, cls=ParamSet):
    return load_checkpoint(path, cls)


def cmd_delta(args):
    save_checkpoint(deltas.compute_delta(_load(args.after), _load(args.before)), args.out)


def cmd_safety_vector(args):
    save_checkpoint(deltas.safety_vector(_load(args.align), _load(args.unalign)), args.out)


def cmd_fisher(args):
    model = _load(args.model)
    data = refmodel.read_dataset(args.safety_data)
    if args.samples:
        data = data[: args.samples]
    save_checkpoint(estimate_fisher(model, refmodel.config_of(model), [data]), args.out)


def cmd_mask(args):
    pre, sft = _load(args.pre), _load(args.sft)
    d_sft = deltas.compute_delta(sft, pre)
    d_safe = _load(args.safety_vector, DeltaSet)
    fisher = _load(args.fisher, FisherDiag)
    m = pipeline.irr_mask(d_sft, d_safe, fisher, args.rho, args.scope)
    if args.extra is not None:
        cands = deltas.interference_candidates(d_sft, d_safe)
        full = masks.build_mask(cands, fisher, 100.0, args.scope)
        m = masks.extend_mask_more(full, cands, fisher, args.extra, args.scope)
    save_checkpoint(m.with_metadata(rho=args.rho, scope=args.scope), args.out)
    print(json.dumps({"masked_fraction": m.masked_fraction(), "masked_count": m.count()}))


def _calibration(args, sft):
    if args.calib:
        records = _load(args.calib, CalibSet).records()
    elif args.calib_data:
        data = refmodel.read_dataset(args.calib_data)[: args.calib_samples]
        records = refmodel.capture_calibration(sft, refmodel.config_of(sft), data)
    else:
        return {}
    return {r.layer_name: build_hessian(r, args.damping) for r in records}


def cmd_surgery(args):
    pre, sft = _load(args.pre), _load(args.sft)
    mask = _load(args.mask, MaskSet)
    hessians = _calibration(args, sft) if not args.no_recal else {}
    plan = SurgeryPlan(args.block_size, args.damping, mode=args.mode)
    reports = []
    out = run_surgery(sft, pre, mask, hessians, plan, recalibrate=not args.no_recal, report=reports.append)
    pipeline.verify_surgery(sft, pre, mask, out)
    save_checkpoint(out, args.out)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            for r in reports:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _run_config(args) -> pipeline.RunConfig:
    overrides = {
        k: getattr(args, k, None)
        for k in ("pre", "sft", "align", "unalign", "safety_vector", "fisher", "safety_data", "calib", "calib_data",
                  "safety_eval", "task_eval", "refuse_token", "block_size", "damping", "scope", "calib_samples",
                  "seed", "out", "mode", "dare_rate")
    }
    if getattr(args, "rho", None) is not None:
        overrides["rho"] = list(args.rho)
    if getattr(args, "methods", None):
        overrides["methods"] = list(args.methods)
    if getattr(args, "resta_scales", None):
        overrides["resta_scales"] = list(args.resta_scales)
    if getattr(args, "no_recal", False):
        overrides["recalibrate"] = False
    if args.config:
        return pipeline.RunConfig.from_file(args.config, **overrides)
    return pipeline.RunConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_realign(args):
    report = pipeline.realign(_run_config(args))
    print(json.dumps({k: report[k] for k in ("rho", "masked_fraction", "output_sha256")} | ({"eval": report["eval"]} if "eval" in report else {})))


def cmd_sweep(args):
    config = _run_config(args)
    rows = pipeline.sweep(config)
    print(f"wrote {len(rows)} rows to {config.out}/tradeoff.csv")


def cmd_scenario(args):
    result = pipeline.scenario_harmful_ft(args.seed, args.out, block_size=args.block_size, damping=args.damping,
                                          scope=args.scope, calib_samples=args.calib_samples)
    print(json.dumps(result["summary"]["models"], indent=1, sort_keys=True))
    print(f"artifacts in {args.out}")


def cmd_baseline(args):
    sft = _load(args.sft)
    if args.method == "dare":
        pre = _load(args.pre)
        d = deltas.dare_transform(deltas.compute_delta(sft, pre), args.drop_rate, args.seed)
        save_checkpoint(deltas.apply_delta(pre, d), args.out)
    else:
        save_checkpoint(deltas.resta_merge(sft, _load(args.safety_vector, DeltaSet), args.scale), args.out)


def cmd_refmodel(args):
    if args.action == "train":
        data = refmodel.read_dataset(args.data)
        if args.init:
            model = _load(args.init)
            cfg = refmodel.config_of(model)
        else:
            if not args.vocab_size or not args.hidden_dims:
                raise SystemExit("refmodel train needs --init or --vocab-size and --hidden-dims")
            cfg = RefModelConfig(args.vocab_size, data.inputs.shape[1], tuple(args.hidden_dims), args.seed)
            model = refmodel.init_params(cfg)
        if args.refuse_token is not None:
            model = model.with_metadata(refuse_token=args.refuse_token)
        losses: list[float] = []
        trained = refmodel.train(model, cfg, data, args.lr, args.epochs, args.seed, args.batch_size, losses)
        save_checkpoint(trained, args.out)
        print(json.dumps({"epoch_loss": losses[-5:]}))
    else:
        model = _load(args.model)
        cfg = refmodel.config_of(model)
        tok = args.refuse_token if args.refuse_token is not None else int(model.metadata.get("refuse_token", -1))
        refusal, acc = refmodel.eval_suite(model, cfg, refmodel.read_dataset(args.safety_data), refmodel.read_dataset(args.task_data), tok)
        print(json.dumps({"refusal_rate": refusal, "task_accuracy": acc, "note": pipeline.PROXY_NOTE}))


def _surgery_flags(p, rho=True):
    if rho:
        p.add_argument("--rho", type=float, nargs="+", help="mask ratio(s) in percent")
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--damping", type=float, default=None, help="damping as a fraction of the mean Hessian diagonal")
    p.add_argument("--scope", choices=SCOPES, default=None)
    p.add_argument("--calib-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=(SEQUENTIAL, INDEPENDENT), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saferealign", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("delta", help="after - before, per tensor")
    p.add_argument("--after", required=True)
    p.add_argument("--before", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_delta)

    p = sub.add_parser("safety-vector", help="aligned - unaligned")
    p.add_argument("--align", required=True)
    p.add_argument("--unalign", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_safety_vector)

    p = sub.add_parser("fisher", help="diagonal Fisher of a reference model on a safety dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--safety-data", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fisher)

    p = sub.add_parser("mask", help="unsafe-delta mask at ratio --rho")
    p.add_argument("--pre", required=True)
    p.add_argument("--sft", required=True)
    p.add_argument("--safety-vector", required=True)
    p.add_argument("--fisher", required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--scope", choices=SCOPES, default="per-tensor")
    p.add_argument("--extra", type=float, default=None, help="IRR_more: extra percent of lowest-importance non-candidates")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("surgery", help="remove masked deltas and recalibrate")
    p.add_argument("--pre", required=True)
    p.add_argument("--sft", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--calib", help="calibration checkpoint (kind=calib)")
    p.add_argument("--calib-data", help="task dataset to capture calibration inputs on the fine-tuned model")
    p.add_argument("--calib-samples", type=int, default=128)
    p.add_argument("--block-size", type=int, default=128)
    p.add_argument("--damping", type=float, default=0.01)
    p.add_argument("--mode", choices=(SEQUENTIAL, INDEPENDENT), default=SEQUENTIAL)
    p.add_argument("--no-recal", action="store_true")
    p.add_argument("--report", help="write per-layer JSON lines here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_surgery)

    for name, func, helptext in (("realign", cmd_realign, "full pipeline at one ratio"), ("sweep", cmd_sweep, "tradeoff table over ratios and methods")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON config; flags override its values")
        for key in ("pre", "sft", "align", "unalign", "safety-vector", "fisher", "safety-data", "calib", "calib-data", "safety-eval", "task-eval", "out"):
            p.add_argument(f"--{key}")
        p.add_argument("--refuse-token", type=int)
        p.add_argument("--no-recal", action="store_true")
        _surgery_flags(p)
        if name == "sweep":
            p.add_argument("--methods", nargs="+", choices=list(pipeline.METHODS) + [pipeline.IRR_MORE])
            p.add_argument("--resta-scales", type=float, nargs="+")
            p.add_argument("--dare-rate", type=float)
        p.set_defaults(func=func)

    p = sub.add_parser("scenario", help="synthetic harmful fine-tuning scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--block-size", type=int, default=128)
    p.add_argument("--damping", type=float, default=0.01)
    p.add_argument("--scope", choices=SCOPES, default="per-tensor")
    p.add_argument("--calib-samples", type=int, default=128)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("baseline", help="DARE or RESTA baselines")
    bsub = p.add_subparsers(dest="method", required=True)
    b = bsub.add_parser("dare")
    b.add_argument("--sft", required=True)
    b.add_argument("--pre", required=True)
    b.add_argument("--drop-rate", type=float, required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b = bsub.add_parser("resta")
    b.add_argument("--sft", required=True)
    b.add_argument("--safety-vector", required=True)
    b.add_argument("--scale", type=float, default=1.0)
    b.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("refmodel", help="train or evaluate the reference model")
    rsub = p.add_subparsers(dest="action", required=True)
    r = rsub.add_parser("train")
    r.add_argument("--data", required=True)
    r.add_argument("--init", help="checkpoint to continue from")
    r.add_argument("--vocab-size", type=int)
    r.add_argument("--hidden-dims", type=int, nargs="+")
    r.add_argument("--lr", type=float, default=0.2)
    r.add_argument("--epochs", type=int, default=30)
    r.add_argument("--batch-size", type=int, default=32)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--refuse-token", type=int)
    r.add_argument("--out", required=True)
    r = rsub.add_parser("eval")
    r.add_argument("--model", required=True)
    r.add_argument("--safety-data", required=True)
    r.add_argument("--task-data", required=True)
    r.add_argument("--refuse-token", type=int)
    p.set_defaults(func=cmd_refmodel)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (pipeline.StageError, CheckpointError, ValueError, FileNotFoundError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
