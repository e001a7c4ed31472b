"""``fluxnet`` command line: gen, prep, hpo, train, predict, eval, run.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric or
training failure.  ``FLUXNET_WORKERS`` sets the Monte Carlo / search
worker count; nothing else is read from the environment.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, FluxnetError
from .modelio import load_model, save_model
from .pipeline import (RunConfig, bank_query, evaluate_predictions, load_config, predict_bundle, prepare_campaign,
                       prediction_rows, run_pipeline, search_hyperparameters, train_model, train_settings,
                       write_fences, write_predictions, write_report, _stage_gen, _Layout)
from .preprocess import read_dataset, read_table

log = logging.getLogger("fluxnet")


def _smooth(text: str):
    if text.lower() in ("none", "off", ""):
        return None
    try:
        w, o = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--smooth expects WINDOW:ORDER, got {text!r}") from exc
    return w, o


def _json_file(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path}: invalid JSON ({exc})") from exc


def _config(args) -> RunConfig:
    d = load_config(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "mode", None):
        d["mode"] = args.mode
    return RunConfig.from_dict(d)


def cmd_gen(args) -> None:
    cfg = _config(args)
    if args.cycles is not None:
        cfg.gen["cycles"] = args.cycles
    if args.defects:
        cfg.gen["defects"] = str(args.defects)
    seed = args.seed if args.seed is not None else cfg.stage_seed("gen")
    lay = _Layout(Path("."))
    lay.campaign = Path(args.out)
    _stage_gen(cfg, lay, seed)


def cmd_prep(args) -> None:
    cfg = _config(args)
    p = cfg.prep
    smooth = _smooth(args.smooth) if args.smooth is not None else p["smooth"]
    assemblies = args.assemblies.split(",") if args.assemblies else p["assemblies"]
    holdout = args.holdout_cycles if args.holdout_cycles is not None else p["holdout_cycles"]
    threshold = args.threshold if args.threshold is not None else p["threshold"]
    prepare_campaign(args.inp, args.out, smooth, threshold, holdout, assemblies)


def _train_overrides(cfg: RunConfig, spec_path) -> dict:
    s = dict(cfg.train)
    if spec_path:
        s.update(_json_file(spec_path, "network spec"))
    return s


def cmd_hpo(args) -> None:
    cfg = _config(args)
    hcfg = dict(cfg.hpo)
    if args.space:
        hcfg["space"] = _json_file(args.space, "search space")
    if args.budget is not None:
        hcfg["budget"] = args.budget
    if args.two_stage:
        hcfg["two_stage"] = True
    ds = read_dataset(args.data)
    seed = args.seed if args.seed is not None else cfg.stage_seed("hpo")
    doc = search_hyperparameters(ds, cfg.mode, train_settings(cfg.mode, _train_overrides(cfg, args.spec)), hcfg, seed)
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> None:
    cfg = _config(args)
    ds = read_dataset(args.data)
    seed = args.seed if args.seed is not None else cfg.stage_seed("train")
    save_model(args.out, train_model(ds, cfg.mode, _train_overrides(cfg, args.spec), seed))


def cmd_predict(args) -> None:
    cfg = _config(args)
    bundle = load_model(args.model, expected_mode=args.mode)
    p = cfg.predict
    passes = args.passes if args.passes is not None else int(p["passes"])
    level = args.level if args.level is not None else float(p["level"])
    seed = args.seed if args.seed is not None else cfg.stage_seed("predict")
    aid = bundle.assembly or ""
    if args.data:
        ds = read_dataset(args.data, assembly=aid or None)
        x, ids = ds.x, ds.cycle_ids
    elif args.bank is not None:
        x = bank_query(args.bank)
        ids = [""] * len(x)
    else:
        raise ConfigError("predict needs --bank or --data")
    pd = predict_bundle(bundle, x, passes, level, seed)
    write_predictions(args.out, prediction_rows(ids, aid, x, pd))


def cmd_eval(args) -> None:
    cfg = _config(args)
    level = args.level if args.level is not None else float(cfg.eval["level"])
    report = evaluate_predictions(read_table(args.pred), read_table(args.truth), level)
    write_report(report, args.report)
    if args.fences:
        write_fences(report, args.fences)


def cmd_run(args) -> None:
    cfg = _config(args)
    m = run_pipeline(cfg, args.workdir)
    for stage, info in m.stages.items():
        print(f"{stage:8s} {info['status']}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fluxnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run config (.json or .toml)")
        p.add_argument("--seed", type=int)
        p.set_defaults(fn=fn)
        return p

    p = add("gen", cmd_gen, "simulate a synthetic measurement campaign")
    p.add_argument("--cycles", type=int)
    p.add_argument("--defects", help="JSON list of defect specs")
    p.add_argument("--out", required=True)

    p = add("prep", cmd_prep, "decay-correct, reject, smooth and write datasets")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--smooth", help="WINDOW:ORDER or 'none'")
    p.add_argument("--assemblies", help="comma-separated ids, or 'all'")
    p.add_argument("--holdout-cycles", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)

    p = add("hpo", cmd_hpo, "hyperparameter search on one dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--space")
    p.add_argument("--spec", help="JSON training settings used as the base")
    p.add_argument("--budget", type=int)
    p.add_argument("--two-stage", action="store_true")
    p.add_argument("--mode", choices=("dnn", "mcd", "bnn"))
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", help="JSON training settings (hidden, learning_rate, ...)")
    p.add_argument("--mode", choices=("dnn", "mcd", "bnn"))
    p.add_argument("--out", required=True)

    p = add("predict", cmd_predict, "predict a profile with uncertainty")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("dnn", "mcd", "bnn"), help="expected model mode")
    p.add_argument("--passes", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--bank", type=float)
    p.add_argument("--data", help="dataset CSV whose rows are predicted")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score predictions against measurements")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--level", type=float)
    p.add_argument("--report", required=True)
    p.add_argument("--fences", help="optional CSV of box-plot fences")

    p = add("run", cmd_run, "run the full pipeline")
    p.add_argument("--workdir")
    p.add_argument("--mode", choices=("dnn", "mcd", "bnn"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except FluxnetError as exc:
        print(f"fluxnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"fluxnet {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
