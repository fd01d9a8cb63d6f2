"""Command line entry point: ``graphca <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from ._rng import stream
from .ebm import EnergyBasedBaseline
from .gca import GraphComponentAnalysis
from .metrics import mean_abs_corr
from .synthdata import GraphDataset, build_link_model, load_dataset, save_dataset
from .theory import check_identifiability

OUTPUT_ENV = "GRAPHCA_OUTPUT_DIR"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=sorted(harness.PROFILES), default="desk")
    p.add_argument("--config", type=Path, help="key=value config file")
    for f in fields(harness.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if str(f.type) == "bool":
            p.add_argument(flag, dest=f.name, action="store_const", const="true", default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.PROFILES[args.profile]
    if args.config is not None:
        cfg = harness.ExperimentConfig.from_text(args.config.read_text(), base=cfg)
    overrides = {f.name: getattr(args, f.name) for f in fields(harness.ExperimentConfig)
                 if getattr(args, f.name, None) is not None}
    cfg = cfg.with_strings(overrides)
    if os.environ.get(OUTPUT_ENV):
        cfg = cfg.replace(output_dir=os.environ[OUTPUT_ENV])
    return cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    mixing, ds = harness.build_problem(cfg, seed)
    s_test, x_test = harness.make_test_set(cfg, seed, mixing)
    test = GraphDataset(x_test, s_test, ds.link_seed ^ 0x5DEECE66D, ds.link_model)
    save_dataset(out / "train.gca", ds)
    save_dataset(out / "test.gca", test)
    (out / "config.txt").write_text(cfg.to_text())
    print(f"wrote {out / 'train.gca'} (n={ds.n}) and {out / 'test.gca'} (n={test.n})")
    return 0


def _train(args, method: str) -> int:
    cfg = _config(args).replace(method=method)
    ds = load_dataset(args.data)
    cfg = cfg.replace(d_s=ds.d_s, d_x=ds.d_x, K=ds.K)
    est = harness.make_estimator(cfg, cfg.seeds[0])
    if method == "gca":
        est.fit(ds.x, ds.link_weights)
    else:
        est.fit(ds.x)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"model.{method}"
    out.parent.mkdir(parents=True, exist_ok=True)
    est.save(out)
    print(f"wrote {out}; final loss {est.loss_curve_[-1] if len(est.loss_curve_) else float('nan'):.6g}")
    return 0


def cmd_eval(args) -> int:
    magic = Path(args.model).read_bytes()[:4]
    cls = {b"GCAM": GraphComponentAnalysis, b"EBMM": EnergyBasedBaseline}.get(magic)
    if cls is None:
        raise SystemExit(f"{args.model}: not a model checkpoint")
    est = cls.load(args.model)
    ds = load_dataset(args.data)
    report = mean_abs_corr(ds.s_true, est.transform(ds.x))
    print(f"mcc = {report.mcc:.6f}")
    print(f"assignment = {','.join(map(str, report.assignment))}")
    print("per_component_abs_corr = " + ",".join(f"{c:.6f}" for c in report.per_component_abs_corr))
    print(f"n_test = {report.n_test}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [int(v) for v in args.values.split(",")]
    methods = tuple(args.methods.split(","))
    rows, agg = harness.run_sweep(cfg, args.axis, values, methods=methods, n_jobs=args.jobs)
    harness.emit_plot_data(agg, cfg.output_dir, methods=methods)
    for a in agg:
        print(f"{a.method} {harness.AXES[a.axis]}={a.value}: mcc {a.mean:.4f} +- {a.std:.4f} (n={a.count})")
    failed = [r for r in rows if r.error]
    if failed:
        print(f"{len(failed)} run(s) failed; see runs.csv", file=sys.stderr)
    return 0


def cmd_check(args) -> int:
    if args.data:
        model = load_dataset(args.data).link_model
    else:
        model = build_link_model(args.d_s, args.K, stream(args.seed, "link-model"))
    report = check_identifiability(model, include_reference=not args.no_reference)
    print(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphca", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/test datasets")
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    for method in harness.METHODS:
        p = sub.add_parser(f"train-{method}", help=f"fit {method.upper()} on a dataset file")
        p.add_argument("--data", required=True, type=Path)
        p.add_argument("--out", type=Path)
        _add_config_flags(p)
        p.set_defaults(func=lambda a, m=method: _train(a, m))

    p = sub.add_parser("eval", help="mean absolute correlation of a checkpoint on a dataset")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep latent dimension or maximum link state")
    p.add_argument("--axis", required=True, choices=sorted(harness.AXES))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--methods", default="gca,ebm")
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check-identifiability", help="link-state conditions for a link model")
    p.add_argument("--d-s", type=int, default=4)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", type=Path, help="read the link model from a dataset file")
    p.add_argument("--no-reference", action="store_true",
                   help="do not add the zero-potential reference state 0")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
