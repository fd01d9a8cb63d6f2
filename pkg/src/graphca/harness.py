"""Experiment orchestration: single runs, sweeps, CSV results and plot data."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._base import TrainConfig
from ._rng import stream
from .ebm import EnergyBasedBaseline
from .gca import GraphComponentAnalysis
from .metrics import mean_abs_corr
from .synthdata import (LatentConfig, MixingNetwork, build_link_model, build_mixing,
                        generate_dataset, sample_latents)

logger = logging.getLogger(__name__)

METHODS = ("gca", "ebm")
AXES = {"latent_dim": "d_s", "max_link_state": "K"}


@dataclass(frozen=True)
class ExperimentConfig:
    latent: str = "laplace"
    d_s: int = 4
    d_x: int = 4
    K: int = 4
    n: int = 2000
    method: str = "gca"
    minibatch_size: int = 100
    iterations: int = 20_000
    lr: float = 5e-4
    eval_every: int = 100
    hidden_width: int = 50
    n_hidden_layers: int = 4
    n_test: int = 10_000
    seeds: tuple[int, ...] = (0,)
    allow_noninjective: bool = False
    output_dir: str = "results"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        LatentConfig(self.latent, self.d_s, self.n)
        if self.K < 1 or self.d_x < 1 or self.n_test < 3:
            raise ValueError(f"invalid experiment config {self}")

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.minibatch_size, self.iterations, self.lr, 0, self.eval_every)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # key=value text form ---------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(map(str, val))
            elif isinstance(val, bool):
                val = str(val).lower()
            lines.append(f"{f.name}={val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
        return (base or cls()).with_strings(values)

    def with_strings(self, values: dict[str, str]) -> "ExperimentConfig":
        known = {f.name: f for f in fields(self)}
        parsed = {}
        for key, val in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            parsed[key] = _parse_field(known[key].type, val)
        return self.replace(**parsed)


def _parse_field(type_name, val: str):
    t = str(type_name)
    if t.startswith("tuple"):
        return tuple(int(v) for v in val.split(",") if v.strip())
    if t == "bool":
        if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {val!r}")
        return val.lower() in ("true", "1", "yes")
    if t == "int":
        return int(val)
    if t == "float":
        return float(val)
    return val


# Desk runs take 5x fewer Adam steps than the full profile, so the step
# size is raised by the same factor to keep lr * iterations fixed.
DESK_PROFILE = ExperimentConfig()
FULL_PROFILE = ExperimentConfig(d_s=6, d_x=6, K=10, n=10_000, iterations=100_000, lr=1e-4)
PROFILES = {"desk": DESK_PROFILE, "full": FULL_PROFILE}


@dataclass
class SweepResultRow:
    method: str
    latent: str
    d_s: int
    d_x: int
    K: int
    n: int
    iterations: int
    minibatch_size: int
    lr: float
    eval_every: int
    hidden_width: int
    n_hidden_layers: int
    n_test: int
    seed: int
    mcc: float
    loss_final: float
    wall_time_s: float
    error: str = ""

    def config(self) -> ExperimentConfig:
        keys = {f.name for f in fields(ExperimentConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in keys}
        return ExperimentConfig(**kw, seeds=(self.seed,), allow_noninjective=self.d_s > self.d_x)


ROW_FIELDS = [f.name for f in fields(SweepResultRow)]


# ---------------------------------------------------------------- single runs


def build_problem(cfg: ExperimentConfig, seed: int):
    """Mixing network, link model and training graph for one seed."""
    if cfg.d_s > cfg.d_x:
        if not cfg.allow_noninjective:
            raise ValueError(f"d_s={cfg.d_s} > d_x={cfg.d_x} needs allow_noninjective")
        warnings.warn(f"d_s={cfg.d_s} > d_x={cfg.d_x}: mixing is not injective", stacklevel=2)
    link_model = build_link_model(cfg.d_s, cfg.K, stream(seed, "link-model"))
    mixing = build_mixing(cfg.d_s, cfg.d_x, stream(seed, "mixing-init"),
                          allow_noninjective=cfg.allow_noninjective)
    ds = generate_dataset(LatentConfig(cfg.latent, cfg.d_s, cfg.n), mixing, link_model, seed)
    return mixing, ds


def make_test_set(cfg: ExperimentConfig, seed: int, mixing: MixingNetwork):
    s = sample_latents(LatentConfig(cfg.latent, cfg.d_s, cfg.n_test), stream(seed, "test-latents"))
    return s, mixing(s)


def make_estimator(cfg: ExperimentConfig, seed: int):
    common = dict(hidden_width=cfg.hidden_width, n_hidden_layers=cfg.n_hidden_layers,
                  batch_size=cfg.minibatch_size, max_iter=cfg.iterations,
                  learning_rate=cfg.lr, eval_every=cfg.eval_every, random_state=seed)
    if cfg.method == "gca":
        return GraphComponentAnalysis(cfg.d_s, n_link_states=cfg.K, **common)
    return EnergyBasedBaseline(cfg.d_s, **common)


def run_experiment(cfg: ExperimentConfig, seed: int) -> SweepResultRow:
    """Generate data, train ``cfg.method`` and score it on fresh test latents.

    Every random choice comes from named streams of ``seed``.
    """
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if cfg.allow_noninjective else "default")
        mixing, ds = build_problem(cfg, seed)
    est = make_estimator(cfg, seed)
    if cfg.method == "gca":
        est.fit(ds.x, ds.link_weights)
    else:
        est.fit(ds.x)
    s_test, x_test = make_test_set(cfg, seed, mixing)
    report = mean_abs_corr(s_test, est.transform(x_test))
    loss_final = float(est.loss_curve_[-1]) if len(est.loss_curve_) else float("nan")
    return _row(cfg, seed, report.mcc, loss_final, time.perf_counter() - t0)


def _row(cfg, seed, mcc, loss_final, wall, error=""):
    return SweepResultRow(cfg.method, cfg.latent, cfg.d_s, cfg.d_x, cfg.K, cfg.n, cfg.iterations,
                          cfg.minibatch_size, cfg.lr, cfg.eval_every, cfg.hidden_width,
                          cfg.n_hidden_layers, cfg.n_test, seed, mcc, loss_final, wall, error)


def _safe_run(cfg, seed) -> SweepResultRow:
    try:
        return run_experiment(cfg, seed)
    except Exception as exc:  # recorded per row; the sweep continues
        logger.warning("run %s seed=%d failed: %s", cfg, seed, exc)
        return _row(cfg, seed, float("nan"), float("nan"), 0.0, f"{type(exc).__name__}: {exc}")


def rerun_row(row: SweepResultRow) -> SweepResultRow:
    return run_experiment(row.config(), row.seed)


# ---------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class AggregateRow:
    method: str
    axis: str
    value: int
    mean: float
    std: float
    count: int


def _dedupe_key(cfg: ExperimentConfig, seed: int):
    # the baseline never reads links and its data/streams do not depend on K
    if cfg.method == "ebm":
        cfg = cfg.replace(K=1)
    return cfg.replace(seeds=(0,), output_dir=""), seed


def run_sweep(base_cfg: ExperimentConfig, axis: str, values: Sequence[int],
              seeds: Sequence[int] | None = None, *, methods: Iterable[str] = METHODS,
              output_dir=None, n_jobs: int = 1, reuse_baseline: bool = True):
    """Run values x seeds x methods; write ``runs.csv`` and ``aggregate.csv``.

    Returns ``(rows, aggregate)``. Failed runs are kept as rows with an error
    string and NaN scores.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    if not values:
        raise ValueError("values must be non-empty")
    seeds = tuple(base_cfg.seeds if seeds is None else seeds)
    field_name = AXES[axis]
    jobs = []
    for value in values:
        for method in methods:
            cfg = base_cfg.replace(**{field_name: int(value)}, method=method)
            if cfg.d_s > cfg.d_x:
                cfg = cfg.replace(allow_noninjective=True)
            for seed in seeds:
                jobs.append((cfg, int(seed)))

    unique = {}
    for cfg, seed in jobs:
        key = _dedupe_key(cfg, seed) if reuse_baseline else (cfg, seed)
        unique.setdefault(key, (cfg, seed))
    todo = list(unique.items())
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_safe_run, *zip(*[job for _, job in todo])))
    else:
        results = [_safe_run(cfg, seed) for _, (cfg, seed) in todo]
    done = {key: row for (key, _), row in zip(todo, results)}

    rows = []
    for cfg, seed in jobs:
        key = _dedupe_key(cfg, seed) if reuse_baseline else (cfg, seed)
        row = dataclasses.replace(done[key], K=cfg.K, d_s=cfg.d_s)
        rows.append(row)
    agg = aggregate(rows, axis)
    out = Path(output_dir if output_dir is not None else base_cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "runs.csv", rows)
    write_aggregate(out / "aggregate.csv", agg)
    return rows, agg


def aggregate(rows: Sequence[SweepResultRow], axis: str) -> list[AggregateRow]:
    """Mean and sample standard deviation of mcc per (method, axis value).

    Sums use ``math.fsum`` so the result does not depend on row order.
    """
    field_name = AXES[axis]
    groups: dict[tuple[str, int], list[float]] = {}
    for row in rows:
        if row.error or not math.isfinite(row.mcc):
            continue
        groups.setdefault((row.method, getattr(row, field_name)), []).append(row.mcc)
    out = []
    for (method, value), mccs in sorted(groups.items()):
        k = len(mccs)
        mean = math.fsum(mccs) / k
        var = math.fsum((m - mean) ** 2 for m in mccs) / (k - 1) if k > 1 else 0.0
        out.append(AggregateRow(method, axis, value, mean, math.sqrt(var), k))
    return out


# ---------------------------------------------------------------- files


def write_rows(path, rows: Sequence[SweepResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROW_FIELDS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in dataclasses.astuple(row)])


def read_rows(path) -> list[SweepResultRow]:
    types = {f.name: f.type for f in fields(SweepResultRow)}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ROW_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [SweepResultRow(**{k: _parse_field(types[k], v) for k, v in rec.items()})
                for rec in reader]


def write_aggregate(path, agg: Sequence[AggregateRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in fields(AggregateRow)])
        for a in agg:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(a)])


def read_aggregate(path) -> list[AggregateRow]:
    types = {f.name: f.type for f in fields(AggregateRow)}
    with open(path, newline="") as fh:
        return [AggregateRow(**{k: _parse_field(types[k], v) for k, v in rec.items()})
                for rec in csv.DictReader(fh)]


def emit_plot_data(agg: Sequence[AggregateRow], output_dir, methods: Iterable[str] = METHODS,
                   prefix: str = "plot") -> list[Path]:
    """One whitespace-separated file per method: ``x mean std`` (6 significant digits)."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for method in methods:
        pts = sorted((a for a in agg if a.method == method), key=lambda a: a.value)
        axis = pts[0].axis if pts else "x"
        lines = [f"# {axis} mean std"]
        lines += [f"{a.value:.6g} {a.mean:.6g} {a.std:.6g}" for a in pts]
        path = out / f"{prefix}_{method}.dat"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths
