"""Command-line entry point: ``abcf {simulate,fit,evaluate,sweep}``.

Config files are flat ``key = value`` text (``#`` starts a comment). Command
flags override file values. Exit codes: 0 success, 1 usage or config error,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import re
import sys
import time
from pathlib import Path

import pandas as pd

from . import __version__
from .data import DatasetError, FitConfig, ModelKind, load_dataset, summarize_dataset
from .dgp import DgpConfig, make_replicates, read_truth, write_replicate
from .evaluation import comparison_table, replicate_metrics, rows_to_frame
from .fit import NumericalFailure, fit, fit_report, read_draws, write_draws
from .study import AXES, Scenario, metric_summary, run_study, sweep_scenarios
from .variance import NonPositiveVariance

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DGP_KEYS = {f.name: f for f in dataclasses.fields(DgpConfig)}
FIT_KEYS = {f.name: f for f in dataclasses.fields(FitConfig)
            if f.name not in ("initial_proposal_sd", "fixed", "model_kind", "seed")}
RUN_KEYS = {"seed": int, "reps": int, "model": str, "models": str, "workers": int, "axis": str, "values": str,
            "effect_truth": str}
PIN_KEYS = {f"fixed_{p}": float for p in ("sigma_eps2", "sigma_u", "sigma_v", "rho")}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_CONFIG)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if raw.lower() in ("none", "null", ""):
            return None
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse value {raw!r}") from None
    return raw


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return None


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into typed values; unknown keys raise naming the key."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in DGP_KEYS:
            out[key] = _coerce(key, raw, _default(DGP_KEYS[key]))
        elif key in FIT_KEYS:
            out[key] = _coerce(key, raw, _default(FIT_KEYS[key]))
        elif key in RUN_KEYS:
            out[key] = raw if RUN_KEYS[key] is str else _coerce(key, raw, RUN_KEYS[key]())
        elif key in PIN_KEYS:
            out[key] = _coerce(key, raw, 0.0)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def dgp_from(cfg: dict) -> DgpConfig:
    kw = {k: v for k, v in cfg.items() if k in DGP_KEYS and k != "seed"}
    if "n_units" in kw and "n_treated" not in kw:
        kw["n_treated"] = round(kw["n_units"] / 3)
    try:
        return DgpConfig(seed=cfg.get("seed", 0), **kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def fit_overrides(cfg: dict) -> dict:
    kw = {k: v for k, v in cfg.items() if k in FIT_KEYS}
    pins = {k[len("fixed_"):]: v for k, v in cfg.items() if k in PIN_KEYS}
    if pins:
        kw["fixed"] = pins
    return kw


def fit_config_from(cfg: dict) -> FitConfig:
    kw = fit_overrides(cfg)
    try:
        return FitConfig(model_kind=cfg.get("model", "abcf"), seed=cfg.get("seed", 0), **kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _snapshot(obj) -> dict:
    d = dataclasses.asdict(obj)
    return json.loads(json.dumps(d, default=str))


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, outputs, started: float) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    m = {"command": command, "config": config, "seed": seed, "version": __version__,
         "outputs": sorted(str(Path(o).relative_to(out_dir)) if str(o).startswith(str(out_dir)) else str(o)
                           for o in outputs),
         "wall_clock_seconds": round(time.time() - started, 3)}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return path


def _merge(args, keys) -> dict:
    cfg = load_config(args.config)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = _merge(args, ("seed", "reps"))
    if args.residual_share is not None:
        cfg["residual_share_override"] = args.residual_share
    dgp = dgp_from(cfg)
    reps = cfg.get("reps", 1)
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    out = Path(args.out)
    outputs = []
    for rep in make_replicates(dgp, reps, dgp.seed):
        outputs.extend(write_replicate(rep, out).values())
    write_manifest(out, "simulate", {"dgp": _snapshot(dgp), "reps": reps}, dgp.seed, outputs, started)
    print(f"wrote {reps} replicate(s) to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    started = time.time()
    cfg = _merge(args, ("seed", "model", "psi"))
    fc = fit_config_from(cfg)
    d = load_dataset(args.data)
    draws = fit(d, fc)
    out = Path(args.out)
    paths = write_draws(draws, out)
    report = fit_report(draws)
    rp = out / "fit_report.json"
    rp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    snap = _snapshot(fc)
    snap["data"] = str(Path(args.data).resolve())
    snap["dataset"] = summarize_dataset(d)
    write_manifest(out, "fit", json.loads(json.dumps(snap, default=float)), fc.seed, [*paths.values(), rp], started)
    if report.flagged:
        print(f"warning: acceptance outside range for {', '.join(report.flagged)}", file=sys.stderr)
    print(f"wrote {draws.n_kept} draws to {out}")
    return EXIT_OK


_REP_RE = re.compile(r"(rep\d+)_data\.csv$")


def _draws_source(draws_dir: Path) -> tuple[str, Path]:
    man = draws_dir / "manifest.json"
    if not man.exists():
        raise DatasetError(f"{draws_dir}: missing manifest.json")
    cfg = json.loads(man.read_text())["config"]
    data = Path(cfg["data"])
    m = _REP_RE.search(data.name)
    stem = m.group(1) if m else data.stem
    return stem, data


def cmd_evaluate(args) -> int:
    started = time.time()
    truth_dir = Path(args.truth)
    rows = []
    for dd in map(Path, args.draws):
        draws = read_draws(dd)
        stem, data_path = _draws_source(dd)
        tp = truth_dir / f"{stem}_truth.csv"
        if not tp.exists():
            raise DatasetError(f"missing truth file for replicate {stem}: {tp}")
        truth = read_truth(tp)
        meta = truth.get("metadata", {})
        truth["sigma_u"] = meta.get("sigma_u")
        if truth.get("satt") is None:
            raise DatasetError(f"replicate {stem}: truth sidecar lacks satt")
        d = load_dataset(data_path)
        if [str(i) for i in d.unit_ids] != [str(i) for i in truth["unit_id"]]:
            raise DatasetError(f"replicate {stem}: unit ids differ between data and truth")
        rid = int(stem[3:]) if stem.startswith("rep") and stem[3:].isdigit() else len(rows)
        label = args.label_by_dir and dd.name or draws.kind.value
        rows.extend(replicate_metrics(draws, d, truth, label, rid, args.effect_truth))
    table = rows_to_frame(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mp = out / "metrics.csv"
    table.to_csv(mp, index=False, float_format="%.17g")
    outputs = [mp]
    models = list(dict.fromkeys(table.model))
    a = args.model_a or (models[0] if models else None)
    b = args.model_b or (models[1] if len(models) > 1 else None)
    if a and b:
        comp = comparison_table(table, a, b)
        cp = out / "comparison.csv"
        comp.to_csv(cp, index=False, float_format="%.10g")
        outputs.append(cp)
    write_manifest(out, "evaluate", {"draws": [str(p) for p in args.draws], "truth": str(truth_dir),
                                     "effect_truth": args.effect_truth}, 0, outputs, started)
    print(f"wrote {len(table)} metric rows to {mp}")
    return EXIT_OK


def _csv_list(raw: str) -> list[str]:
    return [s.strip() for s in str(raw).split(",") if s.strip()]


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = _merge(args, ("seed", "reps", "workers"))
    if args.axis is not None:
        cfg["axis"] = args.axis
    if args.values is not None:
        cfg["values"] = args.values
    if args.models is not None:
        cfg["models"] = args.models
    axis = cfg.get("axis")
    if axis is None:
        raise ConfigError("sweep needs an axis (config key 'axis' or --axis)")
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    values = _csv_list(cfg.get("values", ""))
    if not values:
        raise ConfigError("sweep needs a non-empty value list")
    models = tuple(str(ModelKind.parse(m).value) for m in _csv_list(cfg.get("models", "bcf,abcf")))
    dgp = dgp_from(cfg)
    base = Scenario("base", dgp, models, cfg.get("reps", 30), dgp.seed,
                    tuple(sorted(fit_overrides(cfg).items())), cfg.get("effect_truth", "tau+v"))
    parsed = values if axis == "model_kind" else [float(v) for v in values]
    scenarios = sweep_scenarios(base, axis, parsed)
    out = Path(args.out)
    cache = Path(args.cache) if args.cache else out / "cache"
    table = run_study(scenarios, cache, workers=cfg.get("workers", 1))
    outputs = []
    for scn in scenarios:
        sdir = out / re.sub(r"[^A-Za-z0-9_.=-]", "_", scn.name)
        sdir.mkdir(parents=True, exist_ok=True)
        sub = table[table.scenario == scn.name]
        p = sdir / "metrics.csv"
        sub.to_csv(p, index=False, float_format="%.17g")
        outputs.append(p)
        if len(scn.models) == 2:
            cp = sdir / "comparison.csv"
            comparison_table(sub, *scn.models).to_csv(cp, index=False, float_format="%.10g")
            outputs.append(cp)
    combined = out / "sweep_metrics.csv"
    table.to_csv(combined, index=False, float_format="%.17g")
    summary = out / "sweep_summary.csv"
    metric_summary(table).to_csv(summary, index=False, float_format="%.10g")
    outputs += [combined, summary]
    snap = {"axis": axis, "values": values, "models": list(models), "reps": base.n_reps,
            "dgp": _snapshot(dgp), "fit": _snapshot(base.fit_config(models[0], 0))}
    snap["fit"].pop("seed", None)
    write_manifest(out, "sweep", snap, dgp.seed, outputs, started)
    print(f"wrote {len(scenarios)} scenario(s) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="abcf", description="Aggregate Bayesian causal forests: simulate, fit, evaluate, sweep.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate replicate datasets with known truth")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--residual-share", type=float, dest="residual_share")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit one model to one dataset")
    f.add_argument("data")
    f.add_argument("--config")
    f.add_argument("--seed", type=int)
    f.add_argument("--model", choices=[k.value for k in ModelKind])
    f.add_argument("--psi", type=float)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="score fitted draws against simulation truth")
    e.add_argument("--draws", nargs="+", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--model-a", dest="model_a")
    e.add_argument("--model-b", dest="model_b")
    e.add_argument("--label-by-dir", action="store_true", help="label models by draws directory name")
    e.add_argument("--effect-truth", choices=["tau+v", "tau"], default="tau+v")
    e.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="run a replicated study along one scenario axis")
    w.add_argument("--config")
    w.add_argument("--seed", type=int)
    w.add_argument("--reps", type=int)
    w.add_argument("--workers", type=int)
    w.add_argument("--axis", choices=AXES)
    w.add_argument("--values", help="comma-separated")
    w.add_argument("--models", help="comma-separated, e.g. bcf,abcf")
    w.add_argument("--cache", help="fit cache directory (default OUT/cache)")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError, pd.errors.ParserError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, NonPositiveVariance, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
