"""Replicated simulation studies: simulate, fit each model, score, cache."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import FitConfig, ModelKind
from .dgp import DgpConfig, make_replicate
from .evaluation import MetricRow, replicate_metrics, rows_to_frame
from .fit import fit


@dataclass(frozen=True)
class Scenario:
    """One cell of a study: a DGP, the models fit to it and fit-setting overrides.

    Replicate ``r`` of every scenario sharing ``base_seed`` and DGP settings
    is the same dataset, so model and prior contrasts are paired.
    """

    name: str
    dgp: DgpConfig
    models: tuple = ("bcf", "abcf")
    n_reps: int = 30
    base_seed: int = 0
    fit_overrides: tuple = ()
    effect_truth: str = "tau+v"

    def fit_config(self, model: str, r: int) -> FitConfig:
        kw = dict(self.fit_overrides)
        kw["model_kind"] = model
        kw["seed"] = fit_seed(self.base_seed, r)
        return FitConfig(**kw)


def fit_seed(base_seed: int, r: int) -> int:
    return int(np.random.SeedSequence(base_seed, spawn_key=(r, 1)).generate_state(1)[0])


RESULT_MODULES = ("data", "forest", "variance", "random_effects", "dgp", "fit", "evaluation", "study")


def source_digest() -> str:
    """Hash of the modules that determine fit results; cached fits are keyed on it."""
    h = hashlib.sha256()
    for f in (Path(__file__).parent / f"{m}.py" for m in RESULT_MODULES):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _key(scn: Scenario, model: str, r: int) -> str:
    cfg = asdict(scn.fit_config(model, r))
    cfg["model_kind"] = str(ModelKind.parse(model).value)
    payload = {"dgp": asdict(scn.dgp), "fit": cfg, "r": r, "base_seed": scn.base_seed,
               "effect_truth": scn.effect_truth, "version": __version__, "source": source_digest()}
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def truth_of(rep) -> dict:
    return {"tau": rep.tau, "u": rep.u, "v": rep.v, "satt": rep.satt, "sigma_u": rep.metadata["sigma_u"]}


def run_one(scn: Scenario, model: str, r: int) -> list[MetricRow]:
    rep = make_replicate(scn.dgp, r, scn.base_seed)
    draws = fit(rep.dataset, scn.fit_config(model, r))
    rows = replicate_metrics(draws, rep.dataset, truth_of(rep), model, r, scn.effect_truth)
    for p, rate in draws.acceptance.items():
        rows.append(MetricRow(r, model, "diagnostics", f"accept_{p}", float(rate)))
    return rows


def _task(args):
    scn, model, r, cache_dir = args
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{_key(scn, model, r)}.csv"
        if path.exists():
            return pd.read_csv(path, float_precision="round_trip")
    df = rows_to_frame(run_one(scn, model, r))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        df.to_csv(tmp, index=False, float_format="%.17g")
        tmp.replace(path)
    return df


def run_study(scenarios, cache_dir: str | Path | None = None, workers: int = 1, progress=None) -> pd.DataFrame:
    """Long-format metric rows for every (scenario, replicate, model), with a ``scenario`` column."""
    tasks, names = [], []
    for scn in scenarios:
        for r in range(scn.n_reps):
            for m in scn.models:
                tasks.append((scn, m, r, None if cache_dir is None else str(cache_dir)))
                names.append(scn.name)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            frames = list(ex.map(_task, tasks))
    else:
        frames = []
        for i, t in enumerate(tasks):
            frames.append(_task(t))
            if progress is not None:
                progress(i + 1, len(tasks))
    for name, df in zip(names, frames):
        df.insert(0, "scenario", name)
    if not frames:
        return pd.DataFrame(columns=["scenario", "replicate_id", "model", "estimand", "metric", "value"])
    return pd.concat(frames, ignore_index=True)


AXES = ("prior_multiplier", "residual_share", "model_kind", "sigma_v", "rho", "psi")


def sweep_scenarios(base: Scenario, axis: str, values) -> list[Scenario]:
    """One scenario per value along ``axis``; DGP-free axes keep replicate seeds."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    out = []
    for val in values:
        fo = dict(base.fit_overrides)
        dgp, models = base.dgp, base.models
        if axis == "prior_multiplier":
            fo["sigma_u_prior_scale_multiplier"] = float(val)
        elif axis == "psi":
            fo["psi"] = float(val)
        elif axis == "residual_share":
            dgp = replace(dgp, residual_share_override=float(val))
        elif axis == "sigma_v":
            dgp = replace(dgp, sigma_v=float(val))
        elif axis == "rho":
            dgp = replace(dgp, rho=float(val))
        else:
            models = (str(ModelKind.parse(val).value),)
        out.append(replace(base, name=f"{axis}={val}", dgp=dgp, models=models,
                           fit_overrides=tuple(sorted(fo.items()))))
    return out


def metric_summary(table: pd.DataFrame) -> pd.DataFrame:
    """Mean over replicates by scenario, model, estimand and metric (RMSE added for squared errors)."""
    g = table.groupby(["scenario", "model", "estimand", "metric"], sort=False)["value"]
    s = g.mean().reset_index().rename(columns={"value": "mean"})
    s["n_reps"] = g.size().to_numpy()
    sq = s[s.metric == "squared_error"].copy()
    sq["metric"] = "rmse"
    sq["mean"] = np.sqrt(sq["mean"])
    return pd.concat([s, sq], ignore_index=True)
