"""Single-chain MCMC driver: forests, treatment scales, variance parameters,
post-hoc random effects.

Sampling runs on the outcome standardized by its w-weighted mean and sd; all
recorded draws are mapped back to natural units.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import forest as fr
from .data import AggregateDataset, FitConfig, ModelKind, PosteriorDraws, weighted_mean, weighted_sd
from .random_effects import draw_u, draw_uv
from .variance import (
    DEFAULT_PROPOSAL_SD,
    PARAMS,
    PriorSpec,
    VarianceState,
    _ols_residual_variance,
    adapt_proposals,
    calibrate_sigma_eps_prior,
    default_sigma_u_prior,
    mh_update,
    sigma_j_squared,
)

REFRESH_EVERY = 100
FLAG_RANGE = (0.2, 0.7)


class NumericalFailure(RuntimeError):
    pass


@dataclass
class ChainState:
    forests: fr.ForestState
    variance: VarianceState
    iteration: int = 0
    phase: str = "burn-in"

    @property
    def adapting(self) -> bool:
        return self.phase == "burn-in"


@dataclass
class Standardization:
    center: float
    scale: float

    def to_std(self, y):
        return (np.asarray(y, dtype=float) - self.center) / self.scale

    def variance_to_natural(self, vs: VarianceState) -> dict:
        s = self.scale
        return {"sigma_eps2": vs.sigma_eps2 * s * s, "sigma_u": vs.sigma_u * s,
                "sigma_v": vs.sigma_v * s, "rho": vs.rho}


@dataclass
class FitSetup:
    """Everything a chain needs besides its state, on the standardized scale."""

    kind: ModelKind
    std: Standardization
    y: np.ndarray
    w: np.ndarray
    z: np.ndarray
    priors: PriorSpec
    free: tuple
    extra: dict = field(default_factory=dict)


def _default_proposal_sd(n: int) -> dict:
    # random-walk scales shrink like n^-1/2; anchored at n = 500
    k = math.sqrt(500.0 / n)
    return {p: DEFAULT_PROPOSAL_SD[p] * (k if p in ("sigma_eps2", "sigma_u") else 1.0) for p in PARAMS}


def prepare(d: AggregateDataset, cfg: FitConfig) -> FitSetup:
    kind = cfg.model_kind
    if kind is not ModelKind.BCF and np.all(d.w == d.w[0]):
        warnings.warn("constant unit sizes: the split between sigma_u and sigma_eps rests on the prior alone",
                      RuntimeWarning, stacklevel=3)
    center = weighted_mean(d.y, d.w)
    scale = weighted_sd(d.y, d.w)
    if not scale > 0:
        raise ValueError("outcome has zero weighted variance")
    std = Standardization(center, scale)
    nu, lam = calibrate_sigma_eps_prior(d, kind, cfg.nu, cfg.q)
    s_u = cfg.sigma_u_prior_scale
    if s_u is None:
        s_u = default_sigma_u_prior(d, cfg.sigma_u_prior_scale_multiplier)
    priors = PriorSpec(nu=nu, lam=lam / scale**2, s_u=s_u / scale, psi=cfg.psi / scale, sd_y=1.0)
    free = tuple(p for p in kind.free_parameters if p not in cfg.fixed)
    return FitSetup(kind, std, std.to_std(d.y), np.asarray(d.w, dtype=float), np.asarray(d.z, dtype=np.int8),
                    priors, free, {"lam_natural": lam, "s_u_natural": s_u})


def initial_variance(d: AggregateDataset, cfg: FitConfig, setup: FitSetup) -> VarianceState:
    kind = setup.kind
    s2 = _ols_residual_variance(setup.y, d.X)
    if s2 is None or not s2 > 0:
        s2 = 1.0
    pins = {k: v for k, v in cfg.fixed.items()}
    sc = setup.std.scale
    if "sigma_u" in pins:
        su = pins["sigma_u"] / sc
    else:
        su = math.sqrt(0.25 * s2) if kind is not ModelKind.BCF else 0.0
    if "sigma_eps2" in pins:
        se2 = pins["sigma_eps2"] / sc**2
    elif kind is ModelKind.BCF:
        se2 = s2
    else:
        se2 = max(s2 - su * su, 0.1 * s2) * float(np.mean(setup.w))
    sv, rho = 0.0, 0.0
    if kind is ModelKind.IBCF:
        sv = pins["sigma_v"] / sc if "sigma_v" in pins else setup.priors.s_v(su) * math.sqrt(2 / math.pi)
        rho = float(pins.get("rho", 0.0))
    psd = _default_proposal_sd(d.n)
    psd.update(cfg.initial_proposal_sd)
    vs = VarianceState(se2, su, sv, rho, proposal_sd=psd)
    vs.check(kind)
    return vs


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def _check_finite(state: ChainState) -> None:
    vals = state.variance.values()
    f = state.forests
    if not (np.all(np.isfinite(f.mu.fit)) and np.all(np.isfinite(f.tau.fit))
            and math.isfinite(f.b0) and math.isfinite(f.b1)
            and all(math.isfinite(v) for v in vals.values())):
        raise NumericalFailure(f"non-finite chain state at iteration {state.iteration} ({state.phase}): {vals}")


def gibbs_sweep(state: ChainState, setup: FitSetup, rng_tree, rng_var) -> None:
    """One full iteration of the sampler (no recording, no adaptation)."""
    f, vs = state.forests, state.variance
    y, w, z = setup.y, setup.w, setup.z
    prec = 1.0 / sigma_j_squared(vs, w, z, setup.kind)
    fr.update_forest(f, "mu", y - f.b * f.tau.fit, prec, rng_tree)
    fr.update_forest(f, "tau", y - f.mu.fit, prec, rng_tree)
    fr.update_treatment_scales(f, y - f.mu.fit, prec, rng_tree)
    resid = y - f.f_fit
    for p in PARAMS:
        if p in setup.free:
            mh_update(p, vs, setup.priors, resid, w, z, setup.kind, rng_var, free=setup.free)


def fit(d: AggregateDataset, cfg: FitConfig, *, return_state: bool = False):
    """Run one chain and return :class:`PosteriorDraws` (and the final state if asked)."""
    setup = prepare(d, cfg)
    vs = initial_variance(d, cfg, setup)
    state = ChainState(fr.init_forests(d, cfg), vs)
    rng_tree, rng_var, rng_post = _streams(cfg.seed)
    kind, sc, n = setup.kind, setup.std.scale, d.n
    kept = cfg.n_kept
    out = {k: np.empty((kept, n)) for k in ("mu", "tau", "u")}
    out_v = np.empty((kept, n)) if kind is ModelKind.IBCF else None
    traces = {k: np.empty(kept) for k in ("sigma_eps", "sigma_u", "sigma_v", "rho")}
    k = 0
    total = cfg.n_burn + cfg.n_draw
    for it in range(total):
        state.iteration = it
        if it == cfg.n_burn:
            state.phase = "sampling"
            for p in PARAMS:
                vs.accept_count[p] = 0
                vs.attempt_count[p] = 0
        gibbs_sweep(state, setup, rng_tree, rng_var)
        if (it + 1) % REFRESH_EVERY == 0:
            state.forests.mu.refresh()
            state.forests.tau.refresh()
        _check_finite(state)
        if state.adapting and cfg.adapt and (it + 1) % cfg.adapt_every == 0:
            adapt_proposals(vs, cfg.target_accept, 0.1, setup.free)
        if state.adapting:
            continue
        j = it - cfg.n_burn
        if (j + 1) % cfg.thinning or k >= kept:
            continue
        f = state.forests
        resid = setup.y - f.f_fit
        if kind is ModelKind.IBCF:
            re = draw_uv(resid, vs, setup.w, setup.z, rng_post)
            u, v = re.u, re.v
            out_v[k] = v * sc
        elif kind is ModelKind.ABCF:
            u = draw_u(resid, vs, setup.w, rng_post)
        else:
            u = np.zeros(n)
        out["mu"][k] = setup.std.center + sc * f.mu_fit
        out["tau"][k] = sc * f.tau_fit
        out["u"][k] = sc * u
        traces["sigma_eps"][k] = math.sqrt(vs.sigma_eps2) * sc
        traces["sigma_u"][k] = vs.sigma_u * sc
        traces["sigma_v"][k] = vs.sigma_v * sc
        traces["rho"][k] = vs.rho
        k += 1
    acc = {p: (vs.accept_count[p] / vs.attempt_count[p]) for p in setup.free if vs.attempt_count[p]}
    draws = PosteriorDraws(kind=kind, mu=out["mu"], tau=out["tau"], u=out["u"], v=out_v,
                           acceptance=acc, proposal_sd={p: vs.proposal_sd[p] for p in setup.free},
                           unit_ids=tuple(d.unit_ids), **traces)
    if return_state:
        return draws, state
    return draws


@dataclass
class FitReport:
    acceptance: dict
    proposal_sd: dict
    flagged: list
    summaries: dict

    def to_dict(self) -> dict:
        return {"acceptance": self.acceptance, "proposal_sd": self.proposal_sd,
                "flagged": self.flagged, "summaries": self.summaries}


def fit_report(draws: PosteriorDraws, flag_range: tuple = FLAG_RANGE) -> FitReport:
    """Post-burn acceptance rates, final proposal sds and trace summaries."""
    if draws.n_kept == 0:
        raise ValueError("nothing to report: no retained draws")
    lo, hi = flag_range
    flagged = sorted(p for p, r in draws.acceptance.items() if not lo <= r <= hi)
    summaries = {}
    for name in ("sigma_eps", "sigma_u", "sigma_v", "rho"):
        x = getattr(draws, name)
        summaries[name] = {"mean": float(np.mean(x)), "sd": float(np.std(x)),
                           "q05": float(np.quantile(x, 0.05)), "q95": float(np.quantile(x, 0.95))}
    satt_ref = draws.tau.mean(axis=1)
    summaries["mean_tau"] = {"mean": float(satt_ref.mean()), "sd": float(satt_ref.std())}
    return FitReport(dict(draws.acceptance), dict(draws.proposal_sd), flagged, summaries)


# ---------------------------------------------------------------------------
# draw files

SCALARS = ("sigma_eps", "sigma_u", "sigma_v", "rho")
WIDE = ("mu", "tau", "u", "v")


def write_draws(draws: PosteriorDraws, out_dir: str | Path) -> dict:
    """``scalars.csv`` (one row per retained iteration) plus one wide CSV per unit-level array."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = [str(i) for i in draws.unit_ids] or [str(j + 1) for j in range(draws.n)]
    paths = {}
    sc = pd.DataFrame({"iteration": np.arange(draws.n_kept), **{k: getattr(draws, k) for k in SCALARS}})
    paths["scalars"] = out_dir / "scalars.csv"
    sc.to_csv(paths["scalars"], index=False, float_format="%.17g")
    for name in WIDE:
        arr = getattr(draws, name)
        if arr is None:
            continue
        paths[name] = out_dir / f"{name}.csv"
        pd.DataFrame(arr, columns=ids).to_csv(paths[name], index=False, float_format="%.17g")
    meta = {"kind": draws.kind.value, "acceptance": draws.acceptance, "proposal_sd": draws.proposal_sd,
            "unit_ids": ids}
    paths["meta"] = out_dir / "draws_meta.json"
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}


def read_draws(out_dir: str | Path) -> PosteriorDraws:
    out_dir = Path(out_dir)
    meta_path = out_dir / "draws_meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no draws in {out_dir}")
    meta = json.loads(meta_path.read_text())
    sc = pd.read_csv(out_dir / "scalars.csv", float_precision="round_trip")
    arrays = {}
    for name in WIDE:
        p = out_dir / f"{name}.csv"
        arrays[name] = pd.read_csv(p, float_precision="round_trip").to_numpy(float) if p.exists() else None
    return PosteriorDraws(kind=ModelKind.parse(meta["kind"]), mu=arrays["mu"], tau=arrays["tau"], u=arrays["u"],
                          v=arrays["v"], acceptance=meta["acceptance"], proposal_sd=meta["proposal_sd"],
                          unit_ids=tuple(meta["unit_ids"]),
                          **{k: sc[k].to_numpy(float) for k in SCALARS})
