"""Replicate-level accuracy, interval and ranking metrics plus paired model comparison.

Point estimates are posterior means. Interval endpoints are the 5% and 95%
sample quantiles with linear interpolation between order statistics, and
intervals are closed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .data import ModelKind, PosteriorDraws

LEVEL = (0.05, 0.95)
ESTIMANDS = ("SATT", "UTE", "sigma_u", "exemplar")


@dataclass(frozen=True)
class MetricRow:
    replicate_id: int
    model: str
    estimand: str
    metric: str
    value: float


def _interval(draws: np.ndarray, axis=0):
    lo, hi = np.quantile(draws, LEVEL, axis=axis)
    return lo, hi


def ute_draws(draws: PosteriorDraws) -> np.ndarray:
    """Per-draw unit effects; iBCF adds the unit's own random effect on treatment."""
    if draws.v is not None:
        return draws.tau + draws.v
    return draws.tau


def ute_metrics(draws: PosteriorDraws, truth_effect, treated) -> dict:
    """RMSE, mean 90% width and coverage over treated units.

    ``truth_effect`` is the per-unit effect to score against (``tau + v`` by
    default in the study harness).
    """
    t = np.asarray(treated, dtype=bool)
    if not t.any():
        raise ValueError("no treated units")
    if draws.n_kept == 0:
        raise ValueError("empty draw set")
    d = ute_draws(draws)[:, t]
    truth = np.asarray(truth_effect, dtype=float)[t]
    est = d.mean(axis=0)
    lo, hi = _interval(d)
    return {"rmse": float(np.sqrt(np.mean((est - truth) ** 2))),
            "width90": float(np.sum(hi - lo) / t.sum()),
            "covered90": float(np.mean((lo <= truth) & (truth <= hi)))}


def satt_draws(effect_draws: np.ndarray, treated, w) -> np.ndarray:
    t = np.asarray(treated, dtype=bool)
    ww = np.asarray(w, dtype=float)[t]
    return effect_draws[:, t] @ ww / ww.sum()


def satt_metrics(draws: PosteriorDraws, true_satt: float, treated, w) -> dict:
    """Posterior of the w-weighted treated-unit mean effect, scored against ``true_satt``."""
    t = np.asarray(treated, dtype=bool)
    if not t.any():
        raise ValueError("no treated units")
    s = satt_draws(ute_draws(draws), t, w)
    est = float(s.mean())
    lo, hi = _interval(s)
    return {"estimate": est, "squared_error": (est - true_satt) ** 2, "width90": float(hi - lo),
            "covered90": float(lo <= true_satt <= hi)}


def exemplar_draws(draws: PosteriorDraws, y=None, z=None) -> np.ndarray:
    """Per-draw unexplained performance: residual for BCF, ``u`` (+ ``z v``) otherwise."""
    if draws.kind is ModelKind.BCF:
        if y is None or z is None:
            raise ValueError("bcf exemplar scores need y and z")
        return np.asarray(y, dtype=float)[None, :] - draws.fitted(z)
    if draws.v is not None:
        if z is None:
            raise ValueError("ibcf exemplar scores need z")
        return draws.u + np.asarray(z)[None, :] * draws.v
    return draws.u


def top_quartile_precision(estimate, truth) -> float:
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    n = estimate.shape[0]
    if n < 4:
        raise ValueError("need at least 4 units to form quartiles")
    k = n // 4
    top_est = set(np.argsort(-estimate, kind="stable")[:k].tolist())
    top_true = set(np.argsort(-truth, kind="stable")[:k].tolist())
    return len(top_est & top_true) / k


def exemplar_metrics(score_draws: np.ndarray, truth) -> dict:
    """Accuracy of unit-level unexplained performance, plus top-quartile precision.

    ``truth`` is the realized ``u + z v`` per unit.
    """
    score_draws = np.atleast_2d(score_draws)
    truth = np.asarray(truth, dtype=float)
    if truth.shape[0] < 4:
        raise ValueError("need at least 4 units to form quartiles")
    est = score_draws.mean(axis=0)
    lo, hi = _interval(score_draws)
    return {"rmse": float(np.sqrt(np.mean((est - truth) ** 2))),
            "width90": float(np.mean(hi - lo)),
            "covered90": float(np.mean((lo <= truth) & (truth <= hi))),
            "top_quartile_precision": top_quartile_precision(est, truth)}


def sigma_u_metrics(draws: PosteriorDraws, true_sigma_u: float) -> dict:
    if draws.kind is ModelKind.BCF:
        raise ValueError("sigma_u is not sampled by bcf")
    s = draws.sigma_u
    est = float(s.mean())
    lo, hi = _interval(s)
    return {"estimate": est, "squared_error": (est - true_sigma_u) ** 2, "width90": float(hi - lo),
            "covered90": float(lo <= true_sigma_u <= hi)}


def replicate_metrics(draws: PosteriorDraws, dataset, truth: dict, model: str, replicate_id: int,
                      effect_truth: str = "tau+v") -> list[MetricRow]:
    """All metric rows for one fit. ``truth`` holds arrays ``tau, u, v`` and scalars ``satt, sigma_u``."""
    z = np.asarray(dataset.z)
    treated = z == 1
    tau, u, v = (np.asarray(truth[k], dtype=float) for k in ("tau", "u", "v"))
    effect = tau + v if effect_truth == "tau+v" else tau
    rows = []

    def add(estimand, vals):
        for k, val in vals.items():
            rows.append(MetricRow(replicate_id, model, estimand, k, float(val)))

    add("UTE", ute_metrics(draws, effect, treated))
    if effect_truth == "tau+v":
        add("UTE_tau_only", {"covered90": ute_metrics(draws, tau, treated)["covered90"]})
    add("SATT", satt_metrics(draws, float(truth["satt"]), treated, dataset.w))
    add("exemplar", exemplar_metrics(exemplar_draws(draws, dataset.y, z), u + z * v))
    if draws.kind is not ModelKind.BCF and truth.get("sigma_u") is not None:
        add("sigma_u", sigma_u_metrics(draws, float(truth["sigma_u"])))
    if draws.kind is ModelKind.IBCF:
        add("sigma_v", {"estimate": float(draws.sigma_v.mean())})
        add("rho", {"estimate": float(draws.rho.mean())})
    return rows


def rows_to_frame(rows) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=["replicate_id", "model", "estimand", "metric", "value"])


@dataclass(frozen=True)
class Comparison:
    estimand: str
    metric: str
    model_a: str
    model_b: str
    mean_a: float
    mean_b: float
    difference: float
    se: float
    t: float
    p_value: float
    significant: bool
    n_reps: int

    @property
    def pct(self) -> float:
        """Relative change of b versus a, in percent of a's mean."""
        return 100.0 * self.difference / self.mean_a if self.mean_a else float("nan")


def compare_models(table: pd.DataFrame, estimand: str, metric: str, model_a: str, model_b: str,
                   alpha: float = 0.05) -> Comparison:
    """Replicate fixed-effects contrast of ``model_b`` against ``model_a``.

    With two models the fixed-effects slope equals the mean paired difference
    and its standard error is ``sd(d) / sqrt(R)`` on ``R - 1`` degrees of freedom.
    """
    sel = table[(table.estimand == estimand) & (table.metric == metric)]
    a = sel[sel.model == model_a].set_index("replicate_id")["value"]
    b = sel[sel.model == model_b].set_index("replicate_id")["value"]
    if a.index.duplicated().any() or b.index.duplicated().any():
        raise ValueError("more than one row per replicate and model")
    if set(a.index) != set(b.index):
        raise ValueError(f"unmatched replicate sets for {model_a} and {model_b}")
    if len(a) == 0:
        raise ValueError(f"no rows for {estimand}/{metric}")
    b = b.loc[a.index]
    d = (b - a).to_numpy(float)
    r = d.shape[0]
    gamma = float(d.mean())
    se = float(d.std(ddof=1) / np.sqrt(r)) if r > 1 else float("nan")
    if r < 2:
        t, p = float("nan"), float("nan")
    elif se > 0:
        t = gamma / se
        p = float(2 * stats.t.sf(abs(t), r - 1))
    else:
        t = 0.0 if gamma == 0 else float(np.sign(gamma) * np.inf)
        p = 1.0 if gamma == 0 else 0.0
    return Comparison(estimand, metric, model_a, model_b, float(a.mean()), float(b.mean()), gamma, se, t, p,
                      bool(p < alpha), r)


def fixed_effects_gamma(table: pd.DataFrame, estimand: str, metric: str, model_a: str, model_b: str):
    """Least-squares fit of ``m = delta_r + gamma * 1[model_b]``; returns ``(gamma, se)``."""
    sel = table[(table.estimand == estimand) & (table.metric == metric) & table.model.isin([model_a, model_b])]
    reps = sorted(sel.replicate_id.unique())
    idx = {r: i for i, r in enumerate(reps)}
    X = np.zeros((len(sel), len(reps) + 1))
    for row, (rid, mdl) in enumerate(zip(sel.replicate_id, sel.model)):
        X[row, idx[rid]] = 1.0
        X[row, -1] = float(mdl == model_b)
    y = sel.value.to_numpy(float)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = len(y) - X.shape[1]
    s2 = resid @ resid / dof
    cov = s2 * np.linalg.pinv(X.T @ X)
    return float(coef[-1]), float(np.sqrt(cov[-1, -1]))


COMPARISONS = (
    ("SATT", "squared_error"), ("SATT", "width90"), ("SATT", "covered90"),
    ("UTE", "rmse"), ("UTE", "width90"), ("UTE", "covered90"),
    ("exemplar", "rmse"), ("exemplar", "width90"), ("exemplar", "covered90"),
    ("exemplar", "top_quartile_precision"),
)


def comparison_table(table: pd.DataFrame, model_a: str, model_b: str, pairs=COMPARISONS) -> pd.DataFrame:
    """Summary rows ``estimand, metric, mean_a, mean_b, difference, SE, significant, pct``.

    ``pct`` is the change of b relative to a; negative means b is lower.
    """
    out = []
    present = set(zip(table.estimand, table.metric))
    for est, met in pairs:
        if (est, met) not in present:
            continue
        c = compare_models(table, est, met, model_a, model_b)
        out.append({"estimand": est, "metric": met, "model_a": model_a, "model_b": model_b,
                    "mean_a": c.mean_a, "mean_b": c.mean_b, "difference": c.difference, "SE": c.se,
                    "p_value": c.p_value, "significant": c.significant, "pct": c.pct})
    return pd.DataFrame(out)
