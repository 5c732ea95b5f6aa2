"""Synthetic aggregate-unit data with known unit effects and random effects."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd
from scipy import stats

from .data import AggregateDataset, write_dataset

W_MEDIAN = 437.0
W_IQR = (257.0, 768.0)
W_RANGE = (60, 3500)
W_BAR_NOMINAL = 608.0

_Q75 = stats.norm.ppf(0.75)


@dataclass(frozen=True)
class DgpConfig:
    """Simulation settings. ``sd_y_target`` is descriptive only; the outcome
    sd follows from the component sds.

    ``residual_share_override`` re-solves ``(sigma_u, sigma_eps)`` so that
    ``sigma_u^2 / (sigma_u^2 + sigma_eps^2 / w_bar_nominal)`` equals the share
    while the total holds at its default value.
    """

    n_units: int = 3000
    n_treated: int = 1000
    p: int = 5
    sd_y_target: float = 147.0
    sd_tau_target: float = 17.0
    sd_mu_target: float = 83.0
    sigma_u: float = 61.0
    sigma_eps: float = 2557.0
    sigma_v: float = 8.0
    rho: float = 0.0
    residual_share_override: float | None = None
    w_bar_nominal: float = W_BAR_NOMINAL
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.n_treated < self.n_units:
            raise ValueError("need 0 < n_treated < n_units")
        if self.p < 5:
            raise ValueError("the outcome surfaces use five covariates; p must be >= 5")
        for name in ("sd_y_target", "sd_tau_target", "sd_mu_target", "sigma_u", "sigma_eps", "sigma_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")
        s = self.residual_share_override
        if s is not None and not 0 <= s <= 1:
            raise ValueError("residual_share_override must lie in [0, 1]")

    @classmethod
    def desk(cls, **kw) -> "DgpConfig":
        """500 units with one third treated."""
        kw.setdefault("n_units", 500)
        kw.setdefault("n_treated", round(kw["n_units"] / 3))
        return cls(**kw)

    def effective_scales(self) -> tuple[float, float]:
        """``(sigma_u, sigma_eps)`` after any residual-share override."""
        s = self.residual_share_override
        if s is None:
            return self.sigma_u, self.sigma_eps
        total = self.sigma_u**2 + self.sigma_eps**2 / self.w_bar_nominal
        return math.sqrt(s * total), math.sqrt((1.0 - s) * total * self.w_bar_nominal)

    def icc(self) -> float:
        su, se = self.effective_scales()
        den = su**2 + se**2
        return su**2 / den if den > 0 else 0.0

    def residual_share(self, w_bar: float | None = None) -> float:
        """Average share of a unit's residual variance due to ``sigma_u``."""
        su, se = self.effective_scales()
        w_bar = self.w_bar_nominal if w_bar is None else w_bar
        den = su**2 + se**2 / w_bar
        return su**2 / den if den > 0 else 0.0


@dataclass
class Replicate:
    dataset: AggregateDataset
    mu: np.ndarray
    tau: np.ndarray
    u: np.ndarray
    v: np.ndarray
    eps: np.ndarray
    satt: float
    replicate_id: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def ute(self) -> np.ndarray:
        """Realized unit effect ``tau + v``."""
        return self.tau + self.v

    def reconstruct(self) -> np.ndarray:
        z = self.dataset.z
        return self.mu + z * self.tau + self.u + z * self.v + self.eps

    def truth_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "unit_id": list(self.dataset.unit_ids),
            "mu": self.mu, "tau": self.tau, "u": self.u, "v": self.v, "eps": self.eps,
        })


def _lognormal_params():
    mu = math.log(W_MEDIAN)
    sigma = (math.log(W_IQR[1]) - math.log(W_IQR[0])) / (2 * _Q75)
    return mu, sigma


def sample_unit_sizes(n: int, rng: np.random.Generator) -> np.ndarray:
    """Integer unit sizes from a log-normal truncated to [60, 3500] by resampling."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mu, sigma = _lognormal_params()
    lo, hi = W_RANGE
    out = np.rint(rng.lognormal(mu, sigma, n))
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = np.rint(rng.lognormal(mu, sigma, int(bad.sum())))
        bad = (out < lo) | (out > hi)
    return out


def propensity(X: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    return stats.norm.cdf(1.0 - 2.0 * (X[:, 0] > X[:, 1]) + zeta)


def assign_treatment(X: np.ndarray, n_treated: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Select exactly ``n_treated`` units without replacement, inclusion weights ``pi``."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 0 < n_treated < n:
        raise ValueError("need 0 < n_treated < n")
    zeta = rng.uniform(-0.05, 0.05, n)
    pi = propensity(X, zeta)
    idx = rng.choice(n, size=n_treated, replace=False, p=pi / pi.sum())
    z = np.zeros(n, dtype=np.int8)
    z[idx] = 1
    return z, pi


def raw_prognostic(X: np.ndarray) -> np.ndarray:
    return 6.0 - 12.0 * (X[:, 1] > 0) + np.abs(X[:, 0] - 1.0) + 3.0 * X[:, 4]


def raw_effect(X: np.ndarray) -> np.ndarray:
    return 1.0 + X[:, 2] + 0.75 * X[:, 3]


def rescale(x: np.ndarray, target_sd: float) -> np.ndarray:
    """Affine map to population sd ``target_sd`` with the mean kept."""
    sd = np.std(x)
    if not sd > 0:
        raise ValueError("degenerate covariates: surface has zero spread")
    m = x.mean()
    return m + (x - m) * (target_sd / sd)


def true_satt(tau, v, z, w) -> float:
    t = np.asarray(z) == 1
    w = np.asarray(w, dtype=float)
    return float(np.sum(w[t] * (tau[t] + v[t])) / np.sum(w[t]))


def gen_outcomes(X, z, w, cfg: DgpConfig, rng: np.random.Generator, pi=None, replicate_id: int = 0) -> Replicate:
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=np.int8)
    w = np.asarray(w, dtype=float)
    n = X.shape[0]
    if z.shape != (n,) or w.shape != (n,):
        raise ValueError("X, z and w disagree on the number of units")
    mu = rescale(raw_prognostic(X), cfg.sd_mu_target)
    tau = rescale(raw_effect(X), cfg.sd_tau_target)
    su, se = cfg.effective_scales()
    sv = cfg.sigma_v
    g = rng.standard_normal((n, 2))
    u = su * g[:, 0]
    v = sv * (cfg.rho * g[:, 0] + math.sqrt(1.0 - cfg.rho**2) * g[:, 1])
    eps = se / np.sqrt(w) * rng.standard_normal(n)
    y = mu + z * tau + u + z * v + eps
    if pi is None:
        pi = np.full(n, 0.5)
    d = AggregateDataset(y=y, z=z, w=w, X=X, pi=np.asarray(pi, dtype=float))
    meta = {"replicate_id": replicate_id, "sigma_u": su, "sigma_eps": se, "sigma_v": sv, "rho": cfg.rho,
            "icc": cfg.icc(), "residual_share": cfg.residual_share(float(w.mean()))}
    return Replicate(d, mu, tau, u, v, eps, true_satt(tau, v, z, w), replicate_id, meta)


def replicate_rng(base_seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(r,)))


def make_replicate(cfg: DgpConfig, r: int, base_seed: int | None = None) -> Replicate:
    """Replicate ``r``, generated independently of the others."""
    rng = replicate_rng(cfg.seed if base_seed is None else base_seed, r)
    n = cfg.n_units
    w = sample_unit_sizes(n, rng)
    X = rng.standard_normal((n, cfg.p))
    z, pi = assign_treatment(X, cfg.n_treated, rng)
    return gen_outcomes(X, z, w, cfg, rng, pi=pi, replicate_id=r)


def make_replicates(cfg: DgpConfig, n_reps: int, base_seed: int | None = None) -> Iterator[Replicate]:
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    for r in range(n_reps):
        yield make_replicate(cfg, r, base_seed)


def write_replicate(rep: Replicate, out_dir: str | Path) -> dict:
    """Dataset CSV, truth CSV and a JSON sidecar; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"rep{rep.replicate_id:04d}"
    paths = {"data": out_dir / f"{stem}_data.csv", "truth": out_dir / f"{stem}_truth.csv",
             "meta": out_dir / f"{stem}_meta.json"}
    write_dataset(rep.dataset, paths["data"])
    rep.truth_frame().to_csv(paths["truth"], index=False, float_format="%.17g")
    meta = dict(rep.metadata, satt=rep.satt)
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}


def read_truth(truth_path: str | Path, meta_path: str | Path | None = None) -> dict:
    """Truth columns as arrays, plus ``satt`` and metadata when the sidecar exists."""
    truth_path = Path(truth_path)
    df = pd.read_csv(truth_path, dtype={"unit_id": str}, float_precision="round_trip")
    out = {c: df[c].to_numpy(float) for c in ("mu", "tau", "u", "v", "eps") if c in df}
    out["unit_id"] = df["unit_id"].tolist()
    if meta_path is None:
        meta_path = truth_path.with_name(truth_path.name.replace("_truth.csv", "_meta.json"))
    meta_path = Path(meta_path)
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        out["satt"] = meta.get("satt")
        out["metadata"] = meta
    return out


def config_dict(cfg: DgpConfig) -> dict:
    return asdict(cfg)


def with_overrides(cfg: DgpConfig, **kw) -> DgpConfig:
    return replace(cfg, **kw)
