"""Compound residual variance: priors, full conditionals and adaptive MH updates.

Unit ``j`` has marginal residual variance

    sigma_j^2 = sigma_eps^2 / w_j + sigma_u^2 + z_j (sigma_v^2 + 2 rho sigma_u sigma_v)

(aBCF drops the ``z_j`` terms; BCF uses ``sigma_eps^2`` alone). Each free
parameter gets a one-dimensional Gaussian random-walk update on a working
scale: log for the scale parameters, atanh for the correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import AggregateDataset, ModelKind, weighted_sd

PARAMS = ("sigma_eps2", "sigma_u", "sigma_v", "rho")

DEFAULT_PROPOSAL_SD = {"sigma_eps2": 0.3, "sigma_u": 0.5, "sigma_v": 2.0, "rho": 1.5}

RHO_CLAMP = 0.999


class NonPositiveVariance(ValueError):
    pass


@dataclass
class VarianceState:
    sigma_eps2: float
    sigma_u: float = 0.0
    sigma_v: float = 0.0
    rho: float = 0.0
    proposal_sd: dict = field(default_factory=lambda: dict(DEFAULT_PROPOSAL_SD))
    accept_count: dict = field(default_factory=lambda: dict.fromkeys(PARAMS, 0))
    attempt_count: dict = field(default_factory=lambda: dict.fromkeys(PARAMS, 0))

    def check(self, kind: ModelKind) -> None:
        if not self.sigma_eps2 > 0:
            raise ValueError("sigma_eps2 must be positive")
        if self.sigma_u < 0 or self.sigma_v < 0:
            raise ValueError("scale parameters must be non-negative")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")
        if kind is ModelKind.BCF and (self.sigma_u or self.sigma_v or self.rho):
            raise ValueError("bcf fixes sigma_u = sigma_v = rho = 0")
        if kind is ModelKind.ABCF and (self.sigma_v or self.rho):
            raise ValueError("abcf fixes sigma_v = rho = 0")

    def values(self) -> dict:
        return {k: getattr(self, k) for k in PARAMS}


@dataclass
class PriorSpec:
    """Prior hyperparameters (all in the units of the outcome they apply to).

    ``sigma_eps2 ~ InvGamma(nu/2, nu*lam/2)``; ``sigma_u ~ N+(0, s_u^2)``;
    ``sigma_v ~ N+(0, (sigma_u * psi / sd_y)^2)``; ``(rho + 1)/2 ~ Beta(2, 2)``.
    """

    nu: float
    lam: float
    s_u: float
    psi: float = 25.0
    sd_y: float = 1.0

    def __post_init__(self):
        for name in ("nu", "lam", "s_u", "psi", "sd_y"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def s_v(self, sigma_u: float) -> float:
        return structured_sigma_v_scale(sigma_u, self.psi, self.sd_y**2)


def _sigma2(sigma_eps2, sigma_u, sigma_v, rho, w, z, kind: ModelKind):
    w = np.asarray(w, dtype=float)
    if kind is ModelKind.BCF:
        return np.full(w.shape, float(sigma_eps2))
    s2 = sigma_eps2 / w + sigma_u**2
    if kind is ModelKind.IBCF:
        s2 = s2 + np.asarray(z) * (sigma_v**2 + 2.0 * rho * sigma_u * sigma_v)
    return s2


def sigma_j_squared(vs: VarianceState, w, z, kind: ModelKind) -> np.ndarray:
    """Per-unit marginal residual variance; raises if any value is not positive."""
    s2 = _sigma2(vs.sigma_eps2, vs.sigma_u, vs.sigma_v, vs.rho, w, z, ModelKind.parse(kind))
    if np.any(~(s2 > 0)):
        raise NonPositiveVariance("compound variance is not positive for this parameter configuration")
    return s2


def sigma_eps2_prior_lambda(s2: float, nu: float = 3.0, q: float = 0.90) -> float:
    """``lam`` such that ``P(sigma^2 <= s2) = q`` under InvGamma(nu/2, nu*lam/2)."""
    return s2 * stats.chi2.ppf(1.0 - q, nu) / nu


def _ols_residual_variance(y, X) -> float | None:
    n = len(y)
    A = np.column_stack([np.ones(n), X])
    if n <= A.shape[1] or np.linalg.matrix_rank(A) < A.shape[1]:
        return None
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(resid @ resid / (n - A.shape[1]))


def calibrate_sigma_eps_prior(d: AggregateDataset, kind: ModelKind | str = ModelKind.ABCF,
                              nu: float = 3.0, q: float = 0.90) -> tuple[float, float]:
    """Inverse-gamma hyperparameters ``(nu, lam)`` for ``sigma_eps^2`` in natural units.

    The residual variance ``s2`` of a least-squares fit of the standardized
    outcome on the covariates anchors the ``q`` quantile of the prior. For
    aBCF/iBCF the anchored quantity is ``sigma_eps^2 / mean(w)``, so ``lam``
    is scaled by ``mean(w)``. A singular design falls back to ``var(y)``.
    """
    kind = ModelKind.parse(kind)
    center = np.average(d.y, weights=d.w)
    sd = weighted_sd(d.y, d.w)
    if not sd > 0:
        raise ValueError("outcome has zero weighted variance")
    ys = (d.y - center) / sd
    s2 = _ols_residual_variance(ys, d.X)
    if s2 is None:
        s2 = float(np.var(ys))
    lam = sigma_eps2_prior_lambda(s2, nu, q) * sd**2
    if kind is not ModelKind.BCF:
        lam *= float(np.mean(d.w))
    return nu, lam


def default_sigma_u_prior(d: AggregateDataset, multiplier: float = 1.0) -> float:
    """Half-normal scale for ``sigma_u``: two-thirds of the weighted sd of y."""
    s_u = multiplier * 2.0 / 3.0 * weighted_sd(d.y, d.w)
    if not s_u > 0:
        raise ValueError("degenerate sigma_u prior: outcome has zero weighted sd")
    return s_u


def structured_sigma_v_scale(sigma_u: float, psi: float, var_y: float) -> float:
    """Scale of the half-normal ``sigma_v`` prior: ``sigma_u * psi / sd(y)``."""
    if not var_y > 0:
        raise ValueError("var_y must be positive")
    return sigma_u * psi / math.sqrt(var_y)


def _log_halfnormal(x, s):
    if s <= 0:
        return 0.0 if x == 0 else -np.inf
    return -math.log(s) - 0.5 * (x / s) ** 2


def _log_prior(param, value, vs: VarianceState, priors: PriorSpec, free: tuple) -> float:
    if param == "sigma_eps2":
        a = priors.nu / 2
        return -(a + 1) * math.log(value) - priors.nu * priors.lam / (2 * value)
    if param == "sigma_u":
        out = -0.5 * (value / priors.s_u) ** 2
        if "sigma_v" in free:
            # the structured sigma_v prior depends on sigma_u
            out += _log_halfnormal(vs.sigma_v, priors.s_v(value))
        return out
    if param == "sigma_v":
        return _log_halfnormal(value, priors.s_v(vs.sigma_u))
    return math.log1p(value) + math.log1p(-value)


def _in_support(param, value) -> bool:
    if not math.isfinite(value):
        return False
    if param == "sigma_eps2":
        return value > 0
    if param in ("sigma_u", "sigma_v"):
        return value >= 0
    return -1 < value < 1


def log_likelihood(resid, s2) -> float:
    return float(-0.5 * np.sum(np.log(s2)) - 0.5 * np.sum(resid**2 / s2))


def log_conditional(param: str, value: float, vs: VarianceState, priors: PriorSpec, resid, w, z,
                    kind: ModelKind | str, free: tuple | None = None) -> float:
    """Log full conditional of one variance parameter, up to a constant.

    ``resid`` are the residuals ``y - f(x)`` with ``u`` and ``v`` integrated
    out. ``free`` lists the sampled parameters (defaults to the model's);
    when ``sigma_v`` is free its prior contributes to the ``sigma_u``
    conditional. Out-of-support values give ``-inf``.
    """
    kind = ModelKind.parse(kind)
    if free is None:
        free = kind.free_parameters
    if param not in PARAMS:
        raise ValueError(f"unknown parameter {param!r}")
    if not _in_support(param, value):
        return -np.inf
    vals = vs.values()
    vals[param] = value
    s2 = _sigma2(vals["sigma_eps2"], vals["sigma_u"], vals["sigma_v"], vals["rho"], w, z, kind)
    if np.any(~(s2 > 0)):
        return -np.inf
    lp = _log_prior(param, value, vs, priors, free)
    if not np.isfinite(lp):
        return -np.inf
    return lp + log_likelihood(np.asarray(resid, dtype=float), s2)


def _to_working(param, value):
    if param == "rho":
        return math.atanh(value)
    return math.log(value)


def _from_working(param, theta):
    if param == "rho":
        return math.tanh(theta)
    return math.exp(theta)


def _log_jacobian(param, value):
    # log |d value / d theta|
    if param == "rho":
        return math.log1p(-value * value)
    return math.log(value)


def mh_update(param: str, vs: VarianceState, priors: PriorSpec, resid, w, z, kind, rng,
              free: tuple | None = None) -> VarianceState:
    """One random-walk Metropolis step for ``param`` (updates ``vs`` in place)."""
    current = getattr(vs, param)
    step = rng.standard_normal()
    u = rng.random()
    log_u = math.log(u) if u > 0 else -math.inf
    vs.attempt_count[param] += 1
    theta_new = _to_working(param, current) + vs.proposal_sd[param] * step
    proposal = _from_working(param, theta_new)
    if param == "rho" and abs(proposal) >= 1.0:
        return vs
    if param != "rho" and not proposal > 0:
        return vs
    lp_new = log_conditional(param, proposal, vs, priors, resid, w, z, kind, free)
    if not np.isfinite(lp_new):
        return vs
    lp_old = log_conditional(param, current, vs, priors, resid, w, z, kind, free)
    delta = lp_new - lp_old + _log_jacobian(param, proposal) - _log_jacobian(param, current)
    if log_u < delta:
        setattr(vs, param, proposal)
        vs.accept_count[param] += 1
    return vs


def adapt_proposals(vs: VarianceState, target: float = 0.44, factor: float = 0.1,
                    params: tuple = PARAMS) -> dict:
    """Scale each proposal sd toward the target acceptance rate and reset the window."""
    for p in params:
        n = vs.attempt_count[p]
        if n:
            rate = vs.accept_count[p] / n
            vs.proposal_sd[p] *= math.exp(factor if rate > target else -factor)
        vs.accept_count[p] = 0
        vs.attempt_count[p] = 0
    return vs.proposal_sd
