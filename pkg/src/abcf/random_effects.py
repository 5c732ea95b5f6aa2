"""Post-hoc draws of unit random effects given a retained MCMC state.

The chain itself runs on the marginal likelihood with ``u`` (and ``v``)
integrated out, so these draws never feed back into it. For each unit the
prior is ``(u, v) ~ N(0, [[su^2, rho su sv], [rho su sv, sv^2]])`` and the
residual ``r = y - f(x)`` has likelihood ``N(u + z v, sigma_eps^2 / w)``.
Posterior moments are written in covariance form so that a singular prior
(``sigma_v = 0``, ``sigma_u = 0``) needs no special inversion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .variance import RHO_CLAMP, VarianceState


@dataclass
class RandomEffectDraw:
    u: np.ndarray
    v: np.ndarray


def uv_posterior_moments(resid, sigma_eps2, sigma_u, sigma_v, rho, w, z):
    """Per-unit posterior mean ``(m_u, m_v)`` and covariance ``(c_uu, c_uv, c_vv)``."""
    if not sigma_eps2 > 0:
        raise ValueError("sigma_eps2 must be positive")
    r = np.asarray(resid, dtype=float)
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    rho = float(np.clip(rho, -RHO_CLAMP, RHO_CLAMP))
    su, sv = float(sigma_u), float(sigma_v)
    e = sigma_eps2 / w
    one_m_r2 = 1.0 - rho * rho
    cov_uv = rho * su * sv
    q = su * su + z * (sv * sv + 2.0 * cov_uv) + e
    m_u = (su * su + z * cov_uv) * r / q
    m_v = (cov_uv + z * sv * sv) * r / q
    c_uu = su * su * (e + z * sv * sv * one_m_r2) / q
    c_vv = sv * sv * (su * su * one_m_r2 + e) / q
    c_uv = (cov_uv * e - z * su * su * sv * sv * one_m_r2) / q
    return m_u, m_v, c_uu, c_uv, c_vv


def _draw(resid, sigma_eps2, sigma_u, sigma_v, rho, w, z, rng, want_v):
    n = np.asarray(resid).shape[0]
    m_u, m_v, c_uu, c_uv, c_vv = uv_posterior_moments(resid, sigma_eps2, sigma_u, sigma_v, rho, w, z)
    if sigma_u > 0:
        u = m_u + np.sqrt(c_uu) * rng.standard_normal(n)
    else:
        u = np.zeros(n)
    if not want_v:
        return u, np.zeros(n)
    if sigma_v > 0:
        z2 = rng.standard_normal(n)
        if sigma_u > 0:
            coef = c_uv / c_uu
            cond_var = np.maximum(c_vv - coef * c_uv, 0.0)
            v = m_v + coef * (u - m_u) + np.sqrt(cond_var) * z2
        else:
            v = m_v + np.sqrt(c_vv) * z2
    else:
        v = np.zeros(n)
    return u, v


def draw_u(resid, vs: VarianceState, w, rng: np.random.Generator) -> np.ndarray:
    """Independent draws of ``u_j`` from ``N(V_j (w_j / sigma_eps2) r_j, V_j)``.

    ``V_j = 1 / (1 / sigma_u^2 + w_j / sigma_eps2)``. Returns zeros (without
    consuming random numbers) when ``sigma_u == 0``.
    """
    if vs.sigma_u < 0:
        raise ValueError("sigma_u must be non-negative")
    z = np.zeros(np.asarray(resid).shape[0])
    u, _ = _draw(resid, vs.sigma_eps2, vs.sigma_u, 0.0, 0.0, w, z, rng, want_v=False)
    return u


def draw_uv(resid, vs: VarianceState, w, z, rng: np.random.Generator) -> RandomEffectDraw:
    """Joint draws of ``(u_j, v_j)``: ``u`` from its marginal posterior, then ``v | u``.

    Control units carry no information about ``v`` so their ``v`` draws come
    from the conditional prior given ``u``. ``|rho|`` is clamped to 0.999.
    """
    if vs.sigma_u < 0 or vs.sigma_v < 0:
        raise ValueError("scales must be non-negative")
    u, v = _draw(resid, vs.sigma_eps2, vs.sigma_u, vs.sigma_v, vs.rho, w, z, rng, want_v=True)
    return RandomEffectDraw(u, v)
