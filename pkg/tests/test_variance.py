import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from abcf.data import AggregateDataset, ModelKind, weighted_sd
from abcf.dgp import DgpConfig, make_replicate
from abcf.variance import (
    NonPositiveVariance,
    PriorSpec,
    VarianceState,
    adapt_proposals,
    calibrate_sigma_eps_prior,
    default_sigma_u_prior,
    log_conditional,
    mh_update,
    sigma_eps2_prior_lambda,
    sigma_j_squared,
    structured_sigma_v_scale,
)

B, A, I = ModelKind.BCF, ModelKind.ABCF, ModelKind.IBCF


def invgamma(nu, lam):
    return stats.invgamma(nu / 2, scale=nu * lam / 2)


# ---------------------------------------------------------------------------
# compound variance


def test_sigma_j_squared_default_scales():
    vs = VarianceState(2557.0**2, 61.0)
    s2 = sigma_j_squared(vs, [608.0], [0], A)[0]
    assert s2 == pytest.approx(2557**2 / 608 + 61**2)
    assert s2 == pytest.approx(14475, rel=1e-3)
    assert 61**2 / s2 == pytest.approx(0.26, abs=0.005)


@pytest.mark.parametrize("kind", [B, A, I])
def test_sigma_j_squared_reduces_to_sigma_eps2(kind):
    vs = VarianceState(3.7, 0.0, 0.0, 0.4)
    assert np.allclose(sigma_j_squared(vs, [1.0, 1.0], [0, 1], kind), 3.7)


def test_sigma_j_squared_bcf_ignores_w():
    vs = VarianceState(2.0)
    assert np.allclose(sigma_j_squared(vs, [1.0, 10.0, 100.0], [0, 1, 0], B), 2.0)


def test_sigma_j_squared_perfect_cancellation():
    vs = VarianceState(5.0, 2.0, 2.0, -1.0)
    assert sigma_j_squared(vs, [2.0], [1], I)[0] == pytest.approx(2.5)


def test_sigma_j_squared_treated_terms_only_for_ibcf():
    vs = VarianceState(1.0, 1.0, 2.0, 0.5)
    assert sigma_j_squared(vs, [1.0, 1.0], [0, 1], I).tolist() == pytest.approx([2.0, 2.0 + 4.0 + 2.0])
    assert sigma_j_squared(vs, [1.0, 1.0], [0, 1], A).tolist() == pytest.approx([2.0, 2.0])


@given(se=st.floats(0.01, 100), su=st.floats(0, 10), sv=st.floats(0, 10), rho=st.floats(-0.99, 0.99),
       w=st.floats(1, 5000), d=st.floats(0.01, 5), z=st.sampled_from([0, 1]))
@settings(max_examples=200, deadline=None)
def test_sigma_j_squared_monotone(se, su, sv, rho, w, d, z):
    for kind in (A, I):
        base = sigma_j_squared(VarianceState(se, su, sv, rho), [w], [z], kind)[0]
        assert base > 0
        assert sigma_j_squared(VarianceState(se + d, su, sv, rho), [w], [z], kind)[0] >= base
        assert sigma_j_squared(VarianceState(se, su, sv, rho), [w + d], [z], kind)[0] < base
        if kind is A or rho >= 0:
            assert sigma_j_squared(VarianceState(se, su + d, sv, rho), [w], [z], kind)[0] >= base


# ---------------------------------------------------------------------------
# priors


def test_lambda_places_quantile_at_s2():
    for s2, nu, q in [(1.0, 3, 0.9), (0.37, 3, 0.9), (2.0, 5, 0.99)]:
        lam = sigma_eps2_prior_lambda(s2, nu, q)
        assert invgamma(nu, lam).ppf(q) == pytest.approx(s2, rel=1e-10)


def test_calibration_pure_noise_unit_weights():
    rng = np.random.default_rng(0)
    n = 4000
    d = AggregateDataset(y=rng.normal(size=n), z=(np.arange(n) % 2).astype(np.int8), w=np.ones(n),
                         X=rng.normal(size=(n, 3)), pi=np.full(n, 0.5))
    nu, lam = calibrate_sigma_eps_prior(d, A)
    assert nu == 3
    assert invgamma(nu, lam).ppf(0.9) == pytest.approx(1.0, rel=0.06)


def test_calibration_scales_with_mean_w_except_bcf():
    rng = np.random.default_rng(1)
    n = 300
    X = rng.normal(size=(n, 2))
    base = dict(y=X[:, 0] + rng.normal(size=n), z=(np.arange(n) % 2).astype(np.int8), X=X, pi=np.full(n, 0.5))
    d = AggregateDataset(w=np.full(n, 100.0), **base)
    _, lam_a = calibrate_sigma_eps_prior(d, A)
    _, lam_b = calibrate_sigma_eps_prior(d, B)
    assert lam_a == pytest.approx(100 * lam_b)


def test_calibration_perfect_fit_concentrates_near_zero():
    rng = np.random.default_rng(2)
    n = 50
    X = rng.normal(size=(n, 2))
    d = AggregateDataset(y=1 + X @ [2.0, -1.0], z=(np.arange(n) % 2).astype(np.int8), w=np.full(n, 100.0),
                         X=X, pi=np.full(n, 0.5))
    nu, lam = calibrate_sigma_eps_prior(d, A)
    assert invgamma(nu, lam / 100).ppf(0.9) < 1e-20


def test_calibration_singular_design_falls_back():
    n = 6
    X = np.column_stack([np.arange(n), 2 * np.arange(n)]).astype(float)
    d = AggregateDataset(y=np.array([1.0, 3, 2, 5, 4, 6]), z=np.array([0, 1] * 3, dtype=np.int8),
                         w=np.ones(n), X=X, pi=np.full(n, 0.5))
    nu, lam = calibrate_sigma_eps_prior(d, B)
    ys = (d.y - d.y.mean()) / d.y.std()
    assert lam == pytest.approx(sigma_eps2_prior_lambda(float(np.var(ys)), 3, 0.9) * d.y.std() ** 2)


def test_calibration_on_dgp_replicate_brackets_truth():
    rep = make_replicate(DgpConfig.desk(), 0)
    nu, lam = calibrate_sigma_eps_prior(rep.dataset, A)
    median_sigma = math.sqrt(invgamma(nu, lam).median())
    assert 2557 / 3 < median_sigma < 2557 * 3


def test_default_sigma_u_prior_values():
    y = np.array([0.0, 3.0])
    w = np.array([1.0, 2.0])
    d = AggregateDataset(y=y, z=np.array([0, 1], dtype=np.int8), w=w, X=np.zeros((2, 1)), pi=np.full(2, 0.5))
    assert default_sigma_u_prior(d) == pytest.approx(2 / 3 * math.sqrt(2))
    assert default_sigma_u_prior(d, 0.25) == pytest.approx(0.25 * default_sigma_u_prior(d))
    s_u = 2 / 3 * 147
    assert s_u == pytest.approx(98)
    assert stats.halfnorm(scale=s_u).mean() == pytest.approx(78, abs=0.5)
    assert stats.halfnorm(scale=s_u).median() == pytest.approx(66, abs=0.5)


def test_default_sigma_u_prior_degenerate():
    d = AggregateDataset(y=np.ones(3), z=np.array([0, 1, 0], dtype=np.int8), w=np.ones(3), X=np.zeros((3, 1)),
                         pi=np.full(3, 0.5))
    with pytest.raises(ValueError):
        default_sigma_u_prior(d)


def test_structured_sigma_v_scale():
    s_v = structured_sigma_v_scale(61, 25, 147**2)
    assert s_v == pytest.approx(10.374, abs=1e-3)
    assert stats.halfnorm(scale=s_v).mean() == pytest.approx(8.3, abs=0.05)
    assert structured_sigma_v_scale(0, 25, 147**2) == 0
    assert structured_sigma_v_scale(61, 50, 147**2) == pytest.approx(2 * s_v)
    with pytest.raises(ValueError):
        structured_sigma_v_scale(1, 1, 0)


def test_prior_spec_validation():
    with pytest.raises(ValueError):
        PriorSpec(nu=3, lam=0, s_u=1)


# ---------------------------------------------------------------------------
# conditionals


def priors1():
    return PriorSpec(nu=3, lam=1.0, s_u=2.0, psi=1.5, sd_y=1.0)


def test_single_unit_sigma_u_difference():
    p = priors1()
    vs = VarianceState(1.7, 0.0)
    s = 0.8
    diff = (log_conditional("sigma_u", s, vs, p, [0.0], [1.0], [0], A)
            - log_conditional("sigma_u", 0.0, vs, p, [0.0], [1.0], [0], A))
    assert diff == pytest.approx(-0.5 * (s / 2.0) ** 2 - 0.5 * math.log((1.7 + s * s) / 1.7), abs=1e-12)


def test_rho_support_boundary():
    p = priors1()
    vs = VarianceState(1.0, 1.0, 0.5, 0.0)
    assert np.isfinite(log_conditional("rho", 0.999, vs, p, [0.1], [1.0], [1], I))
    assert log_conditional("rho", 1.0, vs, p, [0.1], [1.0], [1], I) == -np.inf
    assert log_conditional("sigma_eps2", 0.0, vs, p, [0.1], [1.0], [1], I) == -np.inf
    assert log_conditional("sigma_u", -0.1, vs, p, [0.1], [1.0], [1], I) == -np.inf


def test_nonpositive_compound_variance_rejected():
    with pytest.raises(NonPositiveVariance):
        sigma_j_squared(VarianceState(0.0, 1.0, 1.0, -1.0), [1.0], [1], I)
    assert sigma_j_squared(VarianceState(1e-12, 1.0, 1.0, -0.999999), [1.0], [1], I)[0] > 0


def test_rho_prior_kernel_normalization():
    total, _ = integrate.quad(lambda r: math.exp(math.log1p(r) + math.log1p(-r)), -1, 1)
    assert total * 0.75 == pytest.approx(1.0, abs=1e-12)
    rho = np.linspace(-0.9, 0.9, 7)
    dens = 0.75 * (1 + rho) * (1 - rho)
    assert np.allclose(dens, stats.beta(2, 2).pdf((rho + 1) / 2) / 2)


def reference_log_density(param, x, vs, p, r, w, z, kind):
    vals = vs.values()
    vals[param] = x
    if kind is A:
        s2 = vals["sigma_eps2"] / w + vals["sigma_u"] ** 2
    else:
        s2 = (vals["sigma_eps2"] / w + vals["sigma_u"] ** 2
              + z * (vals["sigma_v"] ** 2 + 2 * vals["rho"] * vals["sigma_u"] * vals["sigma_v"]))
    ll = np.sum(stats.norm.logpdf(r, 0, np.sqrt(s2)))
    if param == "sigma_eps2":
        lp = stats.invgamma(p.nu / 2, scale=p.nu * p.lam / 2).logpdf(x)
    elif param == "sigma_u":
        lp = stats.halfnorm(scale=p.s_u).logpdf(x)
        if kind is I:
            lp += stats.halfnorm(scale=x * p.psi / p.sd_y).logpdf(vals["sigma_v"])
    elif param == "sigma_v":
        lp = stats.halfnorm(scale=vals["sigma_u"] * p.psi / p.sd_y).logpdf(x)
    else:
        lp = stats.beta(2, 2).logpdf((x + 1) / 2)
    return ll + lp


@pytest.mark.parametrize("param,kind,lo,hi", [
    ("sigma_eps2", A, 1e-3, 8.0), ("sigma_u", A, 1e-4, 4.0), ("sigma_u", I, 0.05, 4.0),
    ("sigma_v", I, 1e-4, 4.0), ("rho", I, -0.999, 0.999),
])
def test_full_conditional_matches_grid_oracle(param, kind, lo, hi):
    rng = np.random.default_rng(3)
    n = 10
    w = rng.integers(1, 20, n).astype(float)
    z = (np.arange(n) % 2).astype(float)
    vs = VarianceState(1.5, 0.8, 0.5 if kind is I else 0.0, 0.3 if kind is I else 0.0)
    r = rng.normal(0, 1.0, n)
    p = priors1()
    grid = np.linspace(lo, hi, 4001)
    got = np.array([log_conditional(param, x, vs, p, r, w, z, kind) for x in grid])
    ref = np.array([reference_log_density(param, x, vs, p, r, w, z, kind) for x in grid])
    got_d = np.exp(got - got.max())
    ref_d = np.exp(ref - ref.max())
    got_d /= integrate.trapezoid(got_d, grid)
    ref_d /= integrate.trapezoid(ref_d, grid)
    assert np.max(np.abs(got_d - ref_d)) < 1e-6


# ---------------------------------------------------------------------------
# MH updates


def test_zero_step_always_accepts():
    rng = np.random.default_rng(4)
    vs = VarianceState(1.0, 0.5)
    vs.proposal_sd["sigma_u"] = 0.0
    for _ in range(200):
        mh_update("sigma_u", vs, priors1(), np.ones(5), np.ones(5), np.zeros(5), A, rng)
    assert vs.accept_count["sigma_u"] == vs.attempt_count["sigma_u"] == 200


def test_updates_leave_other_parameters_untouched():
    rng = np.random.default_rng(5)
    vs = VarianceState(1.0, 0.5, 0.3, 0.2)
    before = vs.values()
    for p in ("sigma_eps2", "sigma_u", "sigma_v", "rho"):
        for _ in range(20):
            mh_update(p, vs, priors1(), rng.normal(size=8), np.ones(8), np.arange(8) % 2, I, rng)
            after = vs.values()
            assert all(after[q] == before[q] for q in after if q != p)
            before = after


def test_prior_recovery_with_flat_likelihood():
    rng = np.random.default_rng(6)
    p = PriorSpec(nu=3, lam=1.0, s_u=1.0)
    vs = VarianceState(1e12, 0.5)
    vs.proposal_sd["sigma_u"] = 1.2
    draws = np.empty(100_000)
    for i in range(draws.size):
        mh_update("sigma_u", vs, p, [0.0], [1.0], [0], A, rng)
        draws[i] = vs.sigma_u
    assert stats.kstest(draws, stats.halfnorm(scale=1.0).cdf).statistic < 0.02


def test_homoskedastic_mh_matches_conjugate_inverse_gamma():
    rng = np.random.default_rng(7)
    r = rng.normal(0, 1.3, 12)
    p = PriorSpec(nu=3, lam=0.8, s_u=1.0)
    vs = VarianceState(1.0)
    vs.proposal_sd["sigma_eps2"] = 0.9
    draws = np.empty(100_000)
    for i in range(draws.size):
        mh_update("sigma_eps2", vs, p, r, np.ones(12), np.zeros(12), B, rng)
        draws[i] = vs.sigma_eps2
    conj = stats.invgamma((p.nu + r.size) / 2, scale=(p.nu * p.lam + np.sum(r**2)) / 2)
    assert stats.kstest(draws, conj.cdf).statistic < 0.02


def test_abcf_interval_calibration_fixed_residuals():
    """Posterior intervals for (sigma_eps, sigma_u) cover the truth in most datasets."""
    covered = {"sigma_eps2": 0, "sigma_u": 0}
    n, se, su = 500, 2557.0, 61.0
    for seed in range(100):
        rng = np.random.default_rng(100 + seed)
        w = np.rint(rng.lognormal(math.log(437), 0.82, n)).clip(60, 3500)
        r = su * rng.normal(size=n) + se / np.sqrt(w) * rng.normal(size=n)
        sd = weighted_sd(r, w)
        rs = r / sd
        p = PriorSpec(nu=3, lam=sigma_eps2_prior_lambda(1.0, 3, 0.9) * w.mean(), s_u=2 / 3)
        vs = VarianceState(0.75 * w.mean(), 0.5, proposal_sd={"sigma_eps2": 0.15, "sigma_u": 0.5, "sigma_v": 1,
                                                                  "rho": 1})
        z = np.zeros(n)
        keep = {"sigma_eps2": [], "sigma_u": []}
        for it in range(2500):
            for q in ("sigma_eps2", "sigma_u"):
                mh_update(q, vs, p, rs, w, z, A, rng)
            if it % 100 == 99 and it < 1000:
                adapt_proposals(vs, params=("sigma_eps2", "sigma_u"))
            if it >= 1000:
                keep["sigma_eps2"].append(vs.sigma_eps2 * sd**2)
                keep["sigma_u"].append(vs.sigma_u * sd)
        for q, truth in (("sigma_eps2", se**2), ("sigma_u", su)):
            lo, hi = np.quantile(keep[q], [0.05, 0.95])
            covered[q] += lo <= truth <= hi
    assert covered["sigma_eps2"] >= 80
    assert covered["sigma_u"] >= 80


def test_adapt_direction_and_reset():
    vs = VarianceState(1.0, 1.0)
    vs.accept_count.update(sigma_eps2=100, sigma_u=0)
    vs.attempt_count.update(sigma_eps2=100, sigma_u=100)
    adapt_proposals(vs)
    assert vs.proposal_sd["sigma_eps2"] == pytest.approx(0.3 * math.exp(0.1))
    assert vs.proposal_sd["sigma_u"] == pytest.approx(0.5 * math.exp(-0.1))
    assert vs.accept_count["sigma_eps2"] == vs.attempt_count["sigma_u"] == 0


def test_state_check_enforces_kind_constraints():
    with pytest.raises(ValueError):
        VarianceState(1.0, 0.5).check(B)
    with pytest.raises(ValueError):
        VarianceState(1.0, 0.5, 0.1).check(A)
    with pytest.raises(ValueError):
        VarianceState(1.0, 0.5, 0.1, 1.0).check(I)
    VarianceState(1.0, 0.5, 0.1, 0.9).check(I)
