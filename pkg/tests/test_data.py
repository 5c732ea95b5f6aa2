import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from abcf.data import (
    AggregateDataset,
    AggregateUnit,
    DatasetError,
    FitConfig,
    ModelKind,
    load_dataset,
    summarize_dataset,
    weighted_sd,
    write_dataset,
)
from abcf.dgp import DgpConfig, make_replicate

HEADER = "unit_id,y,z,w,pi,x1,x2\n"


def write(tmp_path, body, header=HEADER):
    p = tmp_path / "d.csv"
    p.write_text(header + body)
    return p


def test_load_three_rows(tmp_path):
    p = write(tmp_path, "a,1.5,1,10,0.4,0.1,0.2\nb,2.5,0,20,0.6,0.3,0.4\nc,0.5,0,30,0.5,0.5,0.6\n")
    d = load_dataset(p)
    assert (d.n, d.p) == (3, 2)
    assert d.unit_ids == ("a", "b", "c")
    assert np.array_equal(d.z, [1, 0, 0])
    assert d.covariate_names == ("x1", "x2")


def test_schema_mapping(tmp_path):
    p = write(tmp_path, "1,1,10,0.4,5\n2,0,20,0.6,6\n", header="outcome,trt,size,ps,age\n")
    d = load_dataset(p, {"y": "outcome", "z": "trt", "w": "size", "pi": "ps", "x": ["age"]})
    assert d.p == 1 and np.array_equal(d.X[:, 0], [5, 6])
    assert d.unit_ids == (1, 2)


@pytest.mark.parametrize("row2,field", [
    ("b,2.5,0,20,1.0,0.3,0.4", "pi"),
    ("b,2.5,0,0.5,0.5,0.3,0.4", "w"),
    ("b,2.5,2,20,0.5,0.3,0.4", "z"),
    ("b,nan,0,20,0.5,0.3,0.4", "non-finite"),
])
def test_row_errors_name_the_row(tmp_path, row2, field):
    p = write(tmp_path, "a,1.5,1,10,0.4,0.1,0.2\n" + row2 + "\n")
    with pytest.raises(DatasetError, match="row 2"):
        load_dataset(p)


def test_missing_column(tmp_path):
    p = write(tmp_path, "a,1,1,10,0.1\n", header="unit_id,y,z,w,x1\n")
    with pytest.raises(DatasetError, match="pi"):
        load_dataset(p)


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.csv")


def test_needs_both_arms():
    with pytest.raises(DatasetError):
        AggregateDataset(y=[1, 2], z=[1, 1], w=[1, 1], X=[[0], [1]], pi=[0.5, 0.5])


def test_round_trip(tmp_path):
    d = make_replicate(DgpConfig.desk(n_units=40, n_treated=10), 0, 1).dataset
    write_dataset(d, tmp_path / "r.csv")
    assert load_dataset(tmp_path / "r.csv").equals(d)


def test_round_trip_from_units(tmp_path):
    units = [AggregateUnit("u1", 0.1, 1, 2.5, (1.0,), 0.3), AggregateUnit("u2", -0.2, 0, 7.0, (2.0,), 0.9)]
    d = AggregateDataset.from_units(units)
    assert d.units == units
    write_dataset(d, tmp_path / "u.csv")
    assert load_dataset(tmp_path / "u.csv").equals(d)


def test_arrays_are_read_only():
    d = AggregateDataset(y=[1, 2], z=[1, 0], w=[1, 2], X=[[0], [1]], pi=[0.5, 0.5])
    with pytest.raises(ValueError):
        d.y[0] = 3.0


def test_constant_sizes_warn():
    d = AggregateDataset(y=[1, 2], z=[1, 0], w=[5, 5], X=[[0], [1]], pi=[0.5, 0.5])
    with pytest.warns(UserWarning):
        assert not d.check_sizes_vary()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert AggregateDataset(y=[1, 2], z=[1, 0], w=[5, 6], X=[[0], [1]], pi=[0.5, 0.5]).check_sizes_vary()


def test_weighted_sd_examples():
    assert weighted_sd([0, 2], [1, 1]) == pytest.approx(1.0)
    assert weighted_sd([0, 3], [1, 2]) == pytest.approx(math.sqrt(2.0))


@given(arrays(float, st.integers(1, 12), elements=st.floats(-100, 100)), st.data())
@settings(max_examples=100, deadline=None)
def test_weighted_sd_matches_expanded_sample(y, data):
    counts = np.array(data.draw(st.lists(st.integers(1, 6), min_size=len(y), max_size=len(y))))
    expanded = np.repeat(y, counts)
    assert weighted_sd(y, counts) == pytest.approx(np.std(expanded), abs=1e-9)


@given(arrays(float, st.integers(2, 10), elements=st.floats(-100, 100)), st.data())
@settings(max_examples=100, deadline=None)
def test_weighted_sd_split_invariance(y, data):
    w = np.array(data.draw(st.lists(st.floats(1, 50), min_size=len(y), max_size=len(y))))
    k = data.draw(st.integers(0, len(y) - 1))
    y2 = np.r_[y, y[k]]
    w2 = np.r_[w, w[k] / 2]
    w2[k] /= 2
    assert weighted_sd(y2, w2) == pytest.approx(weighted_sd(y, w), abs=1e-9)


def test_summary_at_defaults():
    d = make_replicate(DgpConfig(), 0, 0).dataset
    s = summarize_dataset(d)
    assert s["n"] == 3000 and s["n_treated"] == 1000 and s["p"] == 5
    assert s["y_weighted_sd"] == pytest.approx(147, rel=0.10)
    assert s["w_min"] <= s["w_q25"] <= s["w_median"] <= s["w_q75"] <= s["w_max"]


def test_model_kind_parameters():
    assert ModelKind.parse("BCF").free_parameters == ("sigma_eps2",)
    assert ModelKind.parse("abcf").free_parameters == ("sigma_eps2", "sigma_u")
    assert ModelKind.IBCF.free_parameters == ("sigma_eps2", "sigma_u", "sigma_v", "rho")
    with pytest.raises(ValueError):
        ModelKind.parse("bart")


@pytest.mark.parametrize("kw", [dict(n_burn=0), dict(n_draw=-1), dict(thinning=0),
                                dict(model_kind="ibcf", psi=0.0), dict(fixed={"tau": 1.0}),
                                dict(sigma_u_prior_scale_multiplier=0.0)])
def test_fit_config_validation(kw):
    with pytest.raises(ValueError):
        FitConfig(**kw)


def test_fit_config_psi_only_checked_for_ibcf():
    assert FitConfig(model_kind="abcf", psi=0.0).psi == 0.0
    assert FitConfig(n_draw=1000, thinning=3).n_kept == 333
