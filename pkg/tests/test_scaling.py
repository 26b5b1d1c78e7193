import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nco_scaling.model import ModelConfig, param_count
from nco_scaling.scaling import (
    EVAL_COLUMNS, FIXTURE_ENV, EvalRecord, FitError, RankError, compute_curves, decoupled_fits,
    fit_bivariate, fit_depth_width, fit_params_shape, fit_power, fit_shifted, flops_per_solution,
    grid, load_fixture, r2_mape, read_records, table1, table9, table12, table13, token_count,
    write_records,
)


def _gaps_by_config():
    return {(r["depth"], r["width"]): r["gap_pct"] for r in table9()}


def test_grid_matches_table1():
    rows = table1()
    cfgs = grid()
    assert len(cfgs) == 12
    for c, r in zip(cfgs, rows):
        assert (c.depth, c.width, c.heads, c.qkv_dim, c.ffn_dim) == (
            r["depth"], r["width"], r["heads"], r["qkv_dim"], r["ffn_dim"])


def test_fixture_sizes():
    assert len(table1()) == 12 and len(table9()) == 12 and len(table12()) == 2
    assert len(table13()) == 84


def test_token_count():
    assert token_count(100) == 10_200


def test_flops_against_table12():
    cfgs = {(c.depth, c.width): c for c in grid()}
    for row in table12():
        got = flops_per_solution(cfgs[row["depth"], row["width"]], 100)
        assert abs(got / row["gflops_per_solution"] - 1) < 0.05


def test_flops_linear_in_beam_and_validates():
    c = grid()[0]
    assert flops_per_solution(c, 50, 16) == pytest.approx(16 * flops_per_solution(c, 50))
    with pytest.raises(ValueError):
        flops_per_solution(c, 50, 0)


# ----------------------------------------------------------------------------
# goodness of fit
# ----------------------------------------------------------------------------

def test_r2_mape_by_hand():
    r2, mape = r2_mape([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
    assert r2 == pytest.approx(1 - 1 / 2)
    assert mape == pytest.approx(100 * (1 / 3) / 3)


def test_r2_mape_errors():
    with pytest.raises(FitError):
        r2_mape([1.0], [1.0])
    with pytest.raises(FitError):
        r2_mape([2.0, 2.0], [1.0, 3.0])


# ----------------------------------------------------------------------------
# synthetic recovery
# ----------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["gap", "log"])
@pytest.mark.parametrize("alpha,x_c", [(0.6, 0.3), (1.05, 0.63), (0.25, 1e-4), (1.7, 50.0)])
def test_power_recovery(method, alpha, x_c):
    x = np.geomspace(0.5, 80, 9)
    fit = fit_power(x, (x_c / x) ** alpha, method)
    assert fit.alpha == pytest.approx(alpha, rel=1e-6)
    assert fit.x_c == pytest.approx(x_c, rel=1e-6)
    assert fit.r2 == pytest.approx(1.0, abs=1e-9) and fit.mape < 1e-6


@pytest.mark.parametrize("method", ["gap", "log"])
def test_bivariate_recovery(method):
    d, w = np.meshgrid([6, 12, 24, 42], [128, 256, 512])
    d, w = d.ravel().astype(float), w.ravel().astype(float)
    gap = (3.0 / d) ** 0.9 * (200.0 / w) ** 0.6
    fit = fit_depth_width(d, w, gap, method)
    assert fit.exponents == pytest.approx((0.9, 0.6), rel=1e-6)
    pinned = fit_bivariate(d, w, gap, method=method, c1=3.0)
    assert pinned.normalizers == pytest.approx((3.0, 200.0), rel=1e-6)
    assert np.allclose(fit.predict(d, w), gap, rtol=1e-9)


def test_bivariate_default_normalizer_split():
    d = np.array([1.0, 2.0, 4.0, 8.0])
    w = np.array([1.0, 4.0, 2.0, 8.0])
    fit = fit_bivariate(d, w, (5.0 / d) ** 0.5 * (7.0 / w) ** 0.8)
    (b1, b2), (c1, c2) = fit.exponents, fit.normalizers
    assert b1 * math.log(c1) == pytest.approx(b2 * math.log(c2), rel=1e-9)


@pytest.mark.parametrize("a,b,g", [(3.0, 1.0, 0.1), (0.8, 0.5, 0.02), (5.0, 1.5, 0.0)])
def test_shifted_recovery(a, b, g):
    t = np.geomspace(1, 500, 12)
    fit = fit_shifted(t, a * t ** -b + g)
    assert fit.alpha_t == pytest.approx(a, rel=1e-6)
    assert fit.beta_t == pytest.approx(b, rel=1e-6)
    assert fit.gamma == pytest.approx(g, rel=1e-6, abs=1e-9)
    assert fit.gamma >= 0


def test_shifted_never_worse_than_pure_power():
    rng = np.random.default_rng(1)
    t = np.geomspace(1, 100, 10)
    y = 2.0 * t ** -0.7 * np.exp(rng.normal(0, 0.05, 10))
    shifted = fit_shifted(t, y)
    b, k = np.polyfit(np.log(t), np.log(y), 1)
    pure = float(((np.exp(k) * t ** b - y) ** 2).sum())
    assert shifted.sse <= pure + 1e-15


@settings(max_examples=50)
@given(alpha=st.floats(0.1, 2.0), x_c=st.floats(0.01, 10.0), scale=st.floats(0.1, 100.0))
def test_power_fit_scale_equivariance(alpha, x_c, scale):
    x = np.geomspace(1, 100, 6)
    y = (x_c / x) ** alpha * np.exp(0.1 * np.sin(np.arange(6)))
    base, scaled = fit_power(x, y, "log"), fit_power(scale * x, y, "log")
    assert scaled.alpha == pytest.approx(base.alpha, rel=1e-9)
    assert scaled.x_c == pytest.approx(scale * base.x_c, rel=1e-8)


# ----------------------------------------------------------------------------
# error handling
# ----------------------------------------------------------------------------

def test_fit_input_errors():
    with pytest.raises(FitError):
        fit_power([1.0, 2.0], [1.0, 0.0])
    with pytest.raises(FitError):
        fit_power([1.0], [1.0])
    with pytest.raises(RankError):
        fit_power([3.0, 3.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fit_power([1.0, 2.0], [1.0, 0.5], method="spline")
    with pytest.raises(FitError):
        fit_shifted([1.0, 2.0, 3.0], [3.0, 2.0, 1.0])


def test_bivariate_rank_error():
    d = np.array([6.0, 12.0, 24.0, 42.0])
    with pytest.raises(RankError):
        fit_bivariate(d, 2 * d, [1.0, 0.5, 0.3, 0.2])
    with pytest.raises(FitError):
        fit_bivariate([1.0, 2.0], [1.0, 3.0], [1.0, 2.0])


# ----------------------------------------------------------------------------
# fixture fits
# ----------------------------------------------------------------------------

def test_decoupled_fits_on_fixture():
    cs = decoupled_fits(table9())
    assert 25 <= cs.global_fit.mape <= 45
    for w in (128, 256):
        assert 0.88 <= cs.by_width[w].alpha <= 1.15
    for d, f in cs.by_depth.items():
        assert 0.20 <= f.alpha <= 0.45, d
    curves = list(cs.by_width.values()) + list(cs.by_depth.values())
    assert all(f.r2 > 0.95 for f in curves)
    assert all(cs.global_fit.mape > f.mape for f in curves)


def test_global_fit_near_reported_values():
    g = decoupled_fits(table9()).global_fit
    assert g.alpha == pytest.approx(0.60, abs=0.01)
    assert g.r2 == pytest.approx(0.794, abs=0.005)
    assert g.mape == pytest.approx(34.39, abs=0.05)


def test_params_shape_fit_on_fixture():
    gaps = _gaps_by_config()
    cfgs = grid()
    fit = fit_params_shape(cfgs, [gaps[c.depth, c.width] for c in cfgs])
    b_n, b_a = fit.exponents
    assert 0.35 <= b_n <= 0.65 and 0.25 <= b_a <= 0.55
    assert fit.form == "NA" and fit.param_constant == pytest.approx(13.02, abs=0.01)


def test_depth_width_fit_on_fixture():
    rows = table9()
    fit = fit_depth_width([r["depth"] for r in rows], [r["width"] for r in rows], [r["gap_pct"] for r in rows])
    b_d, b_w = fit.exponents
    assert b_d > b_w > 0
    assert fit.r2 > 0.95


def test_compute_curves_order():
    fits = compute_curves()
    assert len(fits) == 12
    # bigger, deeper models gain more per unit of extra search compute
    assert fits[6, 128].alpha < fits[6, 512].alpha < fits[42, 128].alpha


def test_param_count_of_grid_near_table1():
    for c, r in zip(grid(), table1()):
        assert abs(param_count(c).exact / 1e6 / r["params_m"] - 1) < 0.03


# ----------------------------------------------------------------------------
# records and fixtures
# ----------------------------------------------------------------------------

def _record(**kw):
    base = dict(depth=2, width=32, heads=4, qkv_dim=8, ffn_dim=128, params=12345, decode="beam:4",
                beam=4, dataset="uniform10", n=10, mean_gap_pct=1.0 / 3, wall_seconds=0.1,
                gflops_per_solution=1e-3, samples_seen=32000)
    base.update(kw)
    return EvalRecord(**base)


def test_records_round_trip(tmp_path):
    recs = [_record(), _record(depth=4, mean_gap_pct=2.5e-7)]
    p = tmp_path / "r.csv"
    write_records(p, recs)
    assert p.read_text().splitlines()[0] == ",".join(EVAL_COLUMNS)
    assert read_records(p) == recs
    assert recs[0].config == ModelConfig(2, 32, 4, 8, 128)


def test_records_validation(tmp_path):
    with pytest.raises(ValueError):
        _record(beam=-1)
    p = tmp_path / "bad.csv"
    p.write_text("depth,width\n1,2\n")
    with pytest.raises(ValueError):
        read_records(p)


def test_fixture_dir_override(tmp_path, monkeypatch):
    (tmp_path / "table9.csv").write_text("depth,width,gap_pct\n6,128,9.5\n")
    monkeypatch.setenv(FIXTURE_ENV, str(tmp_path))
    assert load_fixture("table9") == [{"depth": 6, "width": 128, "gap_pct": 9.5}]
