import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spdecov.errors import ConfigurationError
from spdecov.experiments import (RateStudyConfig, RejectionStudyConfig, RunningMoments, emit_report,
                                 fit_loglog_slope, rate_replication, read_report, rejection_matrix,
                                 run_rate_study, run_rejection_study)
from spdecov.kernels import InverseFractionalLaplacian, Matern, coefficient_matrix
from spdecov.observation import ObservationScheme
from spdecov.spectral import SpectralOperator

DELTAS = (2.0 ** -4, 2.0 ** -6)


def test_slope_examples():
    d = 2.0 ** -np.arange(2, 12)
    s, b, r = fit_loglog_slope(zip(d, 3.0 * d ** 0.5))
    assert s == pytest.approx(0.5, abs=1e-12) and r < 1e-12
    assert fit_loglog_slope(zip(d, np.full(d.size, 7.0)))[0] == pytest.approx(0.0, abs=1e-12)
    assert fit_loglog_slope([(2.0 ** -2, 4.0), (2.0 ** -4, 1.0)])[0] == pytest.approx(1.0)


def test_slope_errors():
    with pytest.raises(ValueError):
        fit_loglog_slope([(0.5, 1.0), (0.25, 0.0)])
    with pytest.raises(ValueError):
        fit_loglog_slope([(0.5, 1.0), (0.5, 2.0)])


@settings(max_examples=30, deadline=None)
@given(xs=st.lists(st.floats(-100, 100), min_size=2, max_size=40), cut=st.integers(0, 40))
def test_running_moments_merge(xs, cut):
    cut = min(cut, len(xs))
    whole = RunningMoments().extend(xs)
    merged = RunningMoments().extend(xs[:cut]).merge(RunningMoments().extend(xs[cut:]))
    assert merged.count == whole.count
    assert merged.mean == pytest.approx(np.mean(xs), abs=1e-9)
    assert merged.variance == pytest.approx(np.var(xs, ddof=1), rel=1e-8, abs=1e-8)


def test_rate_config_validation():
    with pytest.raises(ConfigurationError):
        RateStudyConfig(deltas=(2.0 ** -6, 2.0 ** -4))
    with pytest.raises(ConfigurationError):
        RateStudyConfig(deltas=(0.3, 0.1))
    with pytest.raises(ConfigurationError):
        RateStudyConfig(replications=1)
    with pytest.raises(ConfigurationError):
        RateStudyConfig.from_dict({"bogus": 1})
    assert RateStudyConfig(coupling="pointwise_optimal").coupling == 0.75


def test_rate_replication_deterministic():
    cfg = RateStudyConfig(smoothness=(0.5,), deltas=DELTAS, replications=3, seed=4, mode_count=64)
    a = rate_replication(cfg, 0, 1, 2)
    assert a == rate_replication(cfg, 0, 1, 2)
    assert a != rate_replication(cfg, 0, 1, 1)


def test_rate_study_independent_of_chunking():
    cfg = RateStudyConfig(smoothness=(0.5,), deltas=DELTAS, replications=6, seed=1, mode_count=64)
    serial = run_rate_study(cfg, threads=1)
    pooled = run_rate_study(cfg, threads=2)
    for a, b in zip(serial.rows, pooled.rows):
        assert a["rmse"] == pytest.approx(b["rmse"], rel=1e-12)


def test_zero_noise_rmse_is_kernel_norm():
    cfg = RateStudyConfig(smoothness=(0.5,), deltas=DELTAS, replications=2, noise_scale=0.0, mode_count=64)
    res = run_rate_study(cfg)
    fine = ObservationScheme.pointwise(cfg.fine_cells)
    c = coefficient_matrix(cfg.true_kernel(0.5), fine)
    norm = math.sqrt(np.sum((c @ fine.gram) * (fine.gram @ c)))
    for r in res.rows:
        assert r["rmse"] == pytest.approx(norm, rel=1e-12)
        assert r["stderr"] == 0.0
    assert res.slopes[0.5][0] == pytest.approx(0.0, abs=1e-12)


def test_stderr_scales_with_replications():
    base = dict(smoothness=(0.5,), deltas=DELTAS, seed=2, mode_count=64)
    few = run_rate_study(RateStudyConfig(replications=30, **base)).rows[1]["stderr"]
    many = run_rate_study(RateStudyConfig(replications=120, **base)).rows[1]["stderr"]
    ratio = few / many
    assert abs(ratio / 2.0 - 1.0) <= 0.2


def test_matern_fem_rate_cell_runs():
    cfg = RateStudyConfig(model="matern_fem", smoothness=(0.375,), deltas=DELTAS, replications=2,
                          sim_step=2.0 ** -8)
    res = run_rate_study(cfg)
    assert [r["h"] for r in res.rows] == [0.25, 0.125]
    assert all(r["rmse"] > 0 for r in res.rows)


def _small_rejection(**kw):
    op = SpectralOperator(mode_count=64)
    truths = [InverseFractionalLaplacian(0.5, op), Matern(1.0, 0.5, 0.5)]
    base = dict(truths=truths, replications=6, seed=3, sim_step=2.0 ** -10)
    base.update(kw)
    return RejectionStudyConfig(**base)


def test_rejection_study_rows_and_trivial_alpha():
    rows = run_rejection_study(_small_rejection(alpha=0.999))
    assert len(rows) == 4
    assert all(r["rate"] == 1.0 for r in rows)
    truths, nulls, m = rejection_matrix(rows)
    assert m.shape == (2, 2) and truths == nulls


def test_rejection_family_null():
    cfg = _small_rejection(nulls=[{"family": "matern", "lower": [0.5, 0.15, 0.2], "upper": [2, 0.6, 1]}],
                           replications=3, n_scan=8, budget=30)
    rows = run_rejection_study(cfg)
    assert rows[0]["null"].startswith("matern[")
    assert rows[0]["rate"] == 1.0  # commuting data is far from the Matern family


def test_rejection_config_validation():
    with pytest.raises(ConfigurationError):
        _small_rejection(alpha=1.0)
    with pytest.raises(ConfigurationError):
        _small_rejection(delta=0.3)
    with pytest.raises(ConfigurationError):
        RejectionStudyConfig.from_dict({"truth": []})


def test_emit_empty_rows():
    with pytest.raises(ValueError):
        emit_report([], "csv", "unused.csv")


def test_csv_roundtrip_and_svg(tmp_path):
    rate_rows = [{"nu": 0.375, "delta": 2.0 ** -k, "h": 2.0 ** -(k // 2), "rmse": 0.3 * 2.0 ** (-k / 2),
                  "stderr": 0.01 / 3} for k in (4, 6, 8)]
    p = tmp_path / "rate.csv"
    emit_report(rate_rows, "csv", p)
    assert p.read_text().splitlines()[0] == "nu,delta,h,rmse,stderr"
    assert read_report(p) == rate_rows
    svg = tmp_path / "rate.svg"
    emit_report(rate_rows, "svg", svg, guides=(0.5, 0.375))
    assert ET.parse(svg).getroot().tag.endswith("svg")

    rej_rows = [{"truth": "matern(s2=1,nu=0.5,rho=0.5)", "null": n, "rate": r, "stderr": 0.01,
                 "replications": 100} for n, r in (("ifl(nu=0.5)", 0.91), ("matern(s2=1,nu=0.5,rho=0.5)", 0.05))]
    q = tmp_path / "rej.csv"
    emit_report(rej_rows, "csv", q)
    assert q.read_text().splitlines()[0] == "truth,null,rate,stderr,replications"
    assert read_report(q) == rej_rows
    emit_report(rej_rows, "svg", tmp_path / "rej.svg")
    ET.parse(tmp_path / "rej.svg")


def test_unwritable_path(tmp_path):
    rows = [{"nu": 0.5, "delta": 0.5, "h": 0.5, "rmse": 1.0, "stderr": 0.1}]
    with pytest.raises(OSError):
        emit_report(rows, "csv", tmp_path / "missing" / "x.csv")


def test_refined_fem_grid_observes_scheme_vertices():
    from spdecov.experiments import FEM_OPERATOR, _fem_observations
    from spdecov.sampler import replication_rng

    sch = ObservationScheme.pointwise(4)
    k = Matern(1.0, 0.5, 0.5)
    y = _fem_observations(k, sch, 2.0 ** -4, 0.25, 2.0 ** -6, [replication_rng(0)], FEM_OPERATOR,
                          refinement=2)
    assert y.shape == (1, 5, 5)
    cfg = _small_rejection(truths=[k], replications=2, sim_refinement=1, null_refinement=1)
    assert len(run_rejection_study(cfg)) == 1
