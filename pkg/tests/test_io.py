import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partval.dgp import DesignConfig, calibrated, simulate
from partval.estimators import fit_ppo_mle, fit_probit_naive
from partval.io import ColumnSpec, DataError, Dataset, cluster_robust_vcov, export_csv, load_csv

SPEC = ColumnSpec(outcome_reported="yr", outcome_validated="yv", x_columns=["x1", "x2"],
                  z_columns=["const", "x1", "w"], continuous_columns=["x1", "x2", "w"])


def _write(path, header, rows):
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))


def _rows(n, rng):
    out = []
    for _ in range(n):
        x1, x2, w = rng.standard_normal(3)
        yr = int(rng.random() < 0.5)
        yv = yr * int(rng.random() < 0.7)
        out.append([repr(float(x1)), repr(float(x2)), repr(float(w)), yr, yv])
    return out


HEADER = ["x1", "x2", "w", "yr", "yv"]


def test_load_well_formed(tmp_path):
    p = tmp_path / "d.csv"
    _write(p, HEADER, _rows(10, np.random.default_rng(0)))
    data = load_csv(p, SPEC)
    assert data.n == 10
    assert data.x.shape == (10, 2) and data.z.shape == (10, 3)
    assert np.all(data.z[:, 0] == 1.0)


def test_partial_validation_violation_names_row(tmp_path):
    rows = _rows(10, np.random.default_rng(0))
    rows[3][3], rows[3][4] = 0, 1
    p = tmp_path / "d.csv"
    _write(p, HEADER, rows)
    with pytest.raises(DataError, match="row 3"):
        load_csv(p, SPEC)


def test_non_binary_outcome_rejected(tmp_path):
    rows = _rows(10, np.random.default_rng(0))
    rows[5][3] = "yes"
    p = tmp_path / "d.csv"
    _write(p, HEADER, rows)
    with pytest.raises(DataError, match="row 5"):
        load_csv(p, SPEC)
    rows[5][3] = 2
    _write(p, HEADER, rows)
    with pytest.raises(DataError, match="row 5"):
        load_csv(p, SPEC)


def test_missing_value_rejected(tmp_path):
    rows = _rows(10, np.random.default_rng(0))
    rows[7][1] = ""
    p = tmp_path / "d.csv"
    _write(p, HEADER, rows)
    with pytest.raises(DataError, match="row 7"):
        load_csv(p, SPEC)


def test_missing_column_rejected(tmp_path):
    p = tmp_path / "d.csv"
    _write(p, HEADER, _rows(10, np.random.default_rng(0)))
    bad = ColumnSpec(outcome_reported="yr", x_columns=["x1", "nope"], z_columns=["const", "w"])
    with pytest.raises(DataError, match="nope"):
        load_csv(p, bad)


def test_rank_deficiency_rejected(tmp_path):
    rows = _rows(30, np.random.default_rng(0))
    for r in rows:
        r[1] = r[0]  # x2 duplicates x1
    p = tmp_path / "d.csv"
    _write(p, HEADER, rows)
    with pytest.raises(DataError, match="rank"):
        load_csv(p, SPEC)


def test_missing_exclusion_restriction_rejected(tmp_path):
    p = tmp_path / "d.csv"
    _write(p, HEADER, _rows(30, np.random.default_rng(0)))
    same = ColumnSpec(outcome_reported="yr", x_columns=["x1", "x2"], z_columns=["x1", "x2"])
    with pytest.raises(DataError, match="exclusion"):
        load_csv(p, same)
    # exclusion in the other direction is accepted
    other = ColumnSpec(outcome_reported="yr", x_columns=["x1", "x2", "w"], z_columns=["x1", "w"])
    assert load_csv(p, other).n == 30


def test_dataset_rejects_validated_above_reported():
    x = np.random.default_rng(0).standard_normal((5, 2))
    z = np.column_stack([np.ones(5), x[:, 0]])
    with pytest.raises(DataError, match="row 2"):
        Dataset(x=x, z=z, y_reported=np.array([1, 1, 0, 0, 1]), y_validated=np.array([1, 0, 1, 0, 0]))


def test_simulated_round_trip_bitwise(tmp_path):
    d = calibrated(DesignConfig(n=400, seed=4, target_fn_rate=0.1, target_fp_rate=0.2))
    data = simulate(d).to_dataset()
    p = tmp_path / "sim.csv"
    spec = export_csv(data, p)
    back = load_csv(p, spec)
    assert back.x.tobytes() == data.x.tobytes()
    assert back.z.tobytes() == data.z.tobytes()
    assert np.array_equal(back.y_reported, data.y_reported)
    assert np.array_equal(back.y_validated, data.y_validated)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6, allow_nan=False), st.floats(-1e6, 1e6, allow_nan=False),
                          st.floats(-1e6, 1e6, allow_nan=False), st.integers(0, 1), st.integers(0, 1)),
                min_size=8, max_size=30))
def test_export_load_identity(tmp_path_factory, rows):
    x = np.array([[r[0], r[1]] for r in rows])
    w = np.array([r[2] for r in rows])
    z = np.column_stack([np.ones(len(rows)), x[:, 0], w])
    yr = np.array([max(r[3], r[4]) for r in rows])
    yv = np.array([r[4] for r in rows])
    data = Dataset(x=x, z=z, y_reported=yr, y_validated=yv, x_names=("x1", "x2"),
                   z_names=("const", "x1", "w"))
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    spec = export_csv(data, p)
    back = load_csv(p, spec, validate=False)
    assert back.x.tobytes() == data.x.tobytes()
    assert back.z.tobytes() == data.z.tobytes()
    assert np.array_equal(back.y_validated, data.y_validated)


def test_load_does_not_mutate_input(tmp_path):
    p = tmp_path / "d.csv"
    _write(p, HEADER, _rows(10, np.random.default_rng(0)))
    before = p.read_bytes()
    load_csv(p, SPEC)
    assert p.read_bytes() == before


# ---------------------------------------------------------------------------
# cluster-robust covariance


def _sim(n=3000, seed=0):
    d = calibrated(DesignConfig(n=n, seed=seed, target_fn_rate=0.1, target_fp_rate=0.2))
    return simulate(d).to_dataset()


def _with_clusters(data, ids):
    return Dataset(x=data.x, z=data.z, y_reported=data.y_reported, y_validated=data.y_validated,
                   cluster_ids=np.asarray(ids), x_names=data.x_names, z_names=data.z_names,
                   continuous_columns=data.continuous_columns)


def test_singleton_clusters_reduce_to_opg():
    data = _sim()
    fit = fit_probit_naive(data, "validated")
    vc = cluster_robust_vcov(fit, _with_clusters(data, np.arange(data.n)))
    np.testing.assert_allclose(vc, fit.vcov, rtol=1e-10, atol=1e-14)


def test_singleton_clusters_ppo():
    data = _sim(n=2000)
    fit = fit_ppo_mle(data)
    vc = cluster_robust_vcov(fit, _with_clusters(data, np.arange(data.n)))
    np.testing.assert_allclose(vc, fit.vcov, rtol=1e-10, atol=1e-14)


def test_duplicated_pairs_double_the_meat():
    data = _sim()
    dup = Dataset(x=np.vstack([data.x, data.x]), z=np.vstack([data.z, data.z]),
                  y_reported=np.concatenate([data.y_reported, data.y_reported]),
                  y_validated=np.concatenate([data.y_validated, data.y_validated]),
                  cluster_ids=np.concatenate([np.arange(data.n), np.arange(data.n)]),
                  x_names=data.x_names, z_names=data.z_names)
    fit = fit_probit_naive(dup, "validated")
    naive = fit.vcov
    clustered = cluster_robust_vcov(fit, dup)
    # pairing identical records doubles each cluster score: variance doubles
    np.testing.assert_allclose(clustered, 2.0 * naive, rtol=1e-8)
    # relative to the undoubled fit, pooled SEs shrink by sqrt(2) and clustered SEs do not
    single = fit_probit_naive(data, "validated")
    np.testing.assert_allclose(np.sqrt(np.diag(naive)) * np.sqrt(2.0),
                               np.sqrt(np.diag(single.vcov)), rtol=1e-5)
    np.testing.assert_allclose(np.sqrt(np.diag(clustered)), np.sqrt(np.diag(single.vcov)), rtol=1e-5)


def test_independent_clusters_close_to_default():
    data = _sim(n=8000, seed=3)
    fit = fit_probit_naive(data, "reported")
    ids = np.random.default_rng(0).integers(0, 40, data.n)
    vc = cluster_robust_vcov(fit, _with_clusters(data, ids))
    ratio = np.sqrt(np.diag(vc)) / fit.std_errors
    assert np.all(np.abs(ratio - 1.0) <= 0.25)


def test_single_cluster_rejected():
    data = _sim(n=500)
    fit = fit_probit_naive(data, "reported")
    with pytest.raises(DataError):
        cluster_robust_vcov(fit, _with_clusters(data, np.zeros(data.n)))
    with pytest.raises(DataError):
        cluster_robust_vcov(fit, data)
