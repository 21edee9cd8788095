import datetime as dt
import json

import numpy as np
import pytest

from latent_markov.cli_io import (
    ConfigError,
    RunConfig,
    atomic_write_text,
    bundled_data_path,
    ingest,
    load_config,
    load_result,
    read_daily_counts,
    read_table,
    save_result,
    write_table,
)
from latent_markov.estimator import DataError, EstimationProblem, ObservationSet, delta_method_covariance, estimate
from latent_markov.markov_core import AggregationMatrix, empirical_frequencies, propagate, simulate_panel
from latent_markov.model_zoo import Homog3Params, baseline_scenario, build_homog3, get_family

START = dt.date(2020, 3, 16)


def _write_counts(path, series, population=1000, start=START, skip=()):
    lines = [f"# population: {population}", "# country: Testland", "date,series,count"]
    for name, vals in series.items():
        for t, v in enumerate(vals):
            if t in skip:
                continue
            lines.append(f"{(start + dt.timedelta(t)).isoformat()},{name},{int(v)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_bundled_france_shape():
    obs = ingest(bundled_data_path(), RunConfig())
    assert obs.K == 2 and obs.T == 22
    assert obs.population == 66_900_000
    assert obs.series_names == ("hospitalized", "deceased_total")
    assert obs.dates[0] == "2020-03-16" and obs.dates[-1] == "2020-04-06"
    np.testing.assert_array_equal(obs.A.rows.argmax(axis=1), [2, 4])


def test_covid_death_series_selectable():
    total = ingest(bundled_data_path(), RunConfig())
    covid = ingest(bundled_data_path(), RunConfig(death_series="covid"))
    assert covid.series_names == ("hospitalized", "deceased_covid")
    np.testing.assert_array_equal(covid.a_hat[:, 0], total.a_hat[:, 0])
    assert np.all(covid.a_hat[:, 1] <= total.a_hat[:, 1])


def test_empty_file_is_a_parse_error(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("", encoding="utf-8")
    with pytest.raises(DataError):
        read_daily_counts(p)


def test_bad_rows_rejected(tmp_path):
    p = tmp_path / "neg.csv"
    p.write_text("date,series,count\n2020-03-16,hospitalized,-1\n", encoding="utf-8")
    with pytest.raises(DataError, match="negative"):
        read_daily_counts(p)
    p.write_text("day,name,n\n2020-03-16,hospitalized,1\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        read_daily_counts(p)
    p.write_text("date,series,count\n2020-03-16,h,1\n2020-03-16,h,2\n", encoding="utf-8")
    with pytest.raises(DataError, match="duplicate"):
        read_daily_counts(p)


def test_missing_dates_listed(tmp_path):
    p = _write_counts(tmp_path / "gap.csv", {"hospitalized": range(10), "deceased_total": range(10)}, skip=(3, 5))
    with pytest.raises(DataError, match="2020-03-19, 2020-03-21"):
        ingest(p, RunConfig())


def test_count_above_population(tmp_path):
    p = _write_counts(tmp_path / "big.csv", {"hospitalized": [1, 2, 2000], "deceased_total": [0, 0, 1]})
    with pytest.raises(DataError, match="exceeds the population on 2020-03-18"):
        ingest(p, RunConfig())


def test_non_monotone_cumulative_warns(tmp_path):
    p = _write_counts(tmp_path / "dip.csv", {"hospitalized": [5, 6, 7, 8], "deceased_total": [1, 3, 2, 4]})
    with pytest.warns(UserWarning, match="deceased_total"):
        obs = ingest(p, RunConfig())
    assert obs.T == 4


def test_flow_series_accumulated(tmp_path):
    p = _write_counts(tmp_path / "flow.csv", {"hospitalized": [5, 6, 7], "deceased_total": [1, 2, 3]})
    obs = ingest(p, RunConfig(flow_series=["deceased_total"]))
    np.testing.assert_array_equal(obs.a_hat[:, 1] * 1000, [1, 3, 6])


def test_mapping_errors(tmp_path):
    p = _write_counts(tmp_path / "ok.csv", {"hospitalized": [5, 6], "deceased_total": [1, 2]})
    with pytest.raises(ConfigError, match="not in model states"):
        ingest(p, RunConfig(mapping={"hospitalized": "XX"}))
    with pytest.raises(ConfigError, match="same state"):
        ingest(p, RunConfig(mapping={"hospitalized": "ID", "deceased_total": "ID"}))
    with pytest.raises(DataError, match="not found"):
        ingest(p, RunConfig(mapping={"confirmed": "ID"}))


def test_window_selects_days():
    obs = ingest(bundled_data_path(), RunConfig(window={"start": "2020-03-20", "end": "2020-03-29"}))
    assert obs.T == 10 and obs.dates[0] == "2020-03-20"


def test_load_config(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("model: siurd\nseed: 7\noptimizer:\n  n_starts: 3\n", encoding="utf-8")
    cfg = load_config(p, {"seed": 11, "output_dir": None})
    assert cfg.seed == 11 and cfg.optimizer == {"n_starts": 3}
    p.write_text("modle: siurd\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="modle"):
        load_config(p)
    p.write_text("death_series: reported\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_panel_counts_round_trip_exactly(tmp_path):
    model, p0, _ = baseline_scenario("sim-baseline")
    N, T = 20_000, 12
    panel = simulate_panel(model, p0, N, T, seed=5)
    f = empirical_frequencies(panel, 5)
    counts = np.rint(f * N).astype(int)
    np.testing.assert_array_equal(counts / N, f)
    p = _write_counts(tmp_path / "panel.csv", {"hospitalized": counts[:, 2], "deceased_total": counts[:, 4]}, population=N)
    obs = ingest(p, RunConfig())
    np.testing.assert_array_equal(obs.a_hat, f[:, [2, 4]])


def test_frequencies_within_one_ulp(tmp_path, rng):
    pop = 66_900_000
    hosp = np.sort(rng.integers(0, pop // 100, 15))
    dead = np.sort(rng.integers(0, pop // 1000, 15))
    obs = ingest(_write_counts(tmp_path / "c.csv", {"hospitalized": hosp, "deceased_total": dead}, population=pop), RunConfig())
    counts = np.column_stack([hosp, dead]).astype(float)
    back = obs.a_hat * pop
    assert np.all(np.abs(back - counts) <= np.spacing(np.maximum(counts, 1.0)))


def test_write_table_round_trip(tmp_path, rng):
    vals = rng.normal(size=(6, 3)) * 10.0 ** rng.integers(-20, 20, size=(6, 3))
    p = write_table(tmp_path / "t.csv", ["a", "b", "c"], vals.tolist())
    header, rows = read_table(p)
    assert header == ["a", "b", "c"]
    np.testing.assert_array_equal(np.array(rows, dtype=float), vals)


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write_text(tmp_path / "sub" / "x.txt", "one")
    atomic_write_text(tmp_path / "sub" / "x.txt", "two")
    assert [q.name for q in (tmp_path / "sub").iterdir()] == ["x.txt"]
    assert (tmp_path / "sub" / "x.txt").read_text() == "two"


@pytest.fixture(scope="module")
def homog_fit():
    params = Homog3Params(p12=0.1, p13=0.02, p23=0.06)
    path = propagate(build_homog3(params), [1.0, 0, 0], 11)
    A = AggregationMatrix.selection(3, [0, 2])
    obs = ObservationSet(A, path @ A.rows.T, population=50_000)
    fam = get_family("homog3")
    problem = EstimationProblem(fam, obs, params.to_array() * 1.1, n_starts=2)
    res = estimate(problem)
    res.covariance = delta_method_covariance(problem, res)
    return res, obs


def test_result_round_trip(tmp_path, homog_fit):
    res, obs = homog_fit
    p = save_result(tmp_path / "est.json", res, obs, extra={"note": "x"})
    back, obs2, extra = load_result(p)
    assert extra == {"note": "x"}
    for name in ("theta_hat", "p_hat", "residuals"):
        np.testing.assert_allclose(getattr(back, name), getattr(res, name), rtol=0, atol=1e-12)
    assert back.objective == pytest.approx(res.objective, abs=1e-12)
    assert back.param_names == res.param_names and back.dates == res.dates
    np.testing.assert_allclose(back.covariance.matrix, res.covariance.matrix, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(obs2.a_hat, obs.a_hat)


def test_load_rejects_tampered_marginals(tmp_path, homog_fit):
    res, obs = homog_fit
    p = save_result(tmp_path / "est.json", res, obs)
    doc = json.loads(p.read_text())
    doc["p_hat"][3][0] += 1e-6
    doc["p_hat"][3][1] -= 1e-6
    p.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="constraints"):
        load_result(p)
    doc["p_hat"][3][1] += 1e-3
    doc.pop("observations")
    p.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="simplex"):
        load_result(p)
