import csv
import io
import statistics

import pytest

from fogorch.bench import (
    CSV_HEADER,
    DEFAULT_INPUTS,
    ExperimentConfig,
    ExperimentError,
    NoSuccessfulRuns,
    compare_strategies,
    data_path,
    run_experiment,
    stats_from_csv,
    variant,
)
from fogorch.fogbus.calc import execute_calculation


@pytest.fixture(scope="module")
def host_report():
    return run_experiment(ExperimentConfig())


def test_host_run_band(host_report):
    assert host_report.success_count == 10
    assert all(30 <= v <= 40 for v in host_report.successes)


def test_default_inputs_are_nonsingular():
    assert len(DEFAULT_INPUTS) == 10
    assert DEFAULT_INPUTS[:2] == (DEFAULT_INPUTS[0].__class__(1, 1, 1), DEFAULT_INPUTS[0].__class__(2, 3, 4))
    for inp in DEFAULT_INPUTS:
        execute_calculation(inp)


def test_native_gap(host_report):
    native = run_experiment(variant(ExperimentConfig(), "native"))
    assert 5 <= host_report.mean - native.mean <= 10
    assert host_report.stddev >= native.stddev


def test_env_variable_has_no_successes():
    with pytest.raises(NoSuccessfulRuns) as err:
        run_experiment(ExperimentConfig(strategy="env_variable"))
    samples = err.value.report.samples
    assert len(samples) == 10
    assert all(not s.success and s.failure_reason == "unroutable" for s in samples)


def test_csv_header_and_integrity(host_report):
    text = host_report.to_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == CSV_HEADER
    stats = stats_from_csv(text)
    assert stats["success_count"] == host_report.success_count
    for key in ("min", "max", "mean", "stddev"):
        assert stats[key] == pytest.approx(getattr(host_report, key), abs=1e-9)


def test_stddev_is_population(host_report):
    assert host_report.stddev == pytest.approx(statistics.pstdev(host_report.successes), abs=1e-12)


def test_csv_reproducible():
    assert run_experiment(ExperimentConfig()).to_csv() == run_experiment(ExperimentConfig()).to_csv()


def test_failed_rows_in_csv():
    report = run_experiment(ExperimentConfig(strategy="env_variable", repetitions=2), allow_empty=True)
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert [r["failure_reason"] for r in rows] == ["unroutable", "unroutable"]
    assert all(r["latency_ms"] == "" for r in rows)
    assert stats_from_csv(report.to_csv())["mean"] is None


def test_repetitions_validated():
    with pytest.raises(ExperimentError):
        ExperimentConfig(repetitions=0).validate()


def test_config_file_round(tmp_path):
    path = tmp_path / "exp.conf"
    path.write_text("strategy = proxy\nrepetitions = 3\nseed = 5\ninputs = 1,1,1; 2,3,4\n")
    cfg = ExperimentConfig.load(path)
    assert (cfg.strategy, cfg.repetitions, cfg.seed) == ("proxy_server", 3, 5)
    assert len(cfg.inputs) == 2


def test_shipped_config_loads():
    cfg = ExperimentConfig.load(data_path("experiment.conf"))
    assert cfg.repetitions == 10 and cfg.seed == 42 and cfg.strategy == "host_network"


def test_missing_config_file(tmp_path):
    with pytest.raises(ExperimentError):
        ExperimentConfig.load(tmp_path / "nope.conf")


def test_compare_native_host():
    table = compare_strategies([variant(ExperimentConfig(), "native"), ExperimentConfig()])
    assert len(table.rows) == 2
    assert table.row("host_network").mean > table.row("native").mean


def test_compare_host_proxy():
    table = compare_strategies([ExperimentConfig(), variant(ExperimentConfig(), "proxy")])
    assert table.row("proxy_server").mean > table.row("host_network").mean
    assert "proxy_server" in table.render()


def test_compare_refuses_single_config():
    with pytest.raises(ExperimentError):
        compare_strategies([ExperimentConfig()])


def test_compare_refuses_uncontrolled():
    with pytest.raises(ExperimentError, match="seed"):
        compare_strategies([ExperimentConfig(), ExperimentConfig(strategy="proxy_server", seed=1)])


def test_unknown_variant():
    with pytest.raises(ExperimentError):
        variant(ExperimentConfig(), "quantum")
