import polars as pl
import pytest

from viscosdf.dftools import filter_by_range, long_losses, summarize_ablation


@pytest.fixture
def log():
    return pl.DataFrame(
        {
            "iter": [0, 10, 20, 30],
            "eps": [1.0, 0.5, 0.1, 0.0],
            "L_m": [1.0, 0.5, 0.2, 0.1],
            "L_nm": [0.3, 0.2, 0.1, 0.1],
            "L_veik": [2.0, 1.0, 0.5, 0.4],
            "total": [3.3, 1.7, 0.8, 0.6],
            "grad_norm": [1.0, 1.0, 1.0, 1.0],
            "ms": [0.0, 0.0, 0.0, 0.0],
        }
    )


def test_filter_by_range(log):
    assert filter_by_range(log, "iter", 10, 30)["iter"].to_list() == [10, 20]
    assert filter_by_range(log, "iter", start=20)["iter"].to_list() == [20, 30]
    assert filter_by_range(log, "iter").equals(log)


def test_long_losses(log):
    df = long_losses(log)
    assert df.columns == ["iter", "term", "value"]
    assert df.height == 16
    assert set(df["term"].unique()) == {"L_m", "L_nm", "L_veik", "total"}


def test_summarize_ablation():
    runs = pl.DataFrame(
        {
            "schedule": ["baseline", "baseline", "baseline", "zero (plain Eikonal)"],
            "seed": [0, 1, 2, 0],
            "d_C": [0.01, 0.03, 0.02, 0.05],
            "d_H": [0.1, 0.3, 0.2, 0.5],
            "spikes": [0, 2, 0, 1],
        }
    )
    summary = summarize_ablation(runs)
    assert summary.columns == ["schedule", "d_C_median", "d_C_min", "d_C_max", "d_H_median", "runs_with_spikes", "seeds"]
    first = summary.row(0, named=True)
    assert first["schedule"] == "baseline"
    assert first["d_C_median"] == pytest.approx(0.02)
    assert first["d_C_min"] == 0.01 and first["d_C_max"] == 0.03
    assert first["runs_with_spikes"] == 1
    assert first["seeds"] == 3
    assert summary["schedule"].to_list() == ["baseline", "zero (plain Eikonal)"]
