import polars as pl


def filter_by_range(
    df: pl.DataFrame, col: str, start: float | None = None, end: float | None = None
) -> pl.DataFrame:
    """Subset a dataframe on a numeric column

    Parameters
    ----------
    df : pl.DataFrame
        the dataframe to subset
    col : str
        name of the column to filter on, e.g. "iter" or "t"
    start : Optional[float]
        smallest value to include
    end : Optional[float]
        largest value to include, exclusive
    """
    predicates = []
    if start is not None:
        predicates.append(pl.col(col) >= start)
    if end is not None:
        predicates.append(pl.col(col) < end)
    return df.filter(*predicates) if predicates else df


def long_losses(log: pl.DataFrame) -> pl.DataFrame:
    """Training log reshaped to (iter, term, value) rows for plotting"""
    return log.unpivot(
        index="iter", on=["L_m", "L_nm", "L_veik", "total"], variable_name="term"
    )


def summarize_ablation(runs: pl.DataFrame) -> pl.DataFrame:
    """Median and spread of per-seed results for every schedule

    Expects one row per (schedule, seed) with columns d_C, d_H and spikes.
    """
    return (
        runs.group_by("schedule", maintain_order=True)
        .agg(
            d_C_median=pl.col("d_C").median(),
            d_C_min=pl.col("d_C").min(),
            d_C_max=pl.col("d_C").max(),
            d_H_median=pl.col("d_H").median(),
            runs_with_spikes=(pl.col("spikes") > 0).sum(),
            seeds=pl.col("seed").len(),
        )
    )
