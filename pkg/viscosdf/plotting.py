from pathlib import Path

import altair as alt
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import polars as pl
from great_tables import GT

from .dftools import filter_by_range, long_losses
from .extract import GridField, SurfaceMesh
from .palettes import Band, Default, LossTerm


class Charts:
    @classmethod
    def training_curves(
        cls,
        log: pl.DataFrame,
        subtitle: str = "",
        fontSize: int = 20,
        start: int | None = None,
        end: int | None = None,
    ):
        df = long_losses(filter_by_range(log, "iter", start, end))
        return (
            alt.Chart(df)
            .mark_line(size=2)
            .encode(
                alt.X("iter:Q").title("Iteration"),
                alt.Y("value:Q").title("Loss").scale(type="log"),
                alt.Color("term:N")
                .scale(domain=[t.name for t in LossTerm], range=[t.value for t in LossTerm])
                .title("Term"),
            )
            .properties(
                title=alt.Title("Training Losses", subtitle=subtitle, fontSize=fontSize)
            )
        )

    @classmethod
    def viscosity(cls, log: pl.DataFrame):
        return (
            alt.Chart(log)
            .mark_line(color=Default.ORANGE, size=2)
            .encode(alt.X("iter:Q").title("Iteration"), alt.Y("eps:Q").title("Viscosity"))
        )

    @classmethod
    def band_energy(cls, energies: pl.DataFrame, subtitle: str = "", fontSize: int = 20):
        df = energies.with_columns(
            band=pl.format("{} < |w| <= {}", pl.col("band_lo").round(1), pl.col("band_hi").round(1))
        ).filter(pl.col("energy") > 0)
        bands = df["band"].unique(maintain_order=True).to_list()
        return (
            alt.Chart(df)
            .mark_line(size=2)
            .encode(
                alt.X("t:Q").title("Time"),
                alt.Y("energy:Q").title("Energy").scale(type="log"),
                alt.Color("band:N")
                .scale(domain=bands, range=[b.value for b in Band][: len(bands)])
                .title("Band"),
            )
            .properties(title=alt.Title("Spectral Energy", subtitle=subtitle, fontSize=fontSize))
        )

    @classmethod
    def ablation(cls, summary: pl.DataFrame):
        return (
            alt.Chart(summary)
            .mark_bar(color=Default.BLUE)
            .encode(
                alt.X("schedule:N").sort(None).title("Schedule"),
                alt.Y("d_C_median:Q").title("Median Chamfer"),
            )
        )

    @staticmethod
    def save(chart, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        chart.save(str(path))
        return path


class Figures:
    @classmethod
    def field_contour(cls, grid: GridField, mesh: SurfaceMesh | None, path, title: str = ""):
        """Field image with its zero-level contour (2D grids only)"""
        if grid.dim != 2:
            raise ValueError("field figures are drawn for 2D grids only")
        lo = grid.origin
        hi = grid.origin + grid.spacing * (np.array(grid.shape) - 1)
        fig, ax = plt.subplots(figsize=(6, 6))
        image = ax.imshow(
            grid.values.T,
            origin="lower",
            extent=(lo[0], hi[0], lo[1], hi[1]),
            cmap="RdBu",
        )
        fig.colorbar(image, ax=ax, shrink=0.8)
        if mesh is not None and not mesh.is_empty:
            for line in mesh.polylines():
                pts = mesh.vertices[line]
                ax.plot(pts[:, 0], pts[:, 1], color=Default.BLACK, linewidth=1.2)
        ax.set_aspect("equal")
        ax.set_title(title)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        return path


class Tables:
    @classmethod
    def metrics(cls, df: pl.DataFrame, title: str = "Reconstruction metrics"):
        return (
            GT(df)
            .tab_header(title=title)
            .fmt_number(columns=["d_C", "d_H", "squared_chamfer"], n_sigfigs=4)
            .fmt_number(columns=["iou"], decimals=4)
            .sub_missing(missing_text="-")
        )

    @classmethod
    def ablation(cls, summary: pl.DataFrame, title: str = "Ablation on viscosity decay"):
        return (
            GT(summary)
            .tab_header(title=title)
            .fmt_number(columns=["d_C_median", "d_C_min", "d_C_max", "d_H_median"], n_sigfigs=4)
        )

    @staticmethod
    def save(table: GT, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(table.as_raw_html())
        return path
