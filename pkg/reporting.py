import logging

import numpy as np
import pandas as pd
import plotly.express as px

logger = logging.getLogger(__name__)

CSV_OPTIONS = dict(index=False, lineterminator="\n", decimal=".")


# =============================================================================
# SUMMARY & INSIGHTS FUNCTIONS
# =============================================================================
def loss_frame(records) -> pd.DataFrame:
    return pd.DataFrame(list(records), columns=["step", "loss"])


def generate_summary(loss_df: pd.DataFrame) -> pd.DataFrame:
    """
    Key metrics of a training run:
      - Steps
      - Final Loss
      - Best Loss
      - Mean Loss over the last 10% of steps
    """
    steps = loss_df.shape[0]
    tail = loss_df["loss"].iloc[-max(steps // 10, 1):] if steps else loss_df["loss"]
    summary_data = {
        "Metric": ["Steps", "Final Loss", "Best Loss", "Tail Mean Loss"],
        "Value": [
            steps,
            float(loss_df["loss"].iloc[-1]) if steps else float("nan"),
            float(loss_df["loss"].min()) if steps else float("nan"),
            float(tail.mean()) if steps else float("nan"),
        ],
    }
    return pd.DataFrame(summary_data)


def generate_auto_insights(loss_df: pd.DataFrame) -> str:
    """One-line description of how the loss moved over a run."""
    try:
        steps = loss_df.shape[0]
        window = max(steps // 10, 1)
        head = loss_df["loss"].iloc[:window].mean()
        tail = loss_df["loss"].iloc[-window:].mean()
        change = (tail - head) / head * 100 if head else 0.0
        best = loss_df.loc[loss_df["loss"].idxmin()]
        return (
            f"Loss moved from {head:.4f} to {tail:.4f} ({change:+.1f}%) over {steps} steps; "
            f"best {best['loss']:.4f} at step {int(best['step'])}."
        )
    except Exception:
        return "Insights not available."


# =============================================================================
# CSV EXPORTS
# =============================================================================
def write_loss_csv(records, path):
    loss_frame(records).to_csv(path, **CSV_OPTIONS)
    logger.info("Wrote loss curve to %s", path)


def schedule_histogram(samples: np.ndarray, bins: int) -> pd.DataFrame:
    """Density histogram of masking ratios over [0, 1]."""
    density, edges = np.histogram(np.asarray(samples, dtype=np.float64), bins=bins, range=(0.0, 1.0), density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return pd.DataFrame({"bin_center": centers, "density": density})


def write_histogram_csv(hist_df: pd.DataFrame, path):
    hist_df.to_csv(path, **CSV_OPTIONS)
    logger.info("Wrote histogram with %d bins to %s", hist_df.shape[0], path)


# =============================================================================
# FIGURES
# =============================================================================
def schedule_figure(hist_df: pd.DataFrame, schedule=None, title: str = "Masking ratio schedule"):
    fig = px.bar(hist_df, x="bin_center", y="density", title=title,
                 labels={"bin_center": "Masking ratio", "density": "Density"})
    if schedule is not None and schedule.has_density:
        grid = np.linspace(0.0, 1.0, 401)
        fig.add_scatter(x=grid, y=schedule.pdf(grid), mode="lines", name="Analytic density")
    return fig


def loss_figure(loss_df: pd.DataFrame, title: str = "Training loss", window: int = 50):
    fig = px.line(loss_df, x="step", y="loss", title=title)
    smoothed = loss_df["loss"].rolling(window, min_periods=1).mean()
    fig.add_scatter(x=loss_df["step"], y=smoothed, mode="lines", name=f"Rolling mean ({window})")
    return fig


def save_figure(fig, path):
    fig.write_html(str(path), include_plotlyjs="cdn")
    logger.info("Wrote figure to %s", path)
