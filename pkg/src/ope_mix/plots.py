"""Figure rendering for benchmark reports.

Every report path draws the per-method MSE curve over the sweep grid to a
PNG next to the delimited output; the CSV stays the normative interface.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .bench import MSEReport

_SWEEP_LABELS = {"m": "number of behavior policies M", "t": "mixing horizon T"}


def render_report(report: MSEReport, out_dir) -> Path:
    """One log-scale MSE curve per method over the sweep grid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series: dict[str, list[tuple[int, float]]] = {}
    for row in report.aggregate():
        series.setdefault(row["method"], []).append((row["sweep_value"], row["mse"]))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for method in sorted(series):
        points = sorted(series[method])
        ax.plot(
            [p[0] for p in points],
            [p[1] for p in points],
            marker="o",
            markersize=3,
            linewidth=1.2,
            label=method,
        )
    ax.set_xlabel(_SWEEP_LABELS.get(report.sweep, report.sweep))
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7, ncol=2, frameon=False)
    fig.tight_layout()
    path = out_dir / f"mse_by_{report.sweep}.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
