"""Figure rendering for coverage tables and quantile curves.

Writes static files next to the CSV outputs; uses the Agg backend so no
display is required in batch runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "score": dict(color="#1b6ca8", marker="o"),
    "pscr": dict(color="#2a9d8f", marker="s"),
    "rscr": dict(color="#264653", marker="^"),
    "wald": dict(color="#e76f51", marker="v"),
    "lrt": dict(color="#b08900", marker="d"),
}


def coverage_figure(table, path, alpha: float = 0.05) -> None:
    """Coverage vs probe coordinate, one line per statistic, nominal level
    and 3 standard error band marked."""
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    by_stat: dict = {}
    for row in table.rows:
        by_stat.setdefault(row.statistic, []).append(row)
    nominal = 1.0 - alpha
    for stat, rows in by_stat.items():
        rows = sorted(rows, key=lambda r: r.probe)
        probes = [r.probe for r in rows]
        cov = [r.coverage for r in rows]
        ax.plot(probes, cov, label=stat.upper(),
                **_STYLE.get(stat, dict(marker="x")))
    if table.rows:
        se = max(r.se for r in table.rows)
        ax.axhspan(nominal - 3 * se, nominal + 3 * se,
                   color="gray", alpha=0.15, lw=0)
    ax.axhline(nominal, color="black", lw=0.8, ls="--")
    ax.set_xlabel("probe")
    ax.set_ylabel("coverage")
    ax.set_title(f"{table.scenario.kind}: coverage of the true parameter")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def quantile_figure(rows, path) -> None:
    """Empirical vs chi-squared reference quantiles, one curve per statistic;
    the diagonal is the exact-distribution line."""
    fig, ax = plt.subplots(figsize=(5.2, 5.0))
    by_stat: dict = {}
    for row in rows:
        by_stat.setdefault(row.statistic, []).append(row)
    top = 0.0
    for stat, stat_rows in by_stat.items():
        stat_rows = sorted(stat_rows, key=lambda r: r.level)
        ref = [r.reference for r in stat_rows]
        emp = [r.empirical for r in stat_rows]
        top = max(top, max(ref), max(emp))
        style = dict(_STYLE.get(stat, dict(marker="x")))
        style["marker"] = None
        ax.plot(ref, emp, label=stat.upper(), **style)
    ax.plot([0, top], [0, top], color="black", lw=0.8, ls="--")
    ax.set_xlabel("chi-squared reference quantile")
    ax.set_ylabel("empirical quantile")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
