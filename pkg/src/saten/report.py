"""Aggregation and formatting of per-layer cost reports."""

from __future__ import annotations

from .layer import CostReport

_SUMMED = (
    "params_tt", "params_sparse", "params_total", "mac_tt", "mac_saten",
    "dense_params", "dense_macs", "storage_bytes",
)


def aggregate(reports: dict[str, CostReport]) -> dict:
    totals = {key: sum(getattr(r, key) for r in reports.values()) for key in _SUMMED}
    dense = totals["dense_params"]
    totals["compression_ratio"] = dense / totals["params_total"] if totals["params_total"] else None
    totals["mac_reduction"] = totals["dense_macs"] / totals["mac_saten"] if totals["mac_saten"] else None
    totals["l_lin"] = totals["params_tt"] / dense if dense else None
    totals["rho_lin"] = totals["params_sparse"] / dense if dense else None
    return totals


def _pct(x):
    return "-" if x is None else f"{100 * x:.1f}"


def format_table(rows: dict[str, dict], totals: dict) -> str:
    """Human-facing summary; columns follow the usual L_lin / rho_lin / MAC layout."""
    header = f"{'layer':<32} {'shape':>12} {'pattern':>12} {'L_lin%':>7} {'rho_lin%':>8} {'MAC red.':>8}"
    lines = [header, "-" * len(header)]
    for name, row in rows.items():
        shape = "x".join(map(str, row["shape"]))
        l_lin = row["params_tt"] / row["dense_params"]
        lines.append(
            f"{name:<32} {shape:>12} {row['pattern']:>12} {_pct(l_lin):>7} "
            f"{_pct(row['density']):>8} {row['mac_reduction']:>7.2f}x"
        )
    if rows:
        lines.append("-" * len(header))
        lines.append(
            f"{'total':<32} {'':>12} {'':>12} {_pct(totals['l_lin']):>7} "
            f"{_pct(totals['rho_lin']):>8} {totals['mac_reduction']:>7.2f}x"
        )
    return "\n".join(lines)
