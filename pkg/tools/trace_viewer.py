#!/usr/bin/env python3
from __future__ import annotations

import argparse
import csv
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load_trace(path: Path) -> Dict[str, List[float]]:
    """Carica una force-trace CSV (t, f, f_d, x, y, theta, phi), saltando i commenti."""
    with path.open("r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip() and not line.startswith("#")]
    reader = csv.DictReader(lines)
    cols: Dict[str, List[float]] = {}
    for row in reader:
        for key, value in row.items():
            cols.setdefault(key, []).append(float(value))
    return cols


def plot_tension(trace: Dict[str, List[float]], title: str | None = None):
    if not trace.get("t"):
        return None
    fig, ax = plt.subplots()
    ax.plot(trace["t"], trace["f"], label="f")
    ax.plot(trace["t"], trace["f_d"], linestyle="--", label="f_d")
    ax.set_xlabel("step (0.5 s)")
    ax.set_ylabel("tension [N]")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, linestyle="--", alpha=0.3)
    plt.tight_layout()
    return fig


def plot_twist(trace: Dict[str, List[float]], title: str | None = None):
    if not trace.get("t"):
        return None
    fig, ax = plt.subplots()
    ax.plot(trace["t"], trace["phi"], label="phi")
    ax.plot(trace["t"], trace["theta"], label="theta")
    ax.set_xlabel("step (0.5 s)")
    ax.set_ylabel("angle [rad]")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, linestyle="--", alpha=0.3)
    plt.tight_layout()
    return fig


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        description="Viewer for 'wireharness track' force-trace CSV."
    )
    parser.add_argument("trace_csv", help="CSV file produced by 'wireharness track'")
    parser.add_argument("--no-twist", action="store_true", help="skip the twist plot")
    args = parser.parse_args(argv)

    trace_path = Path(args.trace_csv)
    trace = load_trace(trace_path)
    title = trace_path.name

    figs = []
    fig_f = plot_tension(trace, title=title + " – tension")
    if fig_f is not None:
        figs.append(("tension", fig_f))
    if not args.no_twist:
        fig_phi = plot_twist(trace, title=title + " – twist")
        if fig_phi is not None:
            figs.append(("twist", fig_phi))

    # PNG accanto al CSV, niente plt.show()
    for kind, fig in figs:
        out_path = trace_path.with_suffix(f".{kind}.png")
        fig.savefig(out_path)
        print(f"Saved {out_path}")


if __name__ == "__main__":
    main()
