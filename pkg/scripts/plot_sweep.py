#!/usr/bin/env python3
"""Plot backdoor/main accuracy curves from sweep or round CSV files.

Usage:
  python scripts/plot_sweep.py ratio  OUT1/sweep.csv [OUT2/sweep.csv ...]
  python scripts/plot_sweep.py rounds OUT/rounds.csv [...]

`ratio` mode draws ba (solid) and ma (dashed) against the malicious ratio,
one pair of curves per input file (label = the rule column). `rounds` mode
draws the per-round loss and accuracy traces of single runs. Figures are
written next to the first input as sweep.png / rounds.png.

Requires matplotlib (install the "plot" extra).
"""

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def plot_ratio(paths):
    fig, (ax_ba, ax_ma) = plt.subplots(1, 2, figsize=(9, 3.5))
    for path in paths:
        rows = [r for r in read_rows(path) if r["ba"]]
        ratios = [float(r["ratio"]) for r in rows]
        label = rows[0]["rule"] if rows else Path(path).stem
        ax_ba.plot(ratios, [float(r["ba"]) for r in rows], marker="o", label=label)
        ax_ma.plot(ratios, [float(r["ma"]) for r in rows], marker="o", label=label)
    for ax, title in ((ax_ba, "backdoor accuracy"), (ax_ma, "main-task accuracy")):
        ax.set_xlabel("malicious ratio")
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        ax.legend()
    out = Path(paths[0]).parent / "sweep.png"
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


def plot_rounds(paths):
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for path in paths:
        rows = read_rows(path)
        label = rows[0]["rule"] if rows else Path(path).stem
        rounds = [int(r["round"]) for r in rows if r["loss"]]
        ax_loss.plot(rounds, [float(r["loss"]) for r in rows if r["loss"]], label=label)
        evald = [r for r in rows if r["ma"]]
        ax_acc.plot([int(r["round"]) for r in evald], [float(r["ma"]) for r in evald],
                    label=f"{label} ma")
        with_ba = [r for r in evald if r["ba"]]
        if with_ba:
            ax_acc.plot([int(r["round"]) for r in with_ba],
                        [float(r["ba"]) for r in with_ba],
                        linestyle="--", label=f"{label} ba")
    ax_loss.set_xlabel("round")
    ax_loss.set_title("training loss")
    ax_acc.set_xlabel("round")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.set_title("accuracy")
    ax_acc.legend()
    out = Path(paths[0]).parent / "rounds.png"
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


def main():
    if len(sys.argv) < 3 or sys.argv[1] not in ("ratio", "rounds"):
        print(__doc__)
        return 2
    mode, paths = sys.argv[1], sys.argv[2:]
    if mode == "ratio":
        plot_ratio(paths)
    else:
        plot_rounds(paths)
    return 0


if __name__ == "__main__":
    sys.exit(main())
