"""Plot a run directory written by ``dltdoa run``.

Usage: python3 scripts/plot_run.py RUN_DIR [OUT.png]

Top panel: ranging frequency against walk progress (from
frequency_timeline.csv). Bottom panel: per-tick localization error coloured by
estimate source (from ticks.csv). Documentation only; matplotlib is not a
dependency of the package.
"""

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def main(run_dir, out=None):
    run_dir = Path(run_dir)
    timeline = _rows(run_dir / "frequency_timeline.csv")
    ticks = _rows(run_dir / "ticks.csv")
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(8, 6), sharex=False)
    top.step([float(r["progress"]) for r in timeline], [float(r["f_dyn"]) for r in timeline], where="post")
    top.set_xlabel("walk progress")
    top.set_ylabel("ranging frequency (Hz)")
    for source in sorted({r["source"] for r in ticks}):
        sel = [r for r in ticks if r["source"] == source]
        bottom.plot([float(r["timestamp"]) for r in sel], [100 * float(r["error_m"]) for r in sel], ".",
                    ms=2, label=source)
    bottom.set_xlabel("time (s)")
    bottom.set_ylabel("error (cm)")
    bottom.legend(markerscale=4)
    fig.tight_layout()
    fig.savefig(out or run_dir / "run.png", dpi=120)


if __name__ == "__main__":
    main(*sys.argv[1:3])
