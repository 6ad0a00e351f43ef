"""Plot-ready outputs: histogram tables and SVG charts, deviation plots, RGB zone colours.

Figures are written with matplotlib's SVG backend using a fixed hash salt and
no date stamp, so identical data produce identical files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import Empty, MissingColumn  # noqa: E402
from .features import FeatureMatrix  # noqa: E402

STYLE = {
    "svg.hashsalt": "cityprobe",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (4.5, 2.8),
}

RGB_COLUMNS = ("residential", "commercial", "recreation")


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


@dataclass
class Histogram:
    bins: list[float]
    counts: list[int]
    width: float | None  # None means one bar per distinct value


def histogram(values: Sequence[float], bin_width: float | None = None) -> Histogram:
    """Count values per bin.

    With ``bin_width`` the bins are ``[k*w, (k+1)*w)`` from the bin holding the
    minimum to the bin holding the maximum, empty bins included. Without it,
    each distinct value gets its own bar.
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise Empty("histogram of no values")
    if bin_width is None:
        uniq, counts = np.unique(x, return_counts=True)
        return Histogram([float(u) for u in uniq], [int(c) for c in counts], None)
    if not bin_width > 0:
        raise ValueError("bin width must be positive")
    # small slack keeps 5.5/0.5 from landing in bin 10.999...
    idx = np.floor(x / bin_width + 1e-9).astype(int)
    lo, hi = idx.min(), idx.max()
    counts = np.bincount(idx - lo, minlength=hi - lo + 1)
    bins = [round((lo + i) * bin_width, 12) for i in range(hi - lo + 1)]
    return Histogram(bins, [int(c) for c in counts], float(bin_width))


def emit_histogram(values: Sequence[float], out_stem: str | Path, bin_width: float | None = None,
                   title: str = "", xlabel: str = "value") -> Histogram:
    """Write ``<stem>.csv`` (bin,count) and ``<stem>.svg``."""
    h = histogram(values, bin_width)
    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    with open(out_stem.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "count"])
        for b, c in zip(h.bins, h.counts):
            w.writerow([repr(b), c])

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if h.width is None:
            pos = np.arange(len(h.bins))
            ax.bar(pos, h.counts, width=0.8, color="#4c72b0")
            ax.set_xticks(pos)
            ax.set_xticklabels([f"{b:g}" for b in h.bins], rotation=90 if len(h.bins) > 12 else 0)
        else:
            ax.bar(h.bins, h.counts, width=h.width * 0.9, align="edge", color="#4c72b0")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("count")
        if title:
            ax.set_title(title)
        _save_svg(fig, out_stem.with_suffix(".svg"))
    return h


def emit_deviation_plot(series: Mapping[str, Sequence[float]], path: str | Path) -> None:
    """Re-scaled deviation per repeat, one line per subject."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, s in series.items():
            ax.plot(np.arange(len(s)), s, marker=".", linewidth=0.8, label=name)
        ax.axhline(0.0, color="0.6", linewidth=0.6)
        ax.set_xlabel("query")
        ax.set_ylabel("re-scaled deviation")
        if series:
            ax.legend(frameon=False)
        _save_svg(fig, Path(path))


@dataclass(frozen=True)
class RgbZone:
    zone: str
    r: int
    g: int
    b: int


def _channel(v: float) -> int:
    return int(min(255, max(0, math.floor(v + 0.5))))


def rgb_zones(features: FeatureMatrix, rescale: bool = False) -> list[RgbZone]:
    cols = []
    for name in RGB_COLUMNS:
        if name not in features.feature_names:
            raise MissingColumn(f"feature matrix lacks column {name!r}")
        cols.append(features.column(name) * (25.5 if rescale else 1.0))
    return [RgbZone(p.rendered, _channel(r), _channel(g), _channel(b))
            for p, r, g, b in zip(features.places, *cols)]


def emit_rgb_map(features: FeatureMatrix, path: str | Path, rescale: bool = False) -> list[RgbZone]:
    """Write ``zone,r,g,b`` rows (red residential, green commercial, blue recreation)."""
    zones = rgb_zones(features, rescale)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["zone", "r", "g", "b"])
        for z in zones:
            w.writerow([z.zone, z.r, z.g, z.b])
    return zones


def write_correlation_csv(rows, path_or_file) -> None:
    def dump(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "correlation", "p_value", "n"])
        for row in rows:
            w.writerow([row.feature, f"{row.r:.4f}", f"{row.p:.4f}", row.n])

    if hasattr(path_or_file, "write"):
        dump(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            dump(fh)
