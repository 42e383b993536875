"""
Charts of evaluation metrics over training, one line per detector tag.

Each line is written with the SVG id "<metric>-<tag>" and the plot area with
"<metric>-axes", so read_chart_series can map the drawn polylines back to
(epoch, value) pairs.
"""

import logging
import os
import re
import xml.etree.ElementTree as ElementTree

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from collabdet.errors import ConfigurationError  # noqa: E402
from collabdet.run_log import RUN_LOG_NAME  # noqa: E402

logger = logging.getLogger(__name__)

METRIC_TITLES = {"map": "Test mAP", "corloc": "Train CorLoc"}
METRIC_LIMITS = (0.0, 1.0)
TAG_STYLES = {
    "I_W": {"color": "tab:gray", "linestyle": ":"},
    "CL_W": {"color": "tab:blue", "linestyle": "--"},
    "CL_S": {"color": "tab:red", "linestyle": "-"},
    "CS_S": {"color": "tab:green", "linestyle": "-."},
}
NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


def epoch_limits(run_log):
    """x range of every chart: first to last logged epoch, widened by half an epoch when they coincide."""
    epochs = [row.epoch for row in run_log.rows]
    low, high = min(epochs), max(epochs)
    return (low - 0.5, high + 0.5) if low == high else (low, high)


def _plot_metric(run_log, metric, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.patch.set_gid(f"{metric}-axes")
    plotted = {}
    for tag in run_log.detectors():
        epochs, values = run_log.series(tag, metric)
        (line,) = ax.plot(epochs, values, marker="o", label=tag, gid=f"{metric}-{tag}", **TAG_STYLES.get(tag, {}))
        xs, ys = line.get_data()
        plotted[tag] = ([int(x) for x in xs], [float(y) for y in ys])
    ax.set_xlabel("Epoch")
    ax.set_ylabel(METRIC_TITLES[metric])
    ax.set_xlim(*epoch_limits(run_log))
    ax.set_ylim(*METRIC_LIMITS)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return plotted


def _path_points(element):
    """Vertices of the first <path> directly under element, as (x, y) pairs in SVG units."""
    for child in element:
        if child.tag.endswith("path"):
            numbers = [float(n) for n in NUMBER.findall(child.get("d", ""))]
            return list(zip(numbers[0::2], numbers[1::2]))
    return []


def read_chart_series(path, metric, x_limits, y_limits=METRIC_LIMITS):
    """
    Parse a chart written by emit_plots back into data coordinates.

    Returns:
        dict: tag -> (epochs, values) as floats.
    """
    try:
        root = ElementTree.parse(path).getroot()
    except (OSError, ElementTree.ParseError) as e:
        raise ConfigurationError(f"Cannot read chart {path}: {e}")
    groups = {}
    for element in root.iter():
        gid = element.get("id")
        if gid and gid.startswith(f"{metric}-") and gid not in groups:
            groups[gid] = element
    if f"{metric}-axes" not in groups:
        raise ConfigurationError(f"Chart {path} has no {metric} plot area")
    corners = _path_points(groups.pop(f"{metric}-axes"))
    left, right = min(x for x, _ in corners), max(x for x, _ in corners)
    top, bottom = min(y for _, y in corners), max(y for _, y in corners)
    series = {}
    for gid, element in groups.items():
        points = _path_points(element)
        epochs = [x_limits[0] + (x - left) / (right - left) * (x_limits[1] - x_limits[0]) for x, _ in points]
        values = [y_limits[0] + (bottom - y) / (bottom - top) * (y_limits[1] - y_limits[0]) for _, y in points]
        series[gid[len(metric) + 1:]] = (epochs, values)
    return series


def emit_plots(run_log, output_dir):
    """
    Write map.svg, corloc.svg and the raw run log CSV to output_dir.

    Returns:
        dict: {"csv": path, "charts": {metric: path}, "series": {metric: {tag: (epochs, values)}}},
            or None for an empty log.
    """
    if len(run_log) == 0:
        logger.warning("Run log is empty, no charts written")
        return None
    os.makedirs(output_dir, exist_ok=True)
    csv_path = run_log.write_csv(os.path.join(output_dir, RUN_LOG_NAME))
    charts = {}
    series = {}
    for metric in METRIC_TITLES:
        path = os.path.join(output_dir, f"{metric}.svg")
        series[metric] = _plot_metric(run_log, metric, path)
        charts[metric] = path
        logger.info(f"Wrote {metric} chart to {path}")
    return {"csv": csv_path, "charts": charts, "series": series}
