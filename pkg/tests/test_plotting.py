import math
import xml.etree.ElementTree as ET

import pytest

from bdlab.plotting import line_chart_svg, nice_ticks, trajectory_charts, write_trajectory_charts
from bdlab.trainer import TrajectoryPoint

NS = "{http://www.w3.org/2000/svg}"


def traj(n=120, k=50):
    return [
        TrajectoryPoint(s, 0.69 - s * 1e-3, 0.69, 0.69, 0.01 * math.sin(s), 0.1, 1.0,
                        0.5 if s < k else 0.9, 0.5 if s < k else 0.1, 1e-3)
        for s in range(n)
    ]


def test_ticks_cover_range():
    t = nice_ticks(0.0, 0.93)
    assert t[0] >= 0.0 and t[-1] <= 0.93 + 1e-9 and len(t) >= 3
    assert nice_ticks(1.0, 1.0)


def test_svg_is_self_contained_xml():
    svg = line_chart_svg("t <&>", "x", "y", [("a", [0, 1, 2], [0.0, float("nan"), 2.0])])
    root = ET.fromstring(svg)
    assert root.tag == NS + "svg"
    assert "href" not in svg and "url(" not in svg
    # a non-finite point splits the series into two pieces
    assert len(root.findall(f".//{NS}polyline")) == 2


def test_four_charts_and_byte_stability(tmp_path):
    charts = trajectory_charts(traj(), "run")
    assert sorted(charts) == ["combined_loss.svg", "cosine.svg", "task_losses.svg", "weights.svg"]
    a = write_trajectory_charts(tmp_path / "a", traj(), "run")
    b = write_trajectory_charts(tmp_path / "b", traj(), "run")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_weights_chart_is_flat_before_recompute():
    root = ET.fromstring(trajectory_charts(traj(120, 50))["weights.svg"])
    w_u = root.findall(f".//{NS}polyline")[0]
    pts = [tuple(map(float, p.split(","))) for p in w_u.get("points").split()]
    early = {y for _, y in pts[:50]}
    assert len(early) == 1
    assert pts[60][1] < pts[0][1]
