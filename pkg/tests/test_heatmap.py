import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from lpcontract.fk import SweepResult, sweep
from lpcontract.heatmap import diverging_color, heatmap_svg, render_heatmap

NS = "{http://www.w3.org/2000/svg}"


def cells(svg):
    root = ET.fromstring(svg.encode())
    return [r for r in root.iter(NS + "rect") if r.find(NS + "title") is not None]


def make(values, p=None, t2=None):
    V = np.atleast_2d(np.asarray(values, dtype=float))
    p = np.linspace(1, 3, V.shape[0]) if p is None else np.asarray(p, float)
    t2 = np.linspace(0.1, 5, V.shape[1]) if t2 is None else np.asarray(t2, float)
    return SweepResult(p, t2, V, np.ones(V.shape, bool))


def test_color_scale():
    assert diverging_color(0.0) == "#f7f7f7"
    assert diverging_color(-4.0) == diverging_color(-100.0) == "#2166ac"
    assert diverging_color(4.0) == diverging_color(7.5) == "#b2182b"
    assert diverging_color(2.0) != diverging_color(1.0)
    with pytest.raises(ValueError):
        diverging_color(0.0, 1.0, 1.0)


def test_quadratic_sweep_is_uniform(tmp_path):
    res = sweep("x^2", [1.0, 2.0, 3.0], [0.1, 1.0, 5.0], dx=1e-2)
    np.testing.assert_allclose(res.values, -2.0, atol=1e-3)
    svg = render_heatmap(res, tmp_path / "u0.svg").read_text()
    fills = {r.get("fill") for r in cells(svg)}
    assert len(cells(svg)) == 9
    # -2 sits on a rounding boundary of the 8-bit channels, so allow either neighbour
    assert len(fills) == 1
    assert fills <= {diverging_color(-2.0 + d) for d in (-1e-3, 0.0, 1e-3)}


def test_single_cell_is_labelled():
    svg = heatmap_svg(make([[1.25]]))
    assert len(cells(svg)) == 1
    assert re.search(r">1\.25</text>", svg)


def test_clamping_keeps_raw_value():
    svg = heatmap_svg(make([[-9.0, 0.0, 12.0]]))
    cs = cells(svg)
    assert [c.get("fill") for c in cs] == ["#2166ac", "#f7f7f7", "#b2182b"]
    assert "value=12" in cs[2].find(NS + "title").text


def test_axes_and_colour_bar():
    svg = heatmap_svg(make(np.zeros((4, 5))), title="demo")
    assert ">p</text>" in svg and "θ²" in svg and ">demo</text>" in svg
    for tick in (">4</text>", ">-4</text>", ">0</text>"):
        assert tick in svg


def test_rows_are_drawn_upward_in_p():
    V = np.array([[-3.0], [3.0]])
    cs = cells(heatmap_svg(make(V, p=[1, 3], t2=[1])))
    by_fill = {c.get("fill"): float(c.get("y")) for c in cs}
    assert by_fill[diverging_color(3.0)] < by_fill[diverging_color(-3.0)]


def test_empty_sweep_rejected():
    with pytest.raises(ValueError):
        heatmap_svg(SweepResult(np.zeros(0), np.zeros(0), np.zeros((0, 0)), np.zeros((0, 0), bool)))
