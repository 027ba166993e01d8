import xml.etree.ElementTree as ET

import numpy as np
import pytest

from rsmfc.errors import InvalidArgumentError
from rsmfc.grid_rng import ScalarPath, make_grid
from rsmfc.plotting import emit_plot

SVG = "{http://www.w3.org/2000/svg}"


def _series():
    g = make_grid(1.0, 100)
    return {"sin": ScalarPath(g, np.sin(g.nodes)), "pair": (g.nodes, g.nodes ** 2)}


def test_canvas_and_content(tmp_path):
    path = emit_plot(_series(), tmp_path / "a.svg", title="demo <1>", ylabel="x")
    root = ET.parse(path).getroot()
    assert root.get("width") == "800" and root.get("height") == "500"
    assert root.get("viewBox") == "0 0 800 500"
    assert len(root.findall(f"{SVG}polyline")) == 2
    texts = [t.text for t in root.iter(f"{SVG}text")]
    assert "demo <1>" in texts and "sin" in texts and "pair" in texts


def test_byte_identical_reruns(tmp_path):
    a = emit_plot(_series(), tmp_path / "a.svg").read_bytes()
    b = emit_plot(_series(), tmp_path / "b.svg").read_bytes()
    assert a == b


def test_blow_up_marker(tmp_path):
    g = make_grid(1.0, 10)
    v = np.arange(11.0)
    v[6] = np.inf
    path = emit_plot({"x": ScalarPath.from_values(g, v)}, tmp_path / "c.svg")
    root = ET.parse(path).getroot()
    assert len([p for p in root.iter(f"{SVG}path") if p.get("class") == "blow-up"]) == 1
    assert "x (blow-up)" in [t.text for t in root.iter(f"{SVG}text")]
    pts = root.find(f"{SVG}polyline").get("points").split()
    assert len(pts) == 6


def test_constant_series(tmp_path):
    g = make_grid(1.0, 4)
    emit_plot({"c": ScalarPath(g, np.ones(5))}, tmp_path / "d.svg")


def test_empty_series_rejected(tmp_path):
    with pytest.raises(InvalidArgumentError):
        emit_plot({}, tmp_path / "e.svg")
    with pytest.raises(InvalidArgumentError):
        emit_plot({"x": ([], [])}, tmp_path / "e.svg")
