import json
import xml.etree.ElementTree as ET

import pytest

from ppl.plots import (
    PlotInputError,
    heatmap_svg,
    histogram_svg,
    load_input,
    occlusion_svg,
    render_inputs,
    robustness_svg,
)

NS = "{http://www.w3.org/2000/svg}"


def _parse(svg):
    return ET.fromstring(svg)


def _sweep(path, label, accs):
    recs = [{"kind": "gaussian_blur", "param": float(i), "accuracy": a} for i, a in enumerate(accs)]
    path.write_text(json.dumps({"label": label, "checkpoint": "x", "records": recs}))
    return path


def _aggregate(path, label, mass):
    edges = [i / len(mass) for i in range(len(mass) + 1)]
    path.write_text(json.dumps({"label": label, "histogram": {"edges": edges, "mass": mass}, "n_images": 1,
                                "entropy": {"mean": 1.0, "std": 0.0}}))
    return path


def test_robustness_one_line_per_series():
    root = _parse(robustness_svg({"naive": [(0, 0.9), (1, 0.7)], "ppl": [(0, 0.95), (1, 0.9)]}, "gaussian_blur"))
    assert len(root.findall(f".//{NS}polyline")) == 2
    text = "".join(t.text or "" for t in root.iter(f"{NS}text"))
    assert "naive" in text and "ppl" in text


def test_histogram_overlay_and_escaping():
    rep = {"histogram": {"edges": [0, 0.5, 1], "mass": [0.25, 0.75]}}
    root = _parse(histogram_svg({"a<b": rep, "c&d": rep}))
    assert len(root.findall(f".//{NS}polyline")) == 2
    assert any("a<b" == (t.text or "") for t in root.iter(f"{NS}text"))


def test_occlusion_and_heatmap():
    rows = [{"mask_size": 14.0, "row": 0.0, "col": float(c), "recall": 0.9, "drop": 0.1} for c in range(4)]
    assert _parse(occlusion_svg(rows, "occ")).tag == f"{NS}svg"
    cells = [{"row": float(r), "col": float(c), "cde": 0.0, "normalized": (r + c) / 2}
             for r in range(2) for c in range(2)]
    root = _parse(heatmap_svg(cells, "map"))
    assert len(root.findall(f".//{NS}rect")) >= 4


def test_load_input_classification(tmp_path):
    assert load_input(_sweep(tmp_path / "s.json", "a", [0.9]))[0] == "sweep"
    assert load_input(_aggregate(tmp_path / "h.json", "a", [1.0]))[0] == "cde_aggregate"
    occ = tmp_path / "o.csv"
    occ.write_text("mask_size,row,col,recall,drop\n14,0,0,1.0,0.0\n")
    assert load_input(occ)[0] == "occlusion"
    cde = tmp_path / "c.csv"
    cde.write_text("row,col,cde,normalized\n0,0,0.5,1.0\n")
    assert load_input(cde)[0] == "cde_map"
    for name, body in [("e.csv", "a,b\n1,2\n"), ("f.csv", "row,col,cde,normalized\n"),
                       ("g.json", "{"), ("h.json", "[1]"), ("i.json", '{"records": [{"x": 1}]}'),
                       ("j.json", '{"histogram": {"edges": [0, 1], "mass": [0.5, 0.5]}}'),
                       ("k.csv", "row,col,cde,normalized\n0,0,abc,1\n")]:
        (tmp_path / name).write_text(body)
        with pytest.raises(PlotInputError):
            load_input(tmp_path / name)


def test_render_inputs_merges_sweeps(tmp_path):
    a = _sweep(tmp_path / "a.json", "naive", [0.9, 0.8])
    b = _sweep(tmp_path / "b.json", "ppl", [0.95, 0.9])
    h1 = _aggregate(tmp_path / "h1.json", "naive", [0.5, 0.5])
    h2 = _aggregate(tmp_path / "h2.json", "ppl", [0.2, 0.8])
    written = render_inputs([a, b, h1, h2], tmp_path / "out")
    names = sorted(p.name for p in written)
    assert names == ["cde_histogram.svg", "robustness_gaussian_blur.svg"]
    root = _parse((tmp_path / "out" / "robustness_gaussian_blur.svg").read_text())
    assert len(root.findall(f".//{NS}polyline")) == 2
