import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from proxygrad.artifacts import (dequantize, quantize, read_csv, read_image, read_manifest,
                                 write_csv, write_image, write_manifest)
from proxygrad.layers import ActivationRule
from proxygrad.netspec import NetSpecError, build_network, load_network_spec


def test_quantize_endpoints():
    assert quantize([-1.0, 0.0, 1.0]).tolist() == [0, 128, 255]
    assert quantize([-3.0, 3.0]).tolist() == [0, 255]
    assert dequantize([0, 255]).tolist() == [-1.0, 1.0]


@given(arrays(np.float64, (1, 3, 4), elements=st.floats(-1, 1)))
def test_image_roundtrip_within_one_level(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("img") / "x.pgm"
    write_image(path, x)
    assert np.abs(read_image(path) - x).max() <= 1 / 255 + 1e-12


def test_color_image_and_header(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, (3, 2, 5))
    path = write_image(tmp_path / "c.ppm", x)
    assert path.read_bytes().startswith(b"P6\n5 2\n255\n")
    assert read_image(path).shape == (3, 2, 5)
    gray = write_image(tmp_path / "g.pgm", np.zeros((2, 3)))
    assert gray.read_bytes()[:11] == b"P5\n3 2\n255\n"
    with pytest.raises(ValueError):
        write_image(tmp_path / "bad.pgm", np.zeros((2, 2, 2)))


def test_read_image_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    assert read_image(path).ravel().tolist() == [-1.0, 1.0]


def test_csv_and_manifest(tmp_path):
    path = write_csv(tmp_path / "t.csv", ["a", "b", "c"], [(1, 0.1, True), (2, np.float64(1 / 3), False)])
    text = path.read_text()
    assert text.splitlines() == ["a,b,c", "1,0.1,1", "2,0.3333333333333333,0"]
    assert read_csv(path)[1]["b"] == "0.3333333333333333"
    m = write_manifest(tmp_path / "m.json", {"b": 1, "a": [1, 2]})
    assert m.read_text().index('"a"') < m.read_text().index('"b"')
    assert read_manifest(m) == {"a": [1, 2], "b": 1}


SPEC = [
    {"type": "input", "params": {"shape": [1, 8, 8]}},
    {"type": "conv2d", "params": {"out_channels": 4, "kernel_size": 3, "padding": "same"}},
    {"type": "batchnorm"},
    {"type": "activation", "label": "act1"},
    {"type": "maxpool2d", "params": {"kernel": 2}},
    {"type": "conv2d", "params": {"out_channels": 2, "kernel_size": 3, "bias": False}},
    {"type": "global_avg_pool"},
    {"type": "dense", "params": {"out_features": 3}},
    {"type": "select", "params": {"index": 1}},
]


def test_build_network(tmp_path):
    path = tmp_path / "net.json"
    path.write_text(json.dumps(SPEC))
    g = build_network(load_network_spec(path), ActivationRule.relu(), seed=1)
    assert g.nodes[g.node_id("x")].shape == (1, 8, 8)
    val, tape = g.forward({"x": np.zeros((1, 8, 8))})
    assert np.isfinite(val)
    assert tape.value("act1").shape == (1, 4, 8, 8)
    again = build_network(SPEC, ActivationRule.relu(), seed=1)
    assert all(np.array_equal(g.params[k], again.params[k]) for k in g.params)


def test_explicit_weights():
    spec = [{"type": "input", "params": {"shape": [1, 1, 3]}},
            {"type": "conv2d", "params": {"out_channels": 1, "kernel_size": 1,
                                          "weight": [[[[2.0]]]], "bias_value": [0.5]}},
            {"type": "sum"}]
    g = build_network(spec)
    assert g.forward({"x": np.ones((1, 1, 3))})[0] == pytest.approx(7.5)


@pytest.mark.parametrize("records,fragment", [
    ([{"type": "conv2d"}], "layer 0"),
    ([{"type": "input", "params": {"shape": [8, 8]}}], "layer 0 (input)"),
    ([{"type": "input", "params": {"shape": [1, 4, 4]}}, {"type": "softmax"}], "layer 1 (softmax)"),
    ([{"type": "input", "params": {"shape": [1, 4, 4]}},
      {"type": "conv2d", "params": {"out_channels": 2, "kernel_size": 5}}], "layer 1 (conv2d)"),
    ([{"type": "input", "params": {"shape": [1, 4, 4]}},
      {"type": "dense", "params": {"out_features": 2, "weight": [[1.0]]}}], "layer 1 (dense)"),
    ([{"type": "input", "params": {"shape": [1, 4, 4]}},
      {"type": "select", "params": {"index": 99}}], "layer 1 (select)"),
    ([{"type": "input", "params": {"shape": [1, 4, 4]}}, {"type": "activation"}], "output"),
])
def test_network_errors(records, fragment):
    with pytest.raises(NetSpecError, match=fragment.replace("(", r"\(").replace(")", r"\)")):
        build_network(records)


def test_load_network_spec_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[{")
    with pytest.raises(NetSpecError, match="line 1"):
        load_network_spec(bad)
    bad.write_text("{}")
    with pytest.raises(NetSpecError):
        load_network_spec(bad)
