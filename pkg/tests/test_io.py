import json
import logging

import numpy as np
import pytest

from gridtwin import io
from gridtwin.errors import ConfigError, SchemaError
from gridtwin.fixtures import feeder13
from gridtwin.impedance import sweep
from gridtwin.network import ConductorLibrary
from gridtwin.powerflow import SampleSet
from gridtwin.topology import fit_laplacian, recover_topology

from conftest import fixture_data


def rewrite(tmp_path, read, write, name, *args):
    """Read ``name`` and write it back; return both byte strings."""
    first = (tmp_path / name).read_bytes()
    obj = read(tmp_path / name, *args)
    write(tmp_path / ("again_" + name), obj)
    return first, (tmp_path / ("again_" + name)).read_bytes()


class TestNetwork:
    def test_round_trip(self, tmp_path):
        net = feeder13()
        io.write_network(tmp_path / "net.json", net)
        a, b = rewrite(tmp_path, io.read_network, io.write_network, "net.json")
        assert a == b
        back = io.read_network(tmp_path / "net.json")
        np.testing.assert_array_equal(back.r, net.r)
        assert back.names == net.names and back.base == net.base

    def test_unknown_field_warns(self, tmp_path, caplog):
        d = io.network_to_dict(feeder13())
        d["branches"][0]["ampacity"] = 400
        (tmp_path / "n.json").write_text(json.dumps(d))
        caplog.set_level(logging.WARNING, logger="gridtwin.io")
        io.read_network(tmp_path / "n.json")
        assert "ampacity" in caplog.text

    def test_missing_field_errors(self, tmp_path):
        d = io.network_to_dict(feeder13())
        del d["branches"][2]["x"]
        (tmp_path / "n.json").write_text(json.dumps(d))
        with pytest.raises(SchemaError, match="branch #2"):
            io.read_network(tmp_path / "n.json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            io.read_network(tmp_path / "nope.json")

    def test_bad_json(self, tmp_path):
        (tmp_path / "n.json").write_text("{")
        with pytest.raises(SchemaError):
            io.read_network(tmp_path / "n.json")


class TestSamples:
    def test_round_trip(self, tmp_path):
        _, _, s = fixture_data("feeder13")
        io.write_samples(tmp_path / "s.csv", tmp_path / "sub.csv", s)
        back = io.read_samples(tmp_path / "s.csv", tmp_path / "sub.csv")
        for a, b in ((back.p, s.p), (back.q, s.q), (back.v, s.v), (back.v0, s.v0)):
            np.testing.assert_array_equal(a, b)
        io.write_samples(tmp_path / "s2.csv", tmp_path / "sub2.csv", back)
        assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()
        assert (tmp_path / "sub.csv").read_bytes() == (tmp_path / "sub2.csv").read_bytes()

    def test_empty(self, tmp_path):
        s = SampleSet(np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 3)), np.empty(0))
        io.write_samples(tmp_path / "s.csv", tmp_path / "sub.csv", s)
        assert (tmp_path / "s.csv").read_text() == "k,bus,p,q,v\n"
        back = io.read_samples(tmp_path / "s.csv", tmp_path / "sub.csv", n=3)
        assert back.K == 0 and back.n == 3

    def test_row_order_is_irrelevant(self, tmp_path):
        _, _, s = fixture_data("feeder13")
        body, sub = io.samples_to_csv(s.subset(slice(0, 4)))
        lines = body.splitlines()
        (tmp_path / "s.csv").write_text("\n".join([lines[0]] + lines[1:][::-1]) + "\n")
        (tmp_path / "sub.csv").write_text(sub)
        back = io.read_samples(tmp_path / "s.csv", tmp_path / "sub.csv")
        np.testing.assert_array_equal(back.v, s.v[:4])

    def test_missing_row(self, tmp_path):
        _, _, s = fixture_data("feeder13")
        body, sub = io.samples_to_csv(s.subset(slice(0, 2)))
        (tmp_path / "s.csv").write_text("\n".join(body.splitlines()[:-1]) + "\n")
        (tmp_path / "sub.csv").write_text(sub)
        with pytest.raises(SchemaError):
            io.read_samples(tmp_path / "s.csv", tmp_path / "sub.csv")

    def test_missing_column(self, tmp_path):
        (tmp_path / "s.csv").write_text("k,bus,p,q\n0,1,0.1,0.1\n")
        (tmp_path / "sub.csv").write_text("k,v0\n0,1.0\n")
        with pytest.raises(SchemaError, match="missing column"):
            io.read_samples(tmp_path / "s.csv", tmp_path / "sub.csv")

    def test_extra_column_warns(self, tmp_path, caplog):
        (tmp_path / "s.csv").write_text("k,bus,p,q,v,meter\n0,1,-0.1,-0.1,0.99,A7\n")
        (tmp_path / "sub.csv").write_text("k,v0\n0,1.0\n")
        caplog.set_level(logging.WARNING, logger="gridtwin.io")
        s = io.read_samples(tmp_path / "s.csv", tmp_path / "sub.csv")
        assert s.K == 1 and "meter" in caplog.text

    def test_non_numeric(self, tmp_path):
        (tmp_path / "s.csv").write_text("k,bus,p,q,v\n0,1,abc,-0.1,0.99\n")
        (tmp_path / "sub.csv").write_text("k,v0\n0,1.0\n")
        with pytest.raises(SchemaError):
            io.read_samples(tmp_path / "s.csv", tmp_path / "sub.csv")


class TestLibrary:
    def test_round_trip(self, tmp_path):
        io.write_library(tmp_path / "lib.json", ConductorLibrary([2.0655, 0.5153, 1.2840]))
        a, b = rewrite(tmp_path, io.read_library, io.write_library, "lib.json")
        assert a == b
        assert json.loads(a)["ratios"] == [0.5153, 1.284, 2.0655]

    def test_missing_ratios(self, tmp_path):
        (tmp_path / "lib.json").write_text('{"values": [1.0]}')
        with pytest.raises(SchemaError):
            io.read_library(tmp_path / "lib.json")


class TestStageOutputs:
    def test_topology(self, tmp_path):
        net, _, s = fixture_data("feeder13")
        est = fit_laplacian(s)
        adj = recover_topology(est)
        io.write_topology(tmp_path / "t.json", est, adj)
        data = io.read_topology(tmp_path / "t.json")
        assert io.topology_tree_edges(data) == net.edges(include_root=True)
        assert data["n"] == net.n

    def test_topology_missing_edges(self, tmp_path):
        (tmp_path / "t.json").write_text('{"n": 2, "root_adjacent": [1]}')
        with pytest.raises(SchemaError):
            io.read_topology(tmp_path / "t.json")

    def test_impedances(self, tmp_path):
        net, lib, s = fixture_data("feeder13")
        res = sweep(net, s, lib)
        io.write_impedances(tmp_path / "z.json", res, lib)
        back = io.read_impedances(tmp_path / "z.json")
        assert back == {j: (e.r_hat, e.x_hat) for j, e in res.estimates.items()}
        rec = json.loads((tmp_path / "z.json").read_text())["branches"][0]
        assert set(rec) >= {"r", "x", "lambda_index", "objective", "confidence"}
        assert lib[rec["lambda_index"]] == pytest.approx(rec["r"] / rec["x"])

    def test_heatmap(self, tmp_path):
        net, _, s = fixture_data("feeder13")
        io.write_heatmap(tmp_path / "h.csv", fit_laplacian(s).Y_star)
        rows = (tmp_path / "h.csv").read_text().splitlines()
        assert len(rows) == net.n + 1
        cells = rows[1].split(",")
        assert cells[0] == "1" and cells[1] == ""
        vals = [float(c) for c in cells[2:]]
        assert min(vals) == 0.0 and max(vals) == 1.0
