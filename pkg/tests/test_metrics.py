import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridtwin.errors import ConstantRow, UniverseMismatch
from gridtwin.fixtures import feeder13, feeder37
from gridtwin.impedance import sweep
from gridtwin.metrics import (
    compare_topology,
    evaluate,
    normalize_minmax,
    propagation_trace,
    relative_errors,
)
from gridtwin.network import network_from_parents
from gridtwin.topology import fit_laplacian, recover_topology

from conftest import fixture_data


def truth_pairs(net, scale=1.0):
    return {j: (scale * net.r[j - 1], scale * net.x[j - 1]) for j in range(1, net.n + 1)}


class TestCompareTopology:
    def test_identical(self):
        net = feeder13()
        assert compare_topology(net, net) == (1.0, 1.0)

    def test_one_missing_of_ten(self):
        net = network_from_parents(list(range(11)), [0.01] * 11, [0.01] * 11)
        edges = sorted(net.edges(), key=min)
        assert len(edges) == 10
        assert compare_topology(edges[1:], net) == (1.0, 0.9)

    def test_extra_edge(self):
        net = feeder13()
        p, r = compare_topology(list(net.edges()) + [(2, 9)], net)
        assert r == 1.0
        assert p == pytest.approx(len(net.edges()) / (len(net.edges()) + 1))

    def test_orientation_and_order(self, rng):
        net = feeder37()
        edges = [tuple(e)[::-1] if rng.random() < 0.5 else tuple(e) for e in net.edges()]
        rng.shuffle(edges)
        assert compare_topology(edges, net) == (1.0, 1.0)

    def test_root_edges_ignored(self):
        net = feeder13()
        assert compare_topology(net.edges(include_root=True), net) == (1.0, 1.0)

    def test_end_to_end_13bus(self):
        net, _, s = fixture_data("feeder13")
        assert compare_topology(recover_topology(fit_laplacian(s)), net) == (1.0, 1.0)

    def test_universe_mismatch(self):
        with pytest.raises(UniverseMismatch):
            compare_topology(feeder13(), feeder37())

    def test_empty_sets(self):
        net = network_from_parents([0, 0], [0.01, 0.01], [0.01, 0.01])
        assert compare_topology([], net) == (1.0, 1.0)


class TestRelativeErrors:
    def test_exact(self):
        net = feeder13()
        rows, mr, mx = relative_errors(truth_pairs(net), net)
        assert mr == mx == 0.0
        assert [b.branch for b in rows] == list(range(1, net.n + 1))

    def test_one_percent(self):
        net = feeder13()
        est = truth_pairs(net)
        est[4] = (1.01 * net.r[3], net.x[3])
        rows, mr, mx = relative_errors(est, net)
        assert rows[3].rel_err_r == pytest.approx(1.0, rel=1e-9)
        assert mr == pytest.approx(1.0, rel=1e-9) and mx == 0.0

    @given(st.floats(1e-3, 1e3))
    def test_scale_aware(self, c):
        net = feeder13()
        est = {j: (r * 1.03, x * 0.98) for j, (r, x) in truth_pairs(net).items()}
        _, mr, mx = relative_errors(est, net)
        big = net.with_impedances(c * net.r, c * net.x)
        _, mr2, mx2 = relative_errors({j: (c * r, c * x) for j, (r, x) in est.items()}, big)
        assert mr2 == pytest.approx(mr, rel=1e-9)
        assert mx2 == pytest.approx(mx, rel=1e-9)

    def test_branch_set_mismatch(self):
        net = feeder13()
        est = truth_pairs(net)
        del est[1]
        with pytest.raises(UniverseMismatch):
            relative_errors(est, net)

    def test_sweep_result_13bus(self):
        net, lib, s = fixture_data("feeder13")
        _, mr, mx = relative_errors(sweep(net, s, lib, "lad"), net)
        assert max(mr, mx) <= 1e-4

    def test_propagation_trace_order(self):
        net = feeder13()
        est = truth_pairs(net)
        leaf = net.layer(net.D)[0]
        est[leaf] = (2 * net.r[leaf - 1], net.x[leaf - 1])
        trace = propagation_trace(relative_errors(est, net)[0])
        assert [t["layer"] for t in trace] == list(range(net.D, 0, -1))
        assert trace[0]["max_rel_err_r"] == pytest.approx(100.0)
        assert sum(t["branches"] for t in trace) == net.n


class TestNormalize:
    def test_example(self):
        np.testing.assert_allclose(normalize_minmax([-2, 0, 2]), [0, 0.5, 1])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30).filter(lambda v: max(v) > min(v)))
    def test_order_preserved(self, row):
        z = normalize_minmax(row)
        order = np.argsort(row, kind="stable")
        assert np.all(np.diff(z[order]) >= 0)
        assert z[np.argmin(row)] == 0.0 and z[np.argmax(row)] == 1.0

    def test_constant(self):
        with pytest.raises(ConstantRow):
            normalize_minmax([3.0, 3.0])


class TestReport:
    def report(self):
        net, lib, s = fixture_data("feeder13")
        return evaluate(net, recover_topology(fit_laplacian(s)), sweep(net, s, lib),
                        runtimes={"topology": 0.1}, info={"fixture": "feeder13"})

    def test_fields(self):
        rep = self.report()
        assert (rep.edge_precision, rep.edge_recall) == (1.0, 1.0)
        assert len(rep.per_branch_errors) == 10
        assert all(b.rel_err_r >= 0 and b.rel_err_x >= 0 for b in rep.per_branch_errors)

    def test_json_without_runtimes(self):
        d = json.loads(self.report().to_json(runtimes=False))
        assert "runtimes" not in d
        assert d["info"] == {"fixture": "feeder13"}
        assert len(d["per_branch_errors"]) == 10

    def test_csv_rows(self):
        lines = self.report().render("csv").splitlines()
        assert lines[0].startswith("branch,name,layer")
        assert len(lines) == 11

    def test_markdown(self):
        md = self.report().render("md")
        assert md.startswith("# Identification report")
        assert "## Errors by layer" in md and "## Runtimes (s)" in md

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            self.report().render("xml")

    def test_missing_stages_are_nan(self):
        rep = evaluate(feeder13())
        assert np.isnan(rep.edge_precision) and np.isnan(rep.max_rel_err_x)
        assert rep.per_branch_errors == []
