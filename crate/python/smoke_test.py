"""Smoke test for the Python bindings.

Install with `pip install --no-build-isolation ./crates/py`, then run
`python -m pytest python/smoke_test.py` or `python python/smoke_test.py`.
"""

import json
import pathlib

import pytest

import momentbound as mb

NETWORKS = pathlib.Path(__file__).resolve().parent.parent / "networks"


def dimer():
    return mb.Network.load(str(NETWORKS / "dimer.json"))


def test_network_roundtrip():
    net = dimer()
    assert net.species == ["X"]
    assert net.parameters == ["K1", "K2", "K3"]
    assert net.uncertain == ["K1", "K2"]
    assert net.correlation == pytest.approx(0.6)
    again = mb.Network.from_json(net.to_json())
    assert again.to_json() == net.to_json()
    assert net.with_correlation(0.2).correlation == pytest.approx(0.2)
    with pytest.raises(ValueError):
        net.with_correlation(1.5)
    with pytest.raises(ValueError):
        mb.Network.from_json('{"species": [], "parameters": [], "reactions": []}')


def test_gamma_moments():
    assert mb.gamma_moment(2.0, 0.4, 1) == pytest.approx(0.8, abs=1e-15)
    assert mb.gamma_moment(2.0, 0.4, 2) == pytest.approx(0.96, abs=1e-15)
    assert mb.gamma_moment(4.0, 0.1, 2) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(ValueError):
        mb.gamma_moment(-1.0, 0.4, 1)


def test_moment_system_is_exact():
    sys = mb.moment_system(dimer(), 1, 1)
    assert sys.n_rows == 3
    assert len(sys.keys) == 11
    first = {k: (n, d) for k, n, d in sys.row(0)}
    assert first["E[X]"] == ("1", "25")
    assert first["E[X^2]"] == ("-1", "25")
    assert first["E[K1]"] == ("5", "1")


def test_bounds_bracket_the_fixed_parameter_mean():
    fixed = mb.Network.load(str(NETWORKS / "dimer_fixed.json"))
    b = mb.bounds(fixed, "X", rho=4, sigma=0)
    assert b.optimal
    assert b.lb <= b.ub
    assert b.gap == pytest.approx(b.ub - b.lb)
    d = b.as_dict()
    assert d["lower"]["status"] == "optimal"
    json.dumps(d)


def test_scaled_and_unscaled_agree():
    net = mb.Network.load(str(NETWORKS / "dimer_independent.json"))
    a = mb.bounds(net, "X", rho=2, sigma=2, scale={"X": 5.0, "K1": 3.0, "K2": 0.7})
    one = mb.bounds(net, "X", rho=2, sigma=2, no_scale=True)
    assert a.optimal and one.optimal
    assert a.lb == pytest.approx(one.lb, rel=1e-6)
    assert a.ub == pytest.approx(one.ub, rel=1e-6)


def test_sweep_and_export():
    rows = mb.sweep(dimer(), "X", [1, 2], r_values=[0.0, 0.5], rho=2)
    assert [(r["r"], r["sigma"]) for r in rows] == [(0.0, 1), (0.0, 2), (0.5, 1), (0.5, 2)]
    assert all(r["lb_status"] == "optimal" and r["ub_status"] == "optimal" for r in rows)
    text = mb.export_sdpa(dimer(), "X", 1, 1)
    lines = [l for l in text.splitlines() if not l.startswith('"')]
    sizes = [int(v) for v in lines[2].replace(",", " ").split()]
    assert [s for s in sizes if s > 0] == [6, 2, 2, 3]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
