import json
import math

import numpy as np
import pytest

from yieldforge import analysis as A
from yieldforge import expr as E
from yieldforge.data import cylindrical_coords, flower_surface
from yieldforge.plasticity import YieldModelHandle

REFERENCE_MODEL = "rho - 52.73*sin(3.01*theta - 9.45) - 215.01"
FLOWER = "sqrt(1.5)*rho*(1 + 0.325*sin(3*theta)) - 250"


def test_polar_convexity_reference_numbers():
    r = A.polar_convexity(52.73, 3.01, -9.45, 215.01)
    assert r.A1 == pytest.approx(-22410.7, rel=1e-3)
    assert r.A2 == pytest.approx(125393.6, rel=1e-3)
    assert r.A3 == pytest.approx(96611.7, rel=1e-3)
    assert r.roots[0] == pytest.approx(-0.686, abs=1e-2)
    assert r.roots[1] == pytest.approx(6.281, abs=1e-2)
    assert len(r.violation) == 1
    lo, hi = r.violation[0]
    assert lo == -1.0 and hi == pytest.approx(-0.686, abs=1e-3)
    assert not r.convex


def test_polar_convexity_circle():
    r = A.polar_convexity(0.0, 3.0, 0.0, 5.0)
    assert (r.A1, r.A2, r.A3) == (0.0, 0.0, 25.0)
    assert r.convex


def _polar_samples(c1, c2, c3, c4, n=720):
    h = YieldModelHandle.symbolic(f"rho - ({c1})*sin(({c2})*theta + ({c3})) - ({c4})")
    S = A.surface_samples(h, [0.0], np.arange(n) * 2 * math.pi / n, (1e-6, 1e4))
    return h, S


def test_polar_linear_case_matches_hessian():
    # c2 = 1: A1 = 0 and the condition is linear in X
    for c1, c4 in ((10.0, 100.0), (60.0, 100.0)):
        r = A.polar_convexity(c1, 1.0, 0.0, c4)
        assert r.A1 == 0.0
        h, S = _polar_samples(c1, 1.0, 0.0, c4)
        hc = A.hessian_convexity(h, S)
        X = np.sin(cylindrical_coords(S)[:, 2])
        agree = np.mean(hc.violations == (r.condition(X) < 0))
        assert agree >= 0.99
        assert r.convex == (hc.violation_fraction == 0.0)


def test_hessian_agrees_with_polar_on_reference_model():
    r = A.polar_convexity(52.73, 3.01, -9.45, 215.01)
    h, S = _polar_samples(52.73, 3.01, -9.45, 215.01)
    hc = A.hessian_convexity(h, S)
    X = np.sin(3.01 * cylindrical_coords(S)[:, 2] - 9.45)
    assert np.mean(hc.violations == (r.condition(X) < 0)) >= 0.95
    assert 0 < hc.violation_fraction < 1


def test_hessian_von_mises_convex():
    h = YieldModelHandle.symbolic("sqrt(1.5)*rho - 250")
    S = A.surface_samples(h, [-100.0, 0.0, 100.0], np.linspace(0, 6, 50), (1, 1e3))
    hc = A.hessian_convexity(h, S)
    assert hc.violation_fraction == 0.0 and not hc.degenerate
    assert hc.n_excluded == 0


def test_hessian_flower_violations_where_polar_curvature_fails():
    h = YieldModelHandle.symbolic(FLOWER)
    S = A.surface_samples(h, [0.0, 300.0], np.arange(720) * 2 * math.pi / 720, (1, 1e3))
    hc = A.hessian_convexity(h, S)
    th = cylindrical_coords(S)[:, 2]
    # r = 1/g with g = 1 + A sin(3 theta) is convex where g + g'' = 1 - 8 A sin(3 theta) >= 0
    expect = 1 - 8 * 0.325 * np.sin(3 * th) < 0
    assert hc.violation_fraction > 0
    assert np.mean(hc.violations == expect) >= 0.95


def test_hessian_linear_is_degenerate():
    hc = A.hessian_convexity("p - 1", [[1.0, 2.0, 0.5], [3.0, -1.0, 0.2]])
    assert hc.degenerate and hc.violation_fraction == 0.0
    assert hc.to_dict()["degenerate"] is True


def test_symmetry_reference_model_exact_defect():
    h = YieldModelHandle.symbolic(REFERENCE_MODEL)
    r = A.symmetry_error(h, 3, theta_hat=(3.01, -9.45))
    n1 = r.per_n[0]
    # 2 * 52.73 * sin(delta / 2) with delta = 3.01 * 2 pi / 3 - 2 pi
    delta = 3.01 * 2 * math.pi / 3 - 2 * math.pi
    assert n1["max_error"] == pytest.approx(2 * 52.73 * math.sin(delta / 2), rel=1e-6)
    assert n1["argmax_theta_hat"] == pytest.approx(-delta / 2, abs=1e-4)


def test_symmetry_exact_periodic_model():
    r = A.symmetry_error(lambda t: np.sin(3 * t), 3, n_theta=10_000)
    assert r.max_error < 1e-12


def test_symmetry_csv(tmp_path):
    r = A.symmetry_error(lambda t: np.sin(3.1 * t), 3, n_theta=100, theta_hat=(3.1, 0.0))
    r.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "theta,theta_hat,err_n1,err_n2"
    assert len(lines) == 101
    assert json.loads(json.dumps(r.to_dict()))["k_p"] == 3


def test_surface_rms():
    bench = flower_surface(n_p=5, n_theta=40)
    same = A.surface_rms(YieldModelHandle.symbolic(FLOWER), bench)
    assert same.rms < 1e-12 and same.n_failed == 0
    scaled = A.surface_rms(YieldModelHandle.symbolic("sqrt(1.5)*rho/1.01*(1 + 0.325*sin(3*theta)) - 250"), bench)
    assert scaled.rms == pytest.approx(0.01, rel=1e-9)
    miss = A.surface_rms(YieldModelHandle.symbolic("rho + 1"), bench)
    assert miss.n_failed == len(bench) and math.isnan(miss.rms)


def test_match_sinusoid_forms():
    cases = {
        "0.3*sin(2*x+1)+4": (0.3, 2.0, 1.0, 4.0),
        "4 - sin(x)": (-1.0, 1.0, 0.0, 4.0),
        "-sin(4.84*x)": (-1.0, 4.84, 0.0, 0.0),
        "cos(x/2)*3": (3.0, 0.5, math.pi / 2, 0.0),
    }
    for text, want in cases.items():
        got = A.match_sinusoid(E.parse(text, ["x"]))
        assert got is not None
        assert np.allclose([got.a, got.b, got.c, got.d], want)
        x = np.linspace(0, 1, 7)
        assert np.allclose(got(x), E.evaluate_array(E.parse(text, ["x"]), [x]))
    for text in ("sin(x)*x", "sin(x*x)", "x + 1", "sin(x) + cos(x)"):
        assert A.match_sinusoid(E.parse(text, ["x"])) is None


def test_polar_coefficients_from_symbolic_model():
    h = YieldModelHandle.symbolic(REFERENCE_MODEL)
    assert np.allclose(A.polar_coefficients(h), [52.73, 3.01, -9.45, 215.01])
    assert A.polar_coefficients(YieldModelHandle.symbolic(FLOWER)) is None
