from types import SimpleNamespace

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from iofeedback.dictionary import (
    Dictionary,
    DictionaryEvaluationError,
    check_vanishing_slope,
    get_dictionary,
    linear_dictionary,
    pendulum_dictionary,
    pendulum_ground_truth,
)
from iofeedback.plant import PendulumParams, psi

small = st.floats(-0.5, 0.5, allow_nan=False)


def symbolic_alpha(p):
    """Expand the lifted output map symbolically and read off its coefficients
    on the basis (w1, w2, xi1, xi2, sin w1 - w1, xi1 cos w1 - xi1)."""
    w1, w2, s1, s2, S, C = sp.symbols("w1 w2 xi1 xi2 S C")
    Ts, m, ell, g, mu = (sp.nsimplify(v) for v in (p.Ts, p.m, p.ell, p.g, p.mu))

    def f(x, u):
        return (x[0] + Ts * x[1],
                Ts * g / ell * sp.sin(x[0]) + (1 - Ts * mu / (m * ell ** 2)) * x[1] + Ts / (m * ell) * sp.cos(x[0]) * u)

    x = (w1, (w2 - w1) / Ts)              # left inverse of the two-sample window
    x = f(f(x, s1), s2)
    h = sp.expand(x[0]).subs({sp.sin(w1): S, sp.cos(w1): C})
    poly = sp.Poly(h, w1, w2, s1, s2, S, C)
    c = {mono: coef for mono, coef in zip(poly.monoms(), poly.coeffs())}

    def coef(**powers):
        key = tuple(powers.get(n, 0) for n in ("w1", "w2", "s1", "s2", "S", "C"))
        return c.get(key, 0)

    a5, a6 = coef(S=1), coef(s1=1, C=1)
    assert set(c) <= {(1, 0, 0, 0, 0, 0), (0, 1, 0, 0, 0, 0), (0, 0, 1, 0, 0, 0), (0, 0, 0, 1, 0, 0),
                      (0, 0, 0, 0, 1, 0), (0, 0, 1, 0, 0, 1)}
    alpha = [coef(w1=1) + a5, coef(w2=1), coef(s1=1) + a6, coef(s2=1), a5, a6]
    return np.array([float(a) for a in alpha])


# -- eval_Z ---------------------------------------------------------------------

def test_eval_Z_origin(pdict):
    assert np.array_equal(pdict.eval_Z([0.0, 0.0], [0.0, 0.0]), np.zeros(6))


def test_eval_Z_example(pdict):
    z = pdict.eval_Z([0.1, 0.2], [0.3, 0.4])
    expected = [0.1, 0.2, 0.3, 0.4, np.sin(0.1) - 0.1, 0.3 * np.cos(0.1) - 0.3]
    assert np.allclose(z, expected, atol=1e-16, rtol=0)
    assert pdict.S == 6 and pdict.n_nonlinear == 2


def test_linear_dictionary():
    d = linear_dictionary(3)
    w, xi = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])
    assert np.array_equal(d.eval_Z(w, xi), np.r_[w, xi])
    assert d.S == 6 and d.n_nonlinear == 0


def test_vectorised_eval(pdict, rng):
    w, xi = rng.uniform(-1, 1, (2, 50)), rng.uniform(-1, 1, (2, 50))
    Z = pdict.eval_Z(w, xi)
    assert Z.shape == (6, 50)
    for j in (0, 17, 49):
        assert np.allclose(Z[:, j], pdict.eval_Z(w[:, j], xi[:, j]), atol=0)


def test_non_finite_entry_names_label():
    d = Dictionary(1, (lambda w, xi: np.log(np.abs(w[0])),), ("log|w1|",))
    with pytest.raises(DictionaryEvaluationError, match=r"log\|w1\|"):
        d.eval_Z([0.0], [0.0])


def test_manifest(pdict):
    m = pdict.manifest()
    assert m["N"] == 2 and m["S"] == 6 and len(m["labels"]) == 6


def test_get_dictionary():
    assert get_dictionary("pendulum", 2).S == 6
    assert get_dictionary("linear", 4).S == 8
    with pytest.raises(ValueError):
        get_dictionary("pendulum", 3)
    with pytest.raises(KeyError):
        get_dictionary("nope", 2)


@settings(max_examples=50, deadline=None)
@given(w1=small, w2=small, x1=small, x2=small, a=st.floats(-3, 3, allow_nan=False))
def test_linear_part_is_linear(pdict, w1, w2, x1, x2, a):
    z = pdict.eval_Z([w1, w2], [x1, x2])
    za = pdict.eval_Z([a * w1, a * w2], [a * x1, a * x2])
    assert np.allclose(za[:4], a * z[:4], atol=1e-15)


@pytest.mark.parametrize("d", [pendulum_dictionary(), linear_dictionary(1), linear_dictionary(2)])
def test_Q_vanishes_at_origin(d):
    assert np.all(d.eval_Q(np.zeros(d.N), np.zeros(d.N)) == 0)


# -- ground truth -----------------------------------------------------------------

def test_alpha_matches_symbolic_oracle(params, alpha):
    assert np.allclose(alpha.alpha, symbolic_alpha(params), atol=1e-15)
    assert np.allclose(alpha.alpha, [-0.901, 1.999, 0.01, 0.0, 0.098, 0.01], atol=1e-15)


@pytest.mark.parametrize("p", [PendulumParams(Ts=0.05, m=2.0, ell=0.5, g=9.81, mu=0.3),
                               PendulumParams(mu=0.0)])
def test_alpha_other_parameters(p):
    assert np.allclose(pendulum_ground_truth(p).alpha, symbolic_alpha(p), atol=1e-14)


def test_alpha_degenerate_limit():
    p = SimpleNamespace(Ts=0.0, m=1.0, ell=1.0, g=9.8, mu=0.0)
    assert np.array_equal(pendulum_ground_truth(p).alpha, [-1.0, 2.0, 0.0, 0.0, 0.0, 0.0])


def test_alpha_times_Z_at_origin(pdict, alpha):
    assert alpha.predict(pdict, np.zeros(2), np.zeros(2)) == 0.0


def test_alpha_random_points(model, window, pdict, alpha, rng):
    err = 0.0
    for _ in range(1000):
        w, xi = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        err = max(err, abs(model.output(psi(model, window, w, xi)) - alpha.predict(pdict, w, xi)))
    assert err <= 1e-12


# -- vanishing slope -------------------------------------------------------------

def test_slope_pendulum(pdict):
    rep = check_vanishing_slope(pdict)
    assert rep.passed
    # Q is cubic near the origin, so the ratio falls by ~100x per decade
    assert np.all(rep.ratios[1:] < rep.ratios[:-1] / 50)


def test_slope_identity_term_fails():
    d = Dictionary(2, (lambda w, xi: w[0],), ("w1",))
    rep = check_vanishing_slope(d)
    assert not rep.passed
    assert np.allclose(rep.ratios, rep.ratios[0], rtol=1e-2)


def test_slope_empty_Q():
    rep = check_vanishing_slope(linear_dictionary(2))
    assert rep.passed and np.all(rep.ratios == 0)


def test_slope_radii_validation(pdict):
    with pytest.raises(ValueError):
        check_vanishing_slope(pdict, radii=(1e-2, 1e-1))
    with pytest.raises(ValueError):
        check_vanishing_slope(pdict, radii=(1e-1, 1e-9))
