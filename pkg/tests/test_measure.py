import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rankmfg.measure import EmpiricalMeasure, cdf_eval, mixture, second_moment, shift_measure, w1_distance

from oracles import w1_sorted

E = EmpiricalMeasure
points = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=40)


def test_construction_merges_and_sorts():
    mu = E([2.0, 0.0, 2.0], [0.25, 0.5, 0.25])
    assert mu.locations.tolist() == [0.0, 2.0]
    assert mu.weights.tolist() == [0.5, 0.5]
    with pytest.raises(ValueError):
        mu.locations[0] = 1.0


@pytest.mark.parametrize("locs,w", [([], None), ([0, 1], [0.5, 0.6]), ([0, 1], [1.5, -0.5]),
                                    ([np.inf], [1.0]), ([0, 1], [1.0])])
def test_construction_rejects_bad_input(locs, w):
    with pytest.raises(ValueError):
        E(locs, w)


def test_zero_weight_atoms_dropped():
    assert len(E([0.0, 1.0], [1.0, 0.0])) == 1


def test_cdf_examples():
    u = E.uniform([1, 2, 3])
    assert cdf_eval(u, 2.0) == pytest.approx(2 / 3, abs=1e-15)
    assert cdf_eval(E.dirac(0.0), 0.0) == 1.0
    assert cdf_eval(u, 0.5) == 0.0
    assert cdf_eval(u, 3.0) == 1.0


@given(pts=points)
def test_cdf_monotone_and_right_continuous(pts):
    mu = E.from_samples(pts)
    xs = np.linspace(-101, 101, 97)
    assert np.all(np.diff(mu.cdf(xs)) >= 0)
    for a in mu.locations:
        above = np.nextafter(a, np.inf)
        # adjacent floats can both be atoms; then the jump at `above` is correct
        if above not in mu.locations:
            assert mu.cdf(a) == mu.cdf(above)
        assert mu.cdf_left(a) <= mu.cdf(a)


def test_quantile():
    mu = E.uniform([1, 2, 3, 4])
    assert mu.quantile(0.25) == 1.0 and mu.quantile(0.26) == 2.0 and mu.quantile(1.0) == 4.0
    with pytest.raises(ValueError):
        mu.quantile(1.5)


def test_w1_examples():
    assert w1_distance(E.dirac(0), E.dirac(2)) == 2.0
    mu = E.uniform([0.1, 0.7, 3.3])
    assert w1_distance(mu, mu) == 0.0
    assert w1_distance(E.uniform([1, 3]), E.uniform([2, 4])) == 1.0


@settings(max_examples=50)
@given(a=st.lists(st.floats(-50, 50), min_size=5, max_size=5), b=st.lists(st.floats(-50, 50), min_size=5, max_size=5))
def test_w1_matches_sorted_matching(a, b):
    assert w1_distance(E.from_samples(a), E.from_samples(b)) == pytest.approx(w1_sorted(a, b), abs=1e-9)


@settings(max_examples=50)
@given(a=points, b=points, c=points)
def test_w1_metric_axioms(a, b, c):
    A, B, C = E.from_samples(a), E.from_samples(b), E.from_samples(c)
    assert w1_distance(A, B) == w1_distance(B, A)
    assert w1_distance(A, C) <= w1_distance(A, B) + w1_distance(B, C) + 1e-12
    assert w1_distance(A, B) >= 0
    if w1_distance(A, B) == 0:
        assert A == B


@settings(max_examples=50)
@given(a=st.lists(st.integers(-100, 100), min_size=1, max_size=30),
       b=st.lists(st.integers(-100, 100), min_size=1, max_size=30), q=st.integers(-64, 64))
def test_w1_translation_invariance_exact_on_dyadics(a, b, q):
    A, B = E.from_samples(np.asarray(a) / 8), E.from_samples(np.asarray(b) / 8)
    assert w1_distance(shift_measure(A, q / 8), shift_measure(B, q / 8)) == w1_distance(A, B)


@settings(max_examples=50)
@given(a=points, b=points, q=st.floats(-10, 10))
def test_w1_translation_invariance_general(a, b, q):
    A, B = E.from_samples(a), E.from_samples(b)
    assume(len({*np.asarray(a) - q}) == len(A) and len({*np.asarray(b) - q}) == len(B))
    d = w1_distance(A, B)
    assert w1_distance(A.shift(q), B.shift(q)) == pytest.approx(d, rel=1e-12, abs=1e-11)


def test_shift_examples():
    assert shift_measure(E.dirac(0), -2) == E.dirac(2)
    u = E.uniform([1, 2])
    assert shift_measure(u, 0) == u
    assert shift_measure(E.uniform([0, 1]), 0.5).cdf(0.0) == 0.5


def test_mixture_examples():
    mu, nu = E.uniform([0, 1]), E.uniform([2, 3])
    assert mixture(mu, nu, 0) is mu
    assert mixture(mu, nu, 1) is nu
    m = mixture(E.dirac(0), E.dirac(1), 0.5)
    assert m.locations.tolist() == [0.0, 1.0] and m.weights.tolist() == [0.5, 0.5]
    with pytest.raises(ValueError):
        mixture(mu, nu, 1.5)


@given(a=points, b=points, lam=st.floats(0, 1))
def test_mixture_mass_and_sorted(a, b, lam):
    m = mixture(E.from_samples(a), E.from_samples(b), lam)
    assert abs(m.weights.sum() - 1) <= 1e-12
    assert np.all(np.diff(m.locations) > 0)


def test_second_moment_examples():
    assert second_moment(E.dirac(0)) == 0.0
    assert second_moment(E.uniform([-1, 1])) == 1.0
    assert second_moment(E.uniform([1, 2, 3])) == pytest.approx(14 / 3, abs=1e-14)


@given(pts=points, s=st.floats(-10, 10))
def test_parallel_axis(pts, s):
    mu = E.from_samples(pts)
    lhs = mu.shift(-s).second_moment()
    rhs = mu.second_moment() + 2 * s * mu.mean() + s * s
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@given(pts=points)
def test_text_round_trip_bit_exact(pts):
    mu = E.from_samples(pts)
    assert E.from_text(mu.to_text()) == mu


def test_file_round_trip(tmp_path):
    mu = E([0.1, 1 / 3, 2.5], [0.2, 0.3, 0.5])
    back = E.load(mu.save(tmp_path / "m.csv"))
    assert back == mu
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "location,weight"
    with pytest.raises(ValueError):
        E.from_text("x,w\n0,1\n")


def test_resample_reproducible():
    mu = E.from_samples(np.arange(10.0))
    a = mu.resample(100, np.random.default_rng(1))
    b = mu.resample(100, np.random.default_rng(1))
    assert a == b and set(a.locations) <= set(mu.locations)
