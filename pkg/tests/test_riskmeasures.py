import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racer import riskmeasures as rm
from racer.riskmeasures import CategoricalDistribution as CD

from oracles import cvar_by_quantile, cvar_exact, emd_by_sorting


def dist(atoms, probs):
    return CD(np.array(atoms, dtype=float), np.array(probs, dtype=float))


@st.composite
def distributions(draw, max_atoms=8, zeros=True):
    n = draw(st.integers(1, max_atoms))
    atoms = sorted(draw(st.lists(st.integers(-40, 40), min_size=n, max_size=n, unique=True)))
    lo = 0.0 if zeros else 0.05
    w = np.array(draw(st.lists(st.floats(lo, 1.0), min_size=n, max_size=n)))
    if w.sum() == 0:
        w[0] = 1.0
    return CD(np.array(atoms, float) / 4.0, w / w.sum())


alphas = st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99])


# -- validation ---------------------------------------------------------------------------


@pytest.mark.parametrize("atoms,probs", [
    ([0, 1], [0.5, 0.6]),
    ([1, 0], [0.5, 0.5]),
    ([0, 0], [0.5, 0.5]),
    ([0, 1], [1.2, -0.2]),
    ([0, 1, 2], [0.5, 0.5]),
])
def test_invalid_distributions_rejected(atoms, probs):
    with pytest.raises(ValueError):
        dist(atoms, probs)


@pytest.mark.parametrize("alpha", [-0.1, 1.0, 1.5, float("nan")])
def test_invalid_alpha_rejected(alpha):
    with pytest.raises(ValueError):
        rm.cvar(dist([0, 1], [0.5, 0.5]), alpha)


def test_distribution_arrays_are_read_only():
    d = dist([0, 1], [0.5, 0.5])
    with pytest.raises(ValueError):
        d.probs[0] = 1.0


# -- cvar -----------------------------------------------------------------------------------


def test_cvar_adversarial_member():
    assert rm.cvar(dist([1, 2], [0.5, 0.5]), 0.5) == 1.0


def test_cvar_alpha_zero_is_mean():
    d = dist([-1, 0.5, 3], [0.2, 0.3, 0.5])
    assert rm.cvar(d, 0.0) == pytest.approx(d.mean(), abs=1e-15)


def test_cvar_uniform_four_atoms():
    assert rm.cvar(dist([1, 2, 3, 4], [0.25] * 4), 0.75) == 1.0


def test_cvar_straddling_atom():
    # keep 0.5: all of atom 0 (0.3) plus 0.2 of atom 1
    assert rm.cvar(dist([0, 1], [0.3, 0.7]), 0.5) == pytest.approx(0.4, abs=1e-15)


def test_cvar_batched_kernel_matches_scalar():
    rng = np.random.default_rng(3)
    atoms = np.linspace(-2, 2, 7)
    probs = rng.dirichlet(np.ones(7), size=(4, 5))
    out = rm.cvar_from_probs(probs, atoms, 0.6)
    assert out.shape == (4, 5)
    assert out[2, 3] == pytest.approx(rm.cvar(CD(atoms, probs[2, 3]), 0.6), abs=1e-14)


@given(distributions(), alphas)
def test_cvar_matches_quantile_integral(d, alpha):
    assert rm.cvar(d, alpha) == pytest.approx(cvar_by_quantile(d.atoms, d.probs, alpha), abs=1e-9)


@given(distributions(), alphas)
def test_cvar_monotone_in_alpha(d, alpha):
    hi = min(alpha + 0.05, 0.999)
    assert rm.cvar(d, hi) <= rm.cvar(d, alpha) + 1e-9


@given(distributions(zeros=False), st.sampled_from([0.1, 0.5, 0.9]))
def test_cvar_below_mean_strict_unless_point_mass(d, alpha):
    c = rm.cvar(d, alpha)
    if len(d) == 1:
        assert c == pytest.approx(d.mean(), abs=1e-12)
    else:
        assert c < d.mean() - 1e-12


@given(distributions(), alphas)
def test_tail_mean_equals_cvar(d, alpha):
    t = rm.tail(d, alpha)
    assert t.mean() == pytest.approx(rm.cvar(d, alpha), abs=1e-12)
    assert t.probs.sum() == pytest.approx(1.0, abs=1e-12)


# -- cvar gradient --------------------------------------------------------------------------


def _renormalized_cvar(d, alpha):
    def f(p):
        return rm.cvar_from_probs(p / p.sum(), d.atoms, alpha)
    return f


@settings(max_examples=60)
@given(distributions(zeros=False), st.sampled_from([0.0, 0.3, 0.5, 0.9]))
def test_cvar_gradient_matches_finite_differences(d, alpha):
    keep = 1.0 - alpha
    cdf = np.cumsum(d.probs)
    if np.min(np.abs(cdf - keep)) < 1e-3 and alpha > 0:
        return  # at a kink; covered by the subgradient test
    g = rm.cvar_grad(d, alpha)
    # the gradient of the renormalized objective is g projected off the all-ones direction
    projected = g - g @ d.probs
    f = _renormalized_cvar(d, alpha)
    eps = 1e-6
    for i in range(len(d)):
        e = np.zeros(len(d))
        e[i] = eps
        fd = (f(d.probs + e) - f(d.probs - e)) / (2 * eps)
        assert fd == pytest.approx(projected[i], rel=1e-5, abs=1e-7)


def test_cvar_subgradient_at_clip_point_uses_constant_branch():
    # cdf hits keep=0.5 exactly at atom 1: atoms above get no gradient
    d = dist([0, 1, 2, 3], [0.25, 0.25, 0.25, 0.25])
    g = rm.cvar_grad(d, 0.5)
    z = d.atoms
    # d/dp_j = sum_{i >= j, cdf_i < keep} (z_i - z_{i+1}) / keep
    expected = np.array([(z[0] - z[1]) / 0.5, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(g, expected, atol=1e-15)


# -- var ------------------------------------------------------------------------------------


@pytest.mark.parametrize("atoms,probs,alpha,expected", [
    ([1, 2, 3, 4], [0.25] * 4, 0.75, 1.0),
    ([5], [1.0], 0.3, 5.0),
    ([0, 10], [0.5, 0.5], 0.4, 10.0),
])
def test_var_examples(atoms, probs, alpha, expected):
    assert rm.var(dist(atoms, probs), alpha) == expected


@given(distributions(), alphas)
def test_var_is_smallest_atom_reaching_level(d, alpha):
    v = rm.var(d, alpha)
    assert d.cdf(v) >= 1.0 - alpha - 1e-9
    below = d.atoms[d.atoms < v]
    if below.size:
        assert d.cdf(below[-1]) < 1.0 - alpha


# -- tail / emd / mixture -------------------------------------------------------------------


def test_tail_of_adversarial_mixture():
    mix = rm.mixture(rm.adversarial_ensemble(2.0))
    t = rm.tail(mix, 0.5)
    np.testing.assert_array_equal(t.atoms, [-1.0, 1.0])
    np.testing.assert_allclose(t.probs, [0.5, 0.5], atol=1e-15)


def test_tail_alpha_zero_unchanged():
    d = dist([0, 1, 2], [0.2, 0.3, 0.5])
    assert rm.tail(d, 0.0) == d


def test_tail_fractional_straddle():
    t = rm.tail(dist([0, 1], [0.3, 0.7]), 0.5)
    np.testing.assert_allclose(t.probs, [0.6, 0.4], atol=1e-15)


def test_emd_examples():
    d = dist([0, 1, 2], [0.2, 0.3, 0.5])
    assert rm.emd(d, d) == 0.0
    assert rm.emd(CD.point_mass(0.0), CD.point_mass(3.0)) == 3.0


def test_tail_emd_adversarial():
    ds = rm.adversarial_ensemble(2.0)
    mix_tail = rm.tail(rm.mixture(ds), 0.5)
    assert [rm.emd(mix_tail, rm.tail(d, 0.5)) for d in ds] == [1.0, 1.0]
    assert rm.tail_emd_mean(ds, 0.5) == 1.0


@given(distributions(), distributions())
def test_emd_matches_quantile_coupling(x, y):
    ref = emd_by_sorting(x.atoms, x.probs, y.atoms, y.probs)
    assert rm.emd(x, y) == pytest.approx(ref, abs=2e-3 * (1 + ref))


@given(distributions(), distributions())
def test_emd_symmetric_nonnegative(x, y):
    assert rm.emd(x, y) == pytest.approx(rm.emd(y, x), abs=1e-12)
    assert rm.emd(x, y) >= 0.0


def test_mixture_examples():
    d = dist([0, 1, 2], [0.2, 0.3, 0.5])
    assert rm.mixture([d]) == d
    two = rm.mixture([d, d])
    np.testing.assert_allclose(two.probs, d.probs, atol=1e-15)
    mix = rm.mixture(rm.adversarial_ensemble(2.0))
    np.testing.assert_array_equal(mix.atoms, [-1.0, 1.0, 2.0])
    np.testing.assert_allclose(mix.probs, [0.25, 0.25, 0.5], atol=1e-15)


def test_mixture_errors():
    with pytest.raises(ValueError):
        rm.mixture([])
    d = dist([0, 1], [0.5, 0.5])
    with pytest.raises(ValueError):
        rm.mixture([d, d], weights=[0.7, 0.7])


@given(st.lists(distributions(), min_size=1, max_size=4), st.data())
def test_mixture_mean_is_weighted_mean(ds, data):
    w = np.array(data.draw(st.lists(st.floats(0.01, 1.0), min_size=len(ds), max_size=len(ds))))
    w /= w.sum()
    mix = rm.mixture(ds, w)
    assert mix.mean() == pytest.approx(sum(wi * d.mean() for wi, d in zip(w, ds)), abs=1e-9)


# -- gap and theorems -----------------------------------------------------------------------


def test_cvar_gap_examples():
    assert rm.cvar_gap(rm.adversarial_ensemble(2.0), 0.5) == 0.0
    d = dist([0, 1, 2], [0.2, 0.3, 0.5])
    assert rm.cvar_gap([d, d, d], 0.7) == pytest.approx(0.0, abs=1e-15)
    assert rm.cvar_gap([CD.point_mass(0.0), CD.point_mass(1.0)], 0.5) == 0.5


@pytest.mark.parametrize("D", [0.5, 1.0, 2.0, 7.0])
def test_adversarial_gap_zero_tail_emd_half_d(D):
    ds = rm.adversarial_ensemble(D)
    assert rm.cvar_gap(ds, 0.5) == 0.0
    assert rm.tail_emd_mean(ds, 0.5) == pytest.approx(D / 2, abs=1e-12)


@given(distributions(), distributions(), st.floats(0.0, 1.0), alphas)
def test_cvar_convex_over_mixtures(x, y, lam, alpha):
    mix = rm.mixture([x, y], [lam, 1.0 - lam])
    assert rm.cvar(mix, alpha) <= lam * rm.cvar(x, alpha) + (1 - lam) * rm.cvar(y, alpha) + 1e-9


@given(st.lists(distributions(), min_size=2, max_size=5), st.sampled_from([0.1, 0.5, 0.9]))
def test_gap_between_zero_and_tail_emd(ds, alpha):
    gap = rm.cvar_gap(ds, alpha)
    assert gap >= -1e-9
    assert gap <= rm.tail_emd_mean(ds, alpha) + 1e-6


def test_cvar_exact_in_rationals():
    atoms, probs = [-3, 0.5, 2, 8], [0.125, 0.375, 0.25, 0.25]
    for alpha in (0.0, 0.25, 0.5, 0.75):
        ref = float(cvar_exact(atoms, probs, alpha))
        assert rm.cvar(dist(atoms, probs), alpha) == pytest.approx(ref, rel=4e-16, abs=0)


# -- gap experiment -------------------------------------------------------------------------


def test_gap_experiment_rows_respect_bounds():
    res = rm.run_gap_experiment(50, seed=1)
    assert len(res) == 50
    assert np.all(res.cvar_gap >= -1e-9)
    assert np.all(res.cvar_gap <= res.tail_emd_mean + 1e-6)


def test_gap_experiment_zero_scale():
    res = rm.run_gap_experiment(5, seed=2, scale=0.0)
    np.testing.assert_allclose(res.cvar_gap, 0.0, atol=1e-12)
    np.testing.assert_allclose(res.tail_emd_mean, 0.0, atol=1e-12)


def test_gap_experiment_positive_rank_correlation():
    assert rm.run_gap_experiment(200, seed=0).spearman() > 0.5


def test_gap_experiment_rejects_zero_trials():
    with pytest.raises(ValueError):
        rm.run_gap_experiment(0)


def test_gap_csv_reproducible(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    rm.run_gap_experiment(20, seed=5).to_csv(a)
    rm.run_gap_experiment(20, seed=5).to_csv(b)
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.reader(a.open()))
    assert rows[0] == ["trial", "tail_emd_mean", "cvar_gap"]
    assert len(rows) == 1 + 20 + 1
    assert rows[-1][0].startswith("adversarial")
    assert float(rows[-1][2]) == 0.0


def test_gaussian_mixture_discretization():
    spec = rm.GaussianMixtureSpec(np.array([1.0]), np.array([0.0]), np.array([1.0]))
    d = spec.discretize(rm.GAP_GRID)
    assert d.mean() == pytest.approx(0.0, abs=1e-12)
    assert (d.probs * d.atoms**2).sum() == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(ValueError):
        rm.GaussianMixtureSpec(np.array([0.5]), np.array([0.0]), np.array([1.0]))
