"""Risk measures over categorical return distributions.

Everything here is a pure function. CVaR follows the lower-tail convention:
``alpha`` is the fraction of probability mass *discarded* from the top, so the
retained worst-case tail has mass ``1 - alpha`` and ``alpha -> 1`` is maximally
pessimistic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .validation import check_alpha, check_atoms, check_probs, check_random_state


@dataclass(frozen=True)
class CategoricalDistribution:
    """Probability mass ``probs`` on strictly increasing support ``atoms``."""

    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        atoms = check_atoms(self.atoms)
        probs = check_probs(self.probs)
        if probs.ndim != 1 or probs.shape != atoms.shape:
            raise ValueError(
                f"atoms and probs must be 1-D of equal length, got {atoms.shape} and {probs.shape}"
            )
        atoms.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def _trusted(cls, atoms: np.ndarray, probs: np.ndarray) -> "CategoricalDistribution":
        """Skip validation for arrays derived from already-validated distributions."""
        d = object.__new__(cls)
        atoms.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(d, "atoms", atoms)
        object.__setattr__(d, "probs", probs)
        return d

    @classmethod
    def point_mass(cls, value: float) -> "CategoricalDistribution":
        return cls(np.array([float(value)]), np.array([1.0]))

    def mean(self) -> float:
        return float(self.probs @ self.atoms)

    def cdf(self, z) -> np.ndarray:
        """Right-continuous CDF evaluated at ``z``."""
        idx = np.searchsorted(self.atoms, z, side="right")
        cum = np.empty(self.probs.size + 1)
        cum[0] = 0.0
        np.cumsum(self.probs, out=cum[1:])
        return cum[idx]

    def sample(self, size, rng=None) -> np.ndarray:
        rng = check_random_state(rng)
        return rng.choice(self.atoms, size=size, p=self.probs / self.probs.sum())

    def __len__(self):
        return self.atoms.size

    def __eq__(self, other):
        if not isinstance(other, CategoricalDistribution):
            return NotImplemented
        return np.array_equal(self.atoms, other.atoms) and np.array_equal(self.probs, other.probs)

    __hash__ = None


@dataclass(frozen=True)
class GaussianMixtureSpec:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        s = np.asarray(self.stds, dtype=float)
        if not (w.shape == m.shape == s.shape) or w.ndim != 1:
            raise ValueError("weights, means and stds must be 1-D of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if np.any(s <= 0):
            raise ValueError("mixture std-devs must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    def discretize(self, atoms: np.ndarray) -> CategoricalDistribution:
        """Evaluate the density on ``atoms`` and renormalize."""
        dens = (self.weights * stats.norm.pdf(atoms[:, None], self.means, self.stds)).sum(axis=1)
        return CategoricalDistribution(atoms, dens / dens.sum())


# -- array kernels (batched over leading axes, shared atom grid) --------------


def cvar_from_probs(probs: np.ndarray, atoms: np.ndarray, alpha: float) -> np.ndarray:
    """Batched CVaR over the last axis of ``probs``.

    Clip the CDF at the retained mass, rescale it to a CDF of the worst-case
    tail, difference it back into a PMF and take the expectation.
    """
    keep = 1.0 - alpha
    cdf = np.cumsum(probs, axis=-1)
    tail_cdf = np.minimum(cdf, keep) / keep
    tail_pmf = tail_cdf.copy()
    tail_pmf[..., 1:] -= tail_cdf[..., :-1]
    return tail_pmf @ atoms


def cvar_vjp(probs: np.ndarray, atoms: np.ndarray, alpha: float, grad_out) -> np.ndarray:
    """Vector-Jacobian product of :func:`cvar_from_probs` with respect to ``probs``.

    At the clip point the constant branch of the ``min`` is taken, so atoms
    whose CDF has already reached the retained mass receive no gradient.
    """
    keep = 1.0 - alpha
    cdf = np.cumsum(probs, axis=-1)
    # d cvar / d tail_cdf_i = z_i - z_{i+1}, with z_{n+1} = 0
    d_tail_cdf = atoms - np.append(atoms[1:], 0.0)
    d_cdf = np.where(cdf < keep, d_tail_cdf / keep, 0.0)
    d_probs = np.flip(np.cumsum(np.flip(d_cdf, axis=-1), axis=-1), axis=-1)
    return np.asarray(grad_out)[..., None] * d_probs


# -- distribution-level operations ---------------------------------------------


def cvar(d: CategoricalDistribution, alpha: float) -> float:
    """Mean of the worst ``1 - alpha`` probability mass of ``d``."""
    alpha = check_alpha(alpha)
    return float(cvar_from_probs(d.probs, d.atoms, alpha))


def cvar_grad(d: CategoricalDistribution, alpha: float) -> np.ndarray:
    """Gradient of :func:`cvar` with respect to ``d.probs`` (unconstrained)."""
    alpha = check_alpha(alpha)
    return cvar_vjp(d.probs, d.atoms, alpha, 1.0)


def var(d: CategoricalDistribution, alpha: float) -> float:
    """Smallest atom whose CDF reaches ``1 - alpha``."""
    alpha = check_alpha(alpha)
    cdf = np.cumsum(d.probs)
    # 1e-12 slack absorbs summation rounding in the CDF
    idx = int(np.searchsorted(cdf, 1.0 - alpha - 1e-12, side="left"))
    return float(d.atoms[min(idx, len(d) - 1)])


def tail(d: CategoricalDistribution, alpha: float) -> CategoricalDistribution:
    """Renormalized worst ``1 - alpha`` slice of ``d``.

    The atom straddling the VaR boundary keeps only its fractional share.
    """
    alpha = check_alpha(alpha)
    if alpha == 0.0:
        return d
    keep = 1.0 - alpha
    tail_pmf = np.minimum(np.cumsum(d.probs), keep) / keep
    tail_pmf[1:] -= tail_pmf[:-1].copy()
    last = int(np.flatnonzero(tail_pmf > 0.0)[-1])
    p = tail_pmf[: last + 1]
    return CategoricalDistribution._trusted(d.atoms[: last + 1].copy(), p / p.sum())


def emd(x: CategoricalDistribution, y: CategoricalDistribution) -> float:
    """1-D earth mover's distance: integral of |F_x - F_y| over the merged support."""
    z = np.concatenate([x.atoms, y.atoms])
    w = np.concatenate([x.probs, -y.probs])
    order = np.argsort(z, kind="stable")
    z = z[order]
    cdf_gap = np.cumsum(w[order])
    return float(np.abs(cdf_gap[:-1]) @ (z[1:] - z[:-1]))


def mixture(ds: Sequence[CategoricalDistribution], weights=None) -> CategoricalDistribution:
    """Weighted mixture of distributions on the union of their atoms."""
    ds = list(ds)
    if not ds:
        raise ValueError("mixture needs at least one distribution")
    if weights is None:
        w = np.full(len(ds), 1.0 / len(ds))
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(ds),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative, one per member, summing to 1")
    grid = ds[0].atoms
    if any(not np.array_equal(d.atoms, grid) for d in ds[1:]):
        grid = np.unique(np.concatenate([d.atoms for d in ds]))
    mass = np.zeros(grid.size)
    for wi, d in zip(w, ds):
        mass[np.searchsorted(grid, d.atoms)] += wi * d.probs  # atoms are unique within a member
    return CategoricalDistribution._trusted(np.array(grid), mass / mass.sum())


def cvar_gap(ds: Sequence[CategoricalDistribution], alpha: float) -> float:
    """Mean member CVaR minus the CVaR of the uniform mixture."""
    ds = list(ds)
    alpha = check_alpha(alpha)
    members = sum(float(cvar_from_probs(d.probs, d.atoms, alpha)) for d in ds) / len(ds)
    return float(members - cvar(mixture(ds), alpha))


def tail_emd_mean(ds: Sequence[CategoricalDistribution], alpha: float) -> float:
    """Average EMD between each member's tail and the mixture's tail."""
    ds = list(ds)
    mix_tail = tail(mixture(ds), alpha)
    return float(np.mean([emd(mix_tail, tail(d, alpha)) for d in ds]))


def adversarial_ensemble(D: float) -> list[CategoricalDistribution]:
    """Two-member ensemble whose CVaR gap at alpha=0.5 is zero for any tail-EMD ``D/2``."""
    return [
        CategoricalDistribution(np.array([D / 2, D]), np.array([0.5, 0.5])),
        CategoricalDistribution(np.array([-D / 2, D]), np.array([0.5, 0.5])),
    ]


# -- Gaussian-mixture gap experiment --------------------------------------------

GAP_GRID = np.linspace(-10.0, 10.0, 201)


@dataclass(frozen=True)
class GapExperimentResult:
    tail_emd_mean: np.ndarray
    cvar_gap: np.ndarray
    alpha: float = 0.9
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.cvar_gap.size

    def spearman(self) -> float:
        return float(stats.spearmanr(self.tail_emd_mean, self.cvar_gap).statistic)

    def to_csv(self, path, adversarial_d: float | None = 2.0) -> None:
        """One row per trial; unless ``adversarial_d`` is None a final row labelled
        ``adversarial_D<d>_alpha0.5`` holds :func:`adversarial_ensemble` at alpha 0.5."""
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "tail_emd_mean", "cvar_gap"])
            for i, (e, g) in enumerate(zip(self.tail_emd_mean, self.cvar_gap)):
                w.writerow([i, repr(float(e)), repr(float(g))])
            if adversarial_d is not None:
                ds = adversarial_ensemble(adversarial_d)
                w.writerow([f"adversarial_D{adversarial_d:g}_alpha0.5", repr(tail_emd_mean(ds, 0.5)), repr(cvar_gap(ds, 0.5))])


def _random_base_mixture(rng: np.random.Generator, k: int) -> GaussianMixtureSpec:
    return GaussianMixtureSpec(
        weights=rng.dirichlet(np.ones(k)),
        means=rng.uniform(-5.0, 5.0, size=k),
        stds=rng.uniform(0.5, 2.0, size=k),
    )


def _perturb(base: GaussianMixtureSpec, rng: np.random.Generator, scale: float) -> GaussianMixtureSpec:
    k = base.weights.size
    logits = np.log(base.weights) + scale * rng.normal(0.0, 0.3, size=k)
    w = np.exp(logits - logits.max())
    return GaussianMixtureSpec(
        weights=w / w.sum(),
        means=base.means + scale * rng.normal(0.0, 0.5, size=k),
        stds=np.exp(np.log(base.stds) + scale * rng.normal(0.0, 0.2, size=k)),
    )


def run_gap_experiment(
    n_trials: int,
    k: int = 3,
    n: int = 3,
    seed=0,
    alpha: float = 0.9,
    scale: float = 1.0,
    atoms: np.ndarray = GAP_GRID,
) -> GapExperimentResult:
    """Sample random Gaussian-mixture ensembles and record (mean tail-EMD, CVaR gap).

    Each trial draws a ``k``-component base mixture, perturbs its parameters
    into ``n`` members (``scale`` multiplies every perturbation), discretizes
    the members onto ``atoms`` and evaluates both quantities.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    alpha = check_alpha(alpha)
    rng = check_random_state(seed)
    emds = np.empty(n_trials)
    gaps = np.empty(n_trials)
    for t in range(n_trials):
        base = _random_base_mixture(rng, k)
        members = [_perturb(base, rng, scale).discretize(atoms) for _ in range(n)]
        emds[t] = tail_emd_mean(members, alpha)
        gaps[t] = cvar_gap(members, alpha)
    return GapExperimentResult(emds, gaps, alpha, {"k": k, "n": n, "scale": scale})
