"""Ensemble of categorical distributional critics."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Mapping

import numpy as np
from scipy.special import entr, xlogy

from . import gradnet as gn
from .actor_limits import ActionLimits, policy_actions
from .riskmeasures import CategoricalDistribution, cvar_from_probs
from .validation import check_alpha, check_random_state


@dataclass(frozen=True)
class AtomGrid:
    v_min: float
    v_max: float
    n_atoms: int = 51

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be < v_max")
        if self.n_atoms < 2:
            raise ValueError("need at least two atoms")

    @cached_property
    def atoms(self) -> np.ndarray:
        z = np.linspace(self.v_min, self.v_max, self.n_atoms)
        z.setflags(write=False)
        return z

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)

    @classmethod
    def for_rewards(cls, r_max: float, gamma: float, n_atoms: int = 51) -> "AtomGrid":
        """Grid ``[0, r_max / (1 - gamma)]`` for tasks with nonnegative rewards."""
        return cls(0.0, r_max / (1.0 - gamma), n_atoms)


def project_onto_grid(tz: np.ndarray, probs: np.ndarray, grid: AtomGrid) -> np.ndarray:
    """Split each source atom's mass linearly between its two neighbouring grid atoms.

    ``tz`` and ``probs`` share shape ``(..., n_src)``; out-of-range atoms clip to
    the edge atoms.  Returns ``(..., grid.n_atoms)``.
    """
    tz, probs = np.broadcast_arrays(np.asarray(tz, dtype=float), np.asarray(probs, dtype=float))
    if np.isnan(tz).any():
        raise FloatingPointError("NaN in projected support")
    lead = tz.shape[:-1]
    n = grid.n_atoms
    b = (np.clip(tz, grid.v_min, grid.v_max) - grid.v_min) / grid.delta
    nearest = np.rint(b)
    b = np.where(np.abs(b - nearest) < 1e-9, nearest, b)
    lower = np.floor(b)
    upper = np.minimum(lower + 1.0, n - 1)
    w_upper = b - lower
    rows = np.arange(int(np.prod(lead, dtype=int))).reshape(lead + (1,)) * n
    idx_l = (rows + lower.astype(np.int64)).ravel()
    idx_u = (rows + upper.astype(np.int64)).ravel()
    size = rows.size * n
    out = np.bincount(idx_l, weights=(probs * (1.0 - w_upper)).ravel(), minlength=size)
    out += np.bincount(idx_u, weights=(probs * w_upper).ravel(), minlength=size)
    return out.reshape(lead + (n,))


def project_target(grid: AtomGrid, source: CategoricalDistribution, r: float, gamma: float) -> CategoricalDistribution:
    """Categorical projection of ``r + gamma * source`` onto ``grid``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    probs = project_onto_grid(r + gamma * source.atoms, source.probs, grid)
    return CategoricalDistribution(grid.atoms, probs)


def entropy(d: CategoricalDistribution) -> float:
    return float(entr(d.probs).sum())


class CriticEnsemble:
    """``n_members`` independent categorical critics ``Z(s, a)`` with delayed copies.

    Parameters are stored stacked along a leading member axis; member ``i`` of
    ``target`` only ever tracks member ``i`` of ``params``.
    """

    def __init__(self, obs_dim: int, act_dim: int, grid: AtomGrid, n_members: int = 5,
                 hidden=(256, 256), rng=None, final_scale: float = 1e-3):
        if n_members < 1:
            raise ValueError("n_members must be >= 1")
        rng = check_random_state(rng)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.grid = grid
        self.n_members = n_members
        sizes = [obs_dim + act_dim, *hidden, grid.n_atoms]
        self.params = gn.init_mlp(sizes, rng, n_members=n_members, final_scale=final_scale)
        self.target = self.params

    @property
    def atoms(self) -> np.ndarray:
        return self.grid.atoms

    def _inputs(self, s, a):
        s = np.asarray(s, dtype=float)
        if isinstance(a, gn.Var):
            return gn.concat([s, a], axis=-1)
        return np.concatenate([s, np.asarray(a, dtype=float)], axis=-1)

    def logits(self, s, a, params: Mapping | None = None):
        """Per-member logits of shape ``(N, batch, n_atoms)``."""
        return gn.mlp(self.params if params is None else params, self._inputs(s, a))

    def probs(self, s, a, which: str = "online") -> np.ndarray:
        params = {"online": self.params, "target": self.target}[which]
        logits = self.logits(np.atleast_2d(s), np.atleast_2d(a), params)
        return gn.value(gn.softmax(logits))

    def mixture_cvar(self, s, a, alpha: float, params: Mapping | None = None):
        """CVaR of the uniform member mixture at each ``(s, a)`` row; differentiable through ``a``."""
        p = gn.softmax(self.logits(s, a, params))
        return gn.cvar(gn.mean(p, axis=0), self.atoms, alpha)

    def member_params(self, i: int, which: str = "online") -> gn.ParamSet:
        self._check_member(i)
        return {"online": self.params, "target": self.target}[which].member(i)

    def _check_member(self, i):
        if not 0 <= i < self.n_members:
            raise IndexError(f"member {i} out of range for ensemble of {self.n_members}")

    def state_groups(self) -> dict[str, Mapping[str, np.ndarray]]:
        return {"critic": dict(self.params), "critic_target": dict(self.target)}


def evaluate(e: CriticEnsemble, s, a, which: str = "online", member="all"):
    """Return ``Z(s, a)`` as distributions.

    For a single unbatched ``(s, a)`` the result is a ``CategoricalDistribution``
    (one member) or a list of them (``member="all"``); batched inputs return
    the probability array instead.
    """
    if which not in ("online", "target"):
        raise ValueError("which must be 'online' or 'target'")
    if member != "all":
        e._check_member(member)
    single = np.ndim(s) == 1
    probs = e.probs(s, a, which)
    if member != "all":
        probs = probs[member]
    if not single:
        return probs
    if member != "all":
        return CategoricalDistribution(e.atoms, probs[0])
    return [CategoricalDistribution(e.atoms, p[0]) for p in probs]


def ensemble_cvar(e: CriticEnsemble, s, a, alpha: float):
    """CVaR of the mixture of all online members; a float for unbatched input."""
    alpha = check_alpha(alpha)
    single = np.ndim(s) == 1
    mix = e.probs(s, a).mean(axis=0)
    out = cvar_from_probs(mix, e.atoms, alpha)
    return float(out[0]) if single else out


@dataclass
class CriticLossTerms:
    loss: float
    kl: float
    entropy_in: float
    entropy_ood: float


def _td_entropy_loss(logits, target, bsz, use_entropy, c_in, c_ood):
    """Fused loss node over logits ``(N, rows, n_atoms)``.

    Rows ``[0, bsz)`` carry the KL term against ``target``; with entropy terms
    rows ``[bsz, 2 bsz)`` are in-limit actions and ``[2 bsz, 3 bsz)`` pre-limit.
    """
    lv = gn.value(logits)
    shifted = lv - lv.max(axis=-1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    n_members = lv.shape[0]
    scale = 1.0 / (n_members * bsz)
    lp_td, p_td = log_p[:, :bsz], p[:, :bsz]
    kl = xlogy(target, target).sum(-1) - (target * lp_td).sum(-1)
    total = kl.sum() * scale
    h_in = h_ood = 0.0
    if use_entropy:
        h = -(p[:, bsz:] * log_p[:, bsz:]).sum(-1)
        h_in, h_ood = h[:, :bsz].mean(), h[:, bsz:].mean()
        total += c_in * h_in - c_ood * h_ood

    def vjp(g):
        grad = np.empty_like(lv)
        grad[:, :bsz] = (p_td * target.sum(-1, keepdims=True) - target) * scale
        if use_entropy:
            coef = np.concatenate([np.full(bsz, c_in), np.full(bsz, -c_ood)])[None, :, None]
            # dH/dlogit_j = -p_j (log p_j + H)
            grad[:, bsz:] = -p[:, bsz:] * (log_p[:, bsz:] + h[..., None]) * coef * scale
        return (g * grad,)

    node = gn._op(np.asarray(total), (logits,), vjp)
    return node, float(kl.mean()), float(h_in), float(h_ood)


def critic_loss(e: CriticEnsemble, batch: Mapping[str, np.ndarray], actor: Mapping, limits: ActionLimits,
                gamma: float, rng=None, entropy_in_coef: float = 1.0, entropy_ood_coef: float = 1.0,
                noise_next=None, noise_ood=None):
    """Distributional TD loss with the in-distribution / OOD entropy terms.

    Per member: ``KL(project(r + gamma Z'_i(s', a')) || Z_i(s, a))
    + c_in H(Z_i(s, a_lim)) - c_ood H(Z_i(s, a_pre))`` averaged over the batch
    and members.  ``a'`` comes from the limited policy (one draw shared by all
    members); ``a_lim`` and ``a_pre`` share one draw so that with open limits
    the entropy terms cancel.  ``done`` rows drop the bootstrap term.

    Returns ``(loss, grads, CriticLossTerms)``.
    """
    rng = check_random_state(rng)
    s, a, r = batch["s"], batch["a_applied"], batch["r"]
    s_next, done = batch["s_next"], batch["done"]
    bsz = s.shape[0]
    if noise_next is None:
        noise_next = rng.standard_normal((bsz, e.act_dim))
    _, a_next, _ = policy_actions(actor, s_next, noise_next, limits)
    target_p = gn.softmax(e.logits(s_next, a_next, e.target))
    cont = gamma * (1.0 - np.asarray(done, dtype=float))
    tz = np.asarray(r, dtype=float)[:, None] + cont[:, None] * e.atoms
    target = project_onto_grid(np.broadcast_to(tz, target_p.shape), target_p, e.grid)

    use_entropy = bool(entropy_in_coef or entropy_ood_coef)
    if use_entropy:
        if noise_ood is None:
            noise_ood = rng.standard_normal((bsz, e.act_dim))
        a_ood, a_in, _ = policy_actions(actor, s, noise_ood, limits)
        x = np.concatenate([np.concatenate([s, a], -1), np.concatenate([s, a_in], -1),
                            np.concatenate([s, a_ood], -1)], axis=0)
    else:
        x = np.concatenate([s, a], -1)

    tape = gn.Tape()
    logits = gn.mlp(tape.watch(e.params), x)
    loss, kl, h_in, h_ood = _td_entropy_loss(logits, target, bsz, use_entropy, entropy_in_coef, entropy_ood_coef)
    if not np.isfinite(loss.value):
        raise FloatingPointError("critic loss is not finite")
    grads = tape.backward(loss)
    terms = CriticLossTerms(float(loss.value), kl, h_in, h_ood)
    return terms.loss, grads, terms
