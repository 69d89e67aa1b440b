"""CVaR actor objective and adaptive action limits.

The actor emits ``tanh``-squashed actions in (-1, 1); these are rescaled to the
environment's hard bounds (the *pre-limit* action) and then soft-clipped into
``[v_minus, v_plus]`` on the limited dimensions (the *applied* action).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import gradnet as gn


def softclip(a, v_minus, v_plus):
    """Shifted tanh approximating ``clip(a, v_minus, v_plus)``; differentiable in all arguments."""
    lo, hi = gn.value(v_minus), gn.value(v_plus)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate limits: v_minus={lo} must be < v_plus={hi}")
    half = gn.mul(gn.sub(v_plus, v_minus), 0.5)
    mid = gn.mul(gn.add(v_plus, v_minus), 0.5)
    return gn.add(gn.mul(half, gn.tanh(gn.div(gn.sub(a, mid), half))), mid)


@dataclass(frozen=True)
class ActionLimits:
    """Hard action bounds plus learnable ``[v_minus, v_plus]`` on ``limited_dims``.

    ``active=False`` turns the limits off entirely (the no-limits ablation); the
    reported ``v_plus`` is then the hard maximum.
    """

    low: np.ndarray
    high: np.ndarray
    limited_dims: tuple = ()
    v_minus: np.ndarray = None
    v_plus: np.ndarray = None
    active: bool = True

    def __post_init__(self):
        low = np.asarray(self.low, dtype=float)
        high = np.asarray(self.high, dtype=float)
        dims = tuple(int(d) for d in self.limited_dims)
        vm = low[list(dims)] if self.v_minus is None else np.asarray(self.v_minus, dtype=float)
        vp = high[list(dims)] if self.v_plus is None else np.asarray(self.v_plus, dtype=float)
        if np.any(high <= low):
            raise ValueError("hard bounds must satisfy low < high")
        if vm.shape != (len(dims),) or vp.shape != (len(dims),):
            raise ValueError("v_minus and v_plus need one entry per limited dimension")
        if np.any(vp <= vm):
            raise ValueError("v_minus must be strictly below v_plus")
        if np.any(vm < low[list(dims)] - 1e-12) or np.any(vp > high[list(dims)] + 1e-12):
            raise ValueError("limits must lie within the hard action bounds")
        for name, val in (("low", low), ("high", high), ("limited_dims", dims), ("v_minus", vm), ("v_plus", vp)):
            object.__setattr__(self, name, val)

    @classmethod
    def initial(cls, low, high, limited_dims, fraction: float = 0.2, active: bool = True) -> "ActionLimits":
        """Start ``v_plus`` at ``fraction`` of the hard range above the hard minimum."""
        low = np.asarray(low, dtype=float)
        high = np.asarray(high, dtype=float)
        dims = list(limited_dims)
        vm = low[dims]
        vp = vm + fraction * (high[dims] - low[dims]) if active else high[dims]
        return cls(low, high, tuple(dims), vm, vp, active)

    @property
    def act_dim(self) -> int:
        return self.low.size

    def reported_v_plus(self) -> np.ndarray:
        return self.v_plus if self.active else self.high[list(self.limited_dims)]

    def with_v_plus(self, v_plus, gap_fraction: float = 0.01) -> "ActionLimits":
        """Copy with ``v_plus`` clamped to ``[v_minus + gap, hard max]``."""
        dims = list(self.limited_dims)
        gap = gap_fraction * (self.high[dims] - self.low[dims])
        vp = np.clip(np.asarray(v_plus, dtype=float), self.v_minus + gap, self.high[dims])
        return replace(self, v_plus=vp)


def scale_to_bounds(a_unit, low: np.ndarray, high: np.ndarray):
    """Map (-1, 1) to ``[low, high]`` elementwise."""
    return gn.add(gn.mul(gn.add(a_unit, 1.0), 0.5 * (high - low)), low)


def apply_limits(a_pre, limits: ActionLimits, v_plus=None):
    """Soft-clip the limited dimensions of ``a_pre``; other dimensions pass through.

    ``v_plus`` overrides ``limits.v_plus`` (used to differentiate w.r.t. the bound).
    """
    if not limits.active or not limits.limited_dims:
        return a_pre
    vp = limits.v_plus if v_plus is None else v_plus
    dims = limits.limited_dims
    if not isinstance(a_pre, gn.Var) and not isinstance(vp, gn.Var):
        out = np.array(a_pre, dtype=float, copy=True)
        out[..., list(dims)] = softclip(out[..., list(dims)], limits.v_minus, vp)
        return out
    cols = []
    for j in range(limits.act_dim):
        col = gn.getitem(a_pre, (Ellipsis, slice(j, j + 1)))
        if j in dims:
            k = dims.index(j)
            col = softclip(col, limits.v_minus[k : k + 1], gn.getitem(vp, slice(k, k + 1)) if isinstance(vp, gn.Var) else vp[k : k + 1])
        cols.append(col)
    return gn.concat(cols, axis=-1)


def policy_actions(actor: Mapping, states, noise, limits: ActionLimits):
    """Sample ``(a_pre, a_applied, log_prob)`` from the limited policy."""
    a_unit, log_prob = gn.squashed_gaussian_sample(actor, states, noise)
    a_pre = scale_to_bounds(a_unit, limits.low, limits.high)
    return a_pre, apply_limits(a_pre, limits), log_prob


def mean_actions(actor: Mapping, states, limits: ActionLimits) -> np.ndarray:
    """Deterministic evaluation action: limited ``tanh(mu(s))``."""
    a_pre = scale_to_bounds(gn.deterministic_action(actor, states), limits.low, limits.high)
    return apply_limits(a_pre, limits)


def actor_loss(e, actor: gn.ParamSet, limits: ActionLimits, states, alpha: float, noise, entropy_coef: float = 0.0):
    """``-mean_s CVaR_alpha(mixture Z(s, a))`` with ``a`` drawn from the limited policy.

    Gradients reach the actor parameters only; critic parameters and the
    limits are constants.  ``entropy_coef > 0`` adds a maximum-entropy bonus
    (zero keeps the plain CVaR objective).

    Returns ``(loss, grads, info)``.
    """
    tape = gn.Tape()
    p = tape.watch(actor)
    _, a, log_prob = policy_actions(p, states, noise, limits)
    cv = e.mixture_cvar(states, a, alpha)
    loss = gn.mul(gn.mean(cv), -1.0)
    if entropy_coef:
        loss = gn.add(loss, gn.mul(gn.mean(log_prob), entropy_coef))
    grads = tape.backward(loss)
    info = {"cvar": float(np.mean(gn.value(cv))), "log_prob": float(np.mean(gn.value(log_prob)))}
    return float(loss.value), grads, info


def limit_loss(e, actor: Mapping, limits: ActionLimits, states, alpha: float, noise):
    """``-mean_s CVaR_alpha Z(s, softclip(a, v_minus, v_plus))``, differentiated w.r.t. ``v_plus`` only.

    Returns ``(loss, grad_v_plus)``.
    """
    a_unit, _ = gn.squashed_gaussian_sample(actor, states, noise)
    a_pre = scale_to_bounds(a_unit, limits.low, limits.high)
    if not limits.active or not limits.limited_dims:
        return -float(np.mean(e.mixture_cvar(states, a_pre, alpha))), np.zeros_like(limits.v_plus)
    tape = gn.Tape()
    vp = tape.var(limits.v_plus, "v_plus")
    a = apply_limits(a_pre, limits, v_plus=vp)
    loss = gn.mul(gn.mean(e.mixture_cvar(states, a, alpha)), -1.0)
    grads = tape.backward(loss)
    return float(loss.value), grads["v_plus"]
