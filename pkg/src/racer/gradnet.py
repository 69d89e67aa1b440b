"""Small reverse-mode autodiff over numpy arrays, sized for MLP actor-critics.

Operations take either plain arrays or :class:`Var` nodes.  When at least one
input is a ``Var`` the result is recorded on that node's :class:`Tape`;
otherwise the op is plain numpy and returns an array, so the same model code
serves both differentiated and inference paths.

Ensembles are stored stacked: a weight of shape ``(N, fan_in, fan_out)`` holds
N independent members and ``np.matmul`` broadcasting keeps them separate.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .riskmeasures import cvar_from_probs, cvar_vjp

CHECKPOINT_FORMAT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


# -- tape -------------------------------------------------------------------------


class Tape:
    """Linear record of one forward pass."""

    def __init__(self):
        self._nodes: list[tuple["Var", tuple, Callable | None]] = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def var(self, value, name: str | None = None) -> "Var":
        """Register a leaf whose gradient is wanted."""
        v = Var(np.asarray(value, dtype=np.float64), self, len(self._nodes), name)
        self._nodes.append((v, (), None))
        return v

    def watch(self, params: "ParamSet") -> dict[str, "Var"]:
        return {k: self.var(a, k) for k, a in params.items()}

    def _record(self, value, parents, vjp) -> "Var":
        if self._consumed:
            raise RuntimeError("tape already consumed by backward()")
        v = Var(value, self, len(self._nodes))
        self._nodes.append((v, parents, vjp))
        return v

    def backward(self, out: "Var", out_grad=None) -> dict[str, np.ndarray]:
        """Propagate ``out_grad`` (default ones) back to every named leaf.

        Returns ``{leaf name: gradient}``.  A tape can be consumed once.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by backward()")
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[out.idx] = (
            np.ones_like(out.value) if out_grad is None else np.broadcast_to(out_grad, out.shape).astype(np.float64)
        )
        named = {}
        for node, parents, vjp in reversed(self._nodes[: out.idx + 1]):
            g = grads[node.idx]
            if g is None:
                continue
            if vjp is None:
                if node.name is not None:
                    named[node.name] = g
                continue
            for parent, pg in zip(parents, vjp(g)):
                if isinstance(parent, Var) and pg is not None:
                    if grads[parent.idx] is None:
                        grads[parent.idx] = pg
                    else:
                        grads[parent.idx] = grads[parent.idx] + pg
        for node, parents, vjp in self._nodes:
            if vjp is None and node.name is not None and node.name not in named:
                named[node.name] = np.zeros_like(node.value)
        return named


class Var:
    __slots__ = ("value", "tape", "idx", "name")
    __array_priority__ = 100

    def __init__(self, value, tape, idx, name=None):
        self.value = value
        self.tape = tape
        self.idx = idx
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _op(out, parents, vjp):
    tape = _tape_of(*parents)
    if tape is None:
        return out
    return tape._record(out, parents, vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise & structural ops ---------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    return _op(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    return _op(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    return _op(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _op(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def matmul(a, b):
    av, bv = value(a), value(b)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if isinstance(a, Var) else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if isinstance(b, Var) else None
        return ga, gb

    return _op(av @ bv, (a, b), vjp)


def dense(x, W, b, activation: str | None = "relu"):
    """Fused ``act(x @ W + b)`` for ReLU or identity activations."""
    xv, Wv, bv = value(x), value(W), value(b)
    pre = xv @ Wv + bv
    out = np.maximum(pre, 0.0) if activation == "relu" else pre

    def vjp(g):
        if activation == "relu":
            g = g * (out > 0.0)
        gx = _unbroadcast(g @ np.swapaxes(Wv, -1, -2), xv.shape) if isinstance(x, Var) else None
        gW = _unbroadcast(np.swapaxes(xv, -1, -2) @ g, Wv.shape) if isinstance(W, Var) else None
        gb = _unbroadcast(g, bv.shape) if isinstance(b, Var) else None
        return gx, gW, gb

    return _op(out, (x, W, b), vjp)


def linear(x, W, b):
    """``x @ W + b``; with stacked ``W`` of shape (N, in, out) the output is (N, batch, out)."""
    return add(matmul(x, W), b)


def relu(x):
    out = np.maximum(value(x), 0.0)
    return _op(out, (x,), lambda g: (g * (out > 0.0),))


def tanh(x):
    out = np.tanh(value(x))
    return _op(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x):
    out = np.exp(value(x))
    return _op(out, (x,), lambda g: (g * out,))


def log(x):
    xv = value(x)
    return _op(np.log(xv), (x,), lambda g: (g / xv,))


def softplus(x):
    xv = value(x)
    out = np.logaddexp(0.0, xv)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _op(out, (x,), lambda g: (g * sig,))


def clip(x, lo, hi):
    """Hard clip; zero gradient outside [lo, hi]."""
    xv = value(x)
    inside = (xv >= lo) & (xv <= hi)
    return _op(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


def square(x):
    xv = value(x)
    return _op(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sum(x, axis=None, keepdims=False):  # noqa: A001
    xv = value(x)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _op(np.sum(xv, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    xv = value(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def getitem(x, key):
    xv = value(x)
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(k is Ellipsis or isinstance(k, (slice, int)) for k in parts)

    def vjp(g):
        out = np.zeros_like(xv)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _op(xv[key], (x,), vjp)


def concat(xs, axis=-1):
    vals = [value(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(_unbroadcast(p, v.shape) for p, v in zip(parts, vals))

    return _op(np.concatenate(vals, axis=axis), tuple(xs), vjp)


def broadcast_to(x, shape):
    xv = value(x)
    return _op(np.broadcast_to(xv, shape).copy(), (x,), lambda g: (_unbroadcast(g, xv.shape),))


def log_softmax(x, axis=-1):
    xv = value(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _op(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(x, axis=-1):
    xv = value(x)
    e = np.exp(xv - xv.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _op(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def cvar(probs, atoms: np.ndarray, alpha: float):
    """CVaR of categorical rows of ``probs`` on the shared grid ``atoms``."""
    pv = value(probs)
    return _op(cvar_from_probs(pv, atoms, alpha), (probs,), lambda g: (cvar_vjp(pv, atoms, alpha, g),))


def entropy_from_logits(logits, axis=-1):
    """Shannon entropy of ``softmax(logits)``."""
    lp = log_softmax(logits, axis=axis)
    return mul(sum(mul(exp(lp), lp), axis=axis), -1.0)


# -- parameters -----------------------------------------------------------------------


class ParamSet(Mapping):
    """Immutable mapping of named float arrays with fixed shapes."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | Iterable):
        items = dict(arrays)
        self._arrays = {}
        for k, a in items.items():
            arr = np.array(a, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {k!r} has non-finite values")
            arr.setflags(write=False)
            self._arrays[k] = arr

    def __getitem__(self, k):
        return self._arrays[k]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __repr__(self):
        shapes = ", ".join(f"{k}{tuple(a.shape)}" for k, a in self._arrays.items())
        return f"ParamSet({shapes})"

    @property
    def shapes(self) -> dict[str, tuple]:
        return {k: a.shape for k, a in self._arrays.items()}

    def replace(self, **arrays) -> "ParamSet":
        new = dict(self._arrays)
        for k, a in arrays.items():
            if k not in new or np.shape(a) != new[k].shape:
                raise ValueError(f"cannot replace {k!r}: unknown name or shape change")
            new[k] = a
        return ParamSet(new)

    def map(self, fn) -> "ParamSet":
        return ParamSet({k: fn(a) for k, a in self._arrays.items()})

    def member(self, i: int) -> "ParamSet":
        """Slice member ``i`` out of a stacked ensemble ParamSet."""
        return ParamSet({k: a[i] for k, a in self._arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def equals(self, other: "ParamSet") -> bool:
        return self.shapes == other.shapes and all(np.array_equal(self[k], other[k]) for k in self)


def _check_aligned(a: Mapping, b: Mapping):
    if set(a) != set(b) or any(np.shape(a[k]) != np.shape(b[k]) for k in a):
        raise ValueError("parameter sets are not aligned")


def stack_params(members: list[ParamSet]) -> ParamSet:
    return ParamSet({k: np.stack([m[k] for m in members]) for k in members[0]})


def init_mlp(
    sizes: list[int], rng: np.random.Generator, n_members: int | None = None, final_scale: float = 1.0
) -> ParamSet:
    """Fan-in scaled uniform initialization.

    ``final_scale`` shrinks the last layer; ``n_members`` stacks independent
    draws along a leading axis.
    """
    lead = () if n_members is None else (n_members,)
    arrays = {}
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        if i == n_layers - 1:
            bound *= final_scale
        arrays[f"W{i}"] = rng.uniform(-bound, bound, size=lead + (fan_in, fan_out))
        bshape = lead + ((1, fan_out) if lead else (fan_out,))
        arrays[f"b{i}"] = rng.uniform(-bound, bound, size=bshape) if i < n_layers - 1 else np.zeros(bshape)
    return ParamSet(arrays)


def n_layers(p: Mapping) -> int:
    return len([k for k in p if k.startswith("W")])


def mlp(p: Mapping, x):
    """ReLU MLP; ``p`` may hold arrays or tape Vars."""
    h = x
    last = n_layers(p) - 1
    for i in range(last + 1):
        h = dense(h, p[f"W{i}"], p[f"b{i}"], "relu" if i < last else None)
    return h


def mlp_forward(p: ParamSet, x) -> tuple[Var, Tape]:
    """Differentiable forward pass; returns the output node and its tape."""
    fan_in = p["W0"].shape[-2]
    if np.shape(x)[-1] != fan_in:
        raise ValueError(f"input dimension {np.shape(x)[-1]} does not match {fan_in}")
    tape = Tape()
    return mlp(tape.watch(p), np.asarray(x, dtype=np.float64)), tape


def backward(tape: Tape, out: Var, out_grad=None) -> dict[str, np.ndarray]:
    return tape.backward(out, out_grad)


# -- policy head ------------------------------------------------------------------------

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_head(p: Mapping, s):
    out = mlp(p, s)
    act_dim = value(out).shape[-1] // 2
    mu = getitem(out, (Ellipsis, slice(0, act_dim)))
    log_std = clip(getitem(out, (Ellipsis, slice(act_dim, None))), LOG_STD_MIN, LOG_STD_MAX)
    return mu, log_std


def squashed_gaussian_sample(p: Mapping, s, noise):
    """Reparameterized tanh-Gaussian sample.

    Returns ``(a_pre, log_prob)`` with ``a_pre = tanh(mu + std * noise)`` in
    (-1, 1) and ``log_prob`` the density of ``a_pre`` including the tanh
    change of variables.
    """
    mu, log_std = gaussian_head(p, s)
    noise = np.asarray(noise, dtype=np.float64)
    u = add(mu, mul(exp(log_std), noise))
    a_pre = tanh(u)
    gauss = sub(mul(noise * noise, -0.5), add(log_std, _HALF_LOG_2PI))
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
    log_det = mul(sub(sub(math.log(2.0), u), softplus(mul(u, -2.0))), 2.0)
    log_prob = sum(sub(gauss, log_det), axis=-1)
    return a_pre, log_prob


def deterministic_action(p: Mapping, s) -> np.ndarray:
    mu, _ = gaussian_head(p, s)
    return np.tanh(value(mu))


# -- optimization ----------------------------------------------------------------------


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay on ``W*`` entries only."""

    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> ParamSet:
        _check_aligned(params, grads)
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k!r}")
        return optimizer_step(params, grads, self, self.lr, self.weight_decay)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        out.update({f"m/{k}": a for k, a in self.m.items()})
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = int(arrays["t"])
        self.m = {k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("v/")}


class SGD:
    """Plain gradient descent; same interface as :class:`AdamW`."""

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> ParamSet:
        _check_aligned(params, grads)
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k!r}")
        self.t += 1
        return ParamSet({k: w - self.lr * np.asarray(grads[k], dtype=np.float64) for k, w in params.items()})

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"t": np.array(self.t)}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = int(arrays["t"])


def optimizer_step(p: ParamSet, grads: Mapping, state: AdamW, lr: float, weight_decay: float) -> ParamSet:
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new = {}
    for k, w in p.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        upd = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and k.startswith("W"):
            upd = upd - lr * weight_decay * w
        new[k] = upd
    return ParamSet(new)


def polyak_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    """Move ``target`` a fraction ``tau`` toward ``online``."""
    _check_aligned(target, online)
    if tau == 1.0:
        return online
    return ParamSet({k: (1.0 - tau) * target[k] + tau * online[k] for k in target})


# -- checkpoints ----------------------------------------------------------------------------


def save_checkpoint(path, groups: Mapping[str, Mapping[str, np.ndarray]], meta: Mapping | None = None) -> None:
    """Write named array groups plus JSON metadata into one ``.npz`` file."""
    arrays = {"format_version": np.array(CHECKPOINT_FORMAT_VERSION)}
    for group, arrs in groups.items():
        for k, a in arrs.items():
            arrays[f"{group}::{k}"] = np.asarray(a)
    arrays["meta_json"] = np.array(json.dumps(dict(meta or {}), sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        if "format_version" not in z.files:
            raise ValueError("not a checkpoint: missing format_version")
        version = int(z["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"checkpoint format {version} != supported {CHECKPOINT_FORMAT_VERSION}")
        groups: dict[str, dict[str, np.ndarray]] = {}
        for key in z.files:
            if "::" in key:
                g, k = key.split("::", 1)
                groups.setdefault(g, {})[k] = np.array(z[key])
        meta = json.loads(str(z["meta_json"]))
    return groups, meta
