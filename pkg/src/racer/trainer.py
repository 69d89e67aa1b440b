"""Off-policy training loop: replay, interleaved critic/actor/limit updates, metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Iterator

import numpy as np

from . import gradnet as gn
from .actor_limits import ActionLimits, actor_loss, apply_limits, limit_loss, mean_actions, policy_actions, scale_to_bounds
from .critic import AtomGrid, CriticEnsemble, critic_loss
from .validation import check_alpha

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a_pre: np.ndarray
    a_applied: np.ndarray
    r: float
    s_next: np.ndarray
    failed: bool
    done: bool

    def __post_init__(self):
        if self.failed and not self.done:
            raise ValueError("a failed transition must be terminal")


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    _FIELDS = ("s", "a_pre", "a_applied", "r", "s_next", "failed", "done")

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.inserted = 0
        self._data = {
            "s": np.zeros((capacity, obs_dim)),
            "a_pre": np.zeros((capacity, act_dim)),
            "a_applied": np.zeros((capacity, act_dim)),
            "r": np.zeros(capacity),
            "s_next": np.zeros((capacity, obs_dim)),
            "failed": np.zeros(capacity),
            "done": np.zeros(capacity),
        }

    def __len__(self):
        return min(self.inserted, self.capacity)

    def add(self, t: Transition) -> None:
        i = self.inserted % self.capacity
        for k in self._FIELDS:
            self._data[k][i] = getattr(t, k)
        self.inserted += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self), size=batch_size)
        return {k: v[idx] for k, v in self._data.items()}

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, len(self), size=batch_size)

    def __getitem__(self, i: int) -> Transition:
        if not 0 <= i < len(self):
            raise IndexError(i)
        d = self._data
        return Transition(d["s"][i].copy(), d["a_pre"][i].copy(), d["a_applied"][i].copy(), float(d["r"][i]),
                          d["s_next"][i].copy(), bool(d["failed"][i]), bool(d["done"][i]))


@dataclass(frozen=True)
class TrainerConfig:
    alpha: float = 0.9
    gamma: float = 0.99
    utd_ratio: int = 8  # critic updates per update cycle
    update_every: int = 1  # env steps per update cycle
    ensemble_n: int = 5
    n_atoms: int = 51
    v_min: float | None = None  # default: 0
    v_max: float | None = None  # default: r_max / (1 - gamma)
    hidden: tuple = (256, 256)
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_limits: float = 1e-3
    tau: float = 0.005
    weight_decay: float = 1e-4
    batch_size: int = 256
    buffer_size: int = 200_000
    warmup_steps: int = 1000
    total_steps: int = 100_000
    seed: int = 0
    entropy_in_coef: float = 1.0
    entropy_ood_coef: float = 1.0
    actor_entropy_coef: float = 0.0
    initial_limit_fraction: float = 0.2
    limit_gap_fraction: float = 0.01
    limit_delay_steps: int = 0  # env steps after warmup before the limits start moving
    metrics_every: int = 1000
    checkpoint_every: int = 0
    no_epistemic: bool = False
    no_limits: bool = False
    risk_neutral: bool = False

    def __post_init__(self):
        check_alpha(self.alpha)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        positive = ("utd_ratio", "update_every", "ensemble_n", "batch_size", "buffer_size", "metrics_every",
                    "lr_actor", "lr_critic", "lr_limits", "tau")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_atoms < 2:
            raise ValueError("n_atoms must be >= 2")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        for name in ("weight_decay", "warmup_steps", "limit_delay_steps", "total_steps", "checkpoint_every",
                     "entropy_in_coef", "entropy_ood_coef", "actor_entropy_coef"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.initial_limit_fraction <= 1.0:
            raise ValueError("initial_limit_fraction must lie in (0, 1]")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def with_ablation(self, name: str) -> "TrainerConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return TrainerConfig(**{**asdict(self), name: True})

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.risk_neutral else self.alpha

    @property
    def effective_n(self) -> int:
        return 1 if self.no_epistemic else self.ensemble_n

    def grid(self, r_max: float) -> AtomGrid:
        v_min = 0.0 if self.v_min is None else self.v_min
        v_max = r_max / (1.0 - self.gamma) if self.v_max is None else self.v_max
        return AtomGrid(v_min, v_max, self.n_atoms)


ABLATIONS = ("no_epistemic", "no_limits", "risk_neutral")

# Small networks and a short horizon so a 100k-step cliffcar run fits in minutes on one core.
PRESETS = {
    "desk": {
        "gamma": 0.9,
        "hidden": (32, 32),
        "ensemble_n": 3,
        "batch_size": 32,
        "utd_ratio": 2,
        "update_every": 2,
        "lr_actor": 1e-3,
        "lr_critic": 1e-3,
        "entropy_in_coef": 0.1,
        "entropy_ood_coef": 0.1,
        "metrics_every": 5000,
    },
}


class TrainingAborted(RuntimeError):
    pass


def record_metrics(stream: IO[str], row: dict) -> None:
    """Append one JSON row; I/O errors propagate."""
    stream.write(json.dumps(row, sort_keys=True) + "\n")
    stream.flush()


@dataclass
class _Window:
    rewards: float = 0.0
    steps: int = 0
    cvar: list = field(default_factory=list)
    critic: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    h_in: list = field(default_factory=list)
    h_ood: list = field(default_factory=list)
    actor: list = field(default_factory=list)
    limit: list = field(default_factory=list)

    def summary(self) -> dict:
        def m(xs):
            return float(np.mean(xs)) if xs else None

        return {
            "avg_speed": self.rewards / self.steps if self.steps else 0.0,
            "cvar_alpha_mean": m(self.cvar),
            "loss_critic": m(self.critic),
            "loss_kl": m(self.kl),
            "entropy_in": m(self.h_in),
            "entropy_ood": m(self.h_ood),
            "loss_actor": m(self.actor),
            "loss_limit": m(self.limit),
        }


@dataclass
class Learner:
    """Parameters and optimizer state owned by the single learner."""

    actor: gn.ParamSet
    critic: CriticEnsemble
    limits: ActionLimits
    actor_opt: gn.AdamW
    critic_opt: gn.AdamW
    limit_opt: gn.SGD

    def checkpoint_groups(self) -> dict:
        lim = self.limits
        return {
            "actor": dict(self.actor),
            **self.critic.state_groups(),
            "limits": {"low": lim.low, "high": lim.high, "limited_dims": np.array(lim.limited_dims),
                       "v_minus": lim.v_minus, "v_plus": lim.v_plus, "active": np.array(lim.active)},
            "actor_opt": self.actor_opt.state_arrays(),
            "critic_opt": self.critic_opt.state_arrays(),
            "limit_opt": self.limit_opt.state_arrays(),
        }


def build_learner(config: TrainerConfig, obs_dim: int, act_dim: int, low, high, limited_dims, r_max: float,
                  rng: np.random.Generator) -> Learner:
    hidden = list(config.hidden)
    actor = gn.init_mlp([obs_dim, *hidden, 2 * act_dim], rng, final_scale=1e-2)
    critic = CriticEnsemble(obs_dim, act_dim, config.grid(r_max), config.effective_n, config.hidden, rng)
    limits = ActionLimits.initial(low, high, limited_dims, config.initial_limit_fraction, active=not config.no_limits)
    return Learner(actor, critic, limits, gn.AdamW(config.lr_actor), gn.AdamW(config.lr_critic, config.weight_decay),
                   gn.SGD(config.lr_limits))


@dataclass
class TrainResult:
    learner: Learner
    cum_failures: int
    cum_failures_fast: int
    steps: int
    episodes: int
    v_plus_history: list
    buffer: ReplayBuffer | None = None

    @property
    def actor(self) -> gn.ParamSet:
        return self.learner.actor

    @property
    def limits(self) -> ActionLimits:
        return self.learner.limits


def _update(learner: Learner, buf: ReplayBuffer, config: TrainerConfig, rng: np.random.Generator, win: _Window,
            update_limits: bool = True):
    ent_in = 0.0 if config.no_epistemic else config.entropy_in_coef
    ent_ood = 0.0 if config.no_epistemic else config.entropy_ood_coef
    critic = learner.critic
    for _ in range(config.utd_ratio):
        batch = buf.sample(config.batch_size, rng)
        loss, grads, terms = critic_loss(critic, batch, learner.actor, learner.limits, config.gamma, rng,
                                         ent_in, ent_ood)
        critic.params = learner.critic_opt.step(critic.params, grads)
        critic.target = gn.polyak_update(critic.target, critic.params, config.tau)
        win.critic.append(loss)
        win.kl.append(terms.kl)
        win.h_in.append(terms.entropy_in)
        win.h_ood.append(terms.entropy_ood)

    alpha = config.effective_alpha
    states = buf.sample(config.batch_size, rng)["s"]
    noise = rng.standard_normal((config.batch_size, critic.act_dim))
    loss, grads, info = actor_loss(critic, learner.actor, learner.limits, states, alpha, noise,
                                   config.actor_entropy_coef)
    if not np.isfinite(loss):
        raise FloatingPointError("actor loss is not finite")
    learner.actor = learner.actor_opt.step(learner.actor, grads)
    win.actor.append(loss)
    win.cvar.append(info["cvar"])

    if update_limits and learner.limits.active and learner.limits.limited_dims:
        noise = rng.standard_normal((config.batch_size, critic.act_dim))
        lloss, g_vp = limit_loss(critic, learner.actor, learner.limits, states, alpha, noise)
        if not np.isfinite(lloss):
            raise FloatingPointError("limit loss is not finite")
        vp = learner.limit_opt.step(gn.ParamSet({"v_plus": learner.limits.v_plus}), {"v_plus": g_vp})
        learner.limits = learner.limits.with_v_plus(vp["v_plus"], config.limit_gap_fraction)
        win.limit.append(lloss)


def train(config: TrainerConfig, env, metrics_stream: IO[str] | None = None, out_dir=None) -> TrainResult:
    """Run ``config.total_steps`` environment steps of off-policy training.

    Each step stores one transition; after warmup, every ``update_every``
    steps the learner performs ``utd_ratio`` critic updates (each followed by a
    Polyak target update), then one actor update, then one limit update.
    Rows are written to ``metrics_stream`` at every episode end and every
    ``metrics_every`` steps.  A non-finite loss writes a checkpoint (when
    ``out_dir`` is given) and raises :class:`TrainingAborted`.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, rng, env_rng = (np.random.default_rng(s) for s in seeds)
    obs_dim, act_dim = env.obs_dim, env.act_dim
    low, high = env.action_low, env.action_high
    learner = build_learner(config, obs_dim, act_dim, low, high, env.limited_dims, env.r_max, init_rng)
    buf = ReplayBuffer(min(config.buffer_size, max(config.total_steps, 1)), obs_dim, act_dim)
    fast_speed = getattr(getattr(env, "config", None), "fast_failure_speed", np.inf)
    out_dir = Path(out_dir) if out_dir is not None else None

    obs = env.reset(seed=env_rng)
    episode, ep_return, ep_steps = 0, 0.0, 0
    cum_failures = cum_fast = 0
    win, ep_win = _Window(), _Window()
    v_plus_history = []

    def emit(kind: str, step: int, w: _Window, **extra):
        row = {"kind": kind, "step": step, "episode": episode, "cum_failures": cum_failures,
               "cum_failures_fast": cum_fast, "v_plus": learner.limits.reported_v_plus().tolist(), **w.summary(),
               **extra}
        if metrics_stream is not None:
            record_metrics(metrics_stream, row)

    for step in range(1, config.total_steps + 1):
        if step <= config.warmup_steps:
            a_pre = scale_to_bounds(rng.uniform(-1.0, 1.0, act_dim), low, high)
            a_applied = apply_limits(a_pre, learner.limits)
        else:
            noise = rng.standard_normal((1, act_dim))
            a_pre, a_applied, _ = policy_actions(learner.actor, obs[None], noise, learner.limits)
            a_pre, a_applied = a_pre[0], a_applied[0]
        obs_next, reward, failed, done = env.step(a_applied)
        buf.add(Transition(obs, a_pre, a_applied, reward, obs_next, failed, done))
        ep_return += reward
        ep_steps += 1
        for w in (win, ep_win):
            w.rewards += reward
            w.steps += 1
        if failed:
            cum_failures += 1
            if getattr(env, "speed", 0.0) > fast_speed:
                cum_fast += 1

        if step > config.warmup_steps and step % config.update_every == 0:
            try:
                _update(learner, buf, config, rng, win, step > config.warmup_steps + config.limit_delay_steps)
            except FloatingPointError as exc:
                if out_dir is not None:
                    save_learner(out_dir / "checkpoint_aborted.npz", learner, config, env, step)
                raise TrainingAborted(f"step {step}: {exc}") from exc

        if done:
            emit("episode", step, ep_win, failed=bool(failed), episode_return=ep_return, episode_steps=ep_steps)
            episode += 1
            ep_return, ep_steps, ep_win = 0.0, 0, _Window()
            obs = env.reset()
        else:
            obs = obs_next
        if step % config.metrics_every == 0:
            emit("periodic", step, win)
            v_plus_history.append((step, learner.limits.reported_v_plus().tolist()))
            win = _Window()
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_learner(out_dir / f"checkpoint_{step:08d}.npz", learner, config, env, step)

    if out_dir is not None:
        save_learner(out_dir / "checkpoint_final.npz", learner, config, env, config.total_steps)
    return TrainResult(learner, cum_failures, cum_fast, config.total_steps, episode, v_plus_history, buf)


def save_learner(path, learner: Learner, config: TrainerConfig, env, step: int) -> None:
    meta = {"trainer": config.to_dict(), "step": step, "obs_dim": env.obs_dim, "act_dim": env.act_dim,
            "grid": [learner.critic.grid.v_min, learner.critic.grid.v_max, learner.critic.grid.n_atoms]}
    env_cfg = getattr(env, "config", None)
    if env_cfg is not None and hasattr(env_cfg, "to_dict"):
        meta["env"] = env_cfg.to_dict()
    gn.save_checkpoint(path, learner.checkpoint_groups(), meta)


def load_learner(path) -> tuple[Learner, dict]:
    groups, meta = gn.load_checkpoint(path)
    config = TrainerConfig.from_dict(meta["trainer"])
    v_min, v_max, n_atoms = meta["grid"]
    critic = CriticEnsemble(meta["obs_dim"], meta["act_dim"], AtomGrid(v_min, v_max, int(n_atoms)),
                            config.effective_n, config.hidden, rng=0)
    critic.params = gn.ParamSet(groups["critic"])
    critic.target = gn.ParamSet(groups["critic_target"])
    if critic.params.shapes != gn.ParamSet(groups["critic_target"]).shapes:
        raise ValueError("critic and target shapes differ")
    lim = groups["limits"]
    limits = ActionLimits(lim["low"], lim["high"], tuple(int(d) for d in lim["limited_dims"]),
                          lim["v_minus"], lim["v_plus"], bool(lim["active"]))
    opts = [gn.AdamW(config.lr_actor), gn.AdamW(config.lr_critic, config.weight_decay), gn.SGD(config.lr_limits)]
    for name, opt in zip(("actor_opt", "critic_opt", "limit_opt"), opts):
        opt.load_state_arrays(groups[name])
    return Learner(gn.ParamSet(groups["actor"]), critic, limits, *opts), meta


@dataclass(frozen=True)
class EvalResult:
    avg_speed: float
    failures: int
    avg_return: float


def evaluate_policy(actor, limits: ActionLimits, env, n_episodes: int, seed, max_steps: int | None = None) -> EvalResult:
    """Roll out the deterministic mean action; report mean speed-made-good per step, failures and return."""
    rng = np.random.default_rng(seed)
    if max_steps is None:
        max_steps = getattr(getattr(env, "config", None), "eval_episode_steps", 500)
    total_reward, total_steps, failures, returns = 0.0, 0, 0, []
    for _ in range(n_episodes):
        obs = env.reset(seed=np.random.default_rng(rng.integers(2**63)))
        ret = 0.0
        for _ in range(max_steps):
            a = mean_actions(actor, obs[None], limits)[0]
            obs, r, failed, done = env.step(a)
            ret += r
            total_reward += r
            total_steps += 1
            if failed:
                failures += 1
            if done:
                break
        returns.append(ret)
    return EvalResult(total_reward / max(total_steps, 1), failures, float(np.mean(returns)))


def iter_metrics(path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
