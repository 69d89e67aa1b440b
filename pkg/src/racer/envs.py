"""Desk-scale environments with terminal failures, and an exact tabular oracle.

``CliffCar`` is a kinematic bicycle rewarded with speed-made-good toward a
goal.  Each step it may roll over with a probability that rises with speed,
steering magnitude and terrain roughness; a rollover ends the episode with
zero reward.  Slow driving is therefore safe and fast cornering is not.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from pathlib import Path
from typing import Iterable

import numpy as np

from .riskmeasures import CategoricalDistribution
from .validation import check_random_state


@dataclass(frozen=True)
class CliffCarConfig:
    dt: float = 0.1
    max_speed: float = 2.0  # m/s at speed_cmd = 1
    speed_response: float = 3.0  # 1/s, first-order lag toward the commanded speed
    wheelbase: float = 0.25
    max_steer_angle: float = 0.6  # rad at |steer| = 1
    goal_sigma: float = 4.0
    goal_radius: float = 1.0
    min_goal_distance: float = 2.0
    spawn_sigma: float = 20.0
    hazard_k: float = 10.0
    hazard_threshold: float = 1.5
    roughness_min: float = 0.5
    roughness_max: float = 1.5
    roughness_waves: int = 4
    roughness_scale: float = 10.0  # m, wavelength of the roughness field
    terrain_seed: int = 0
    fast_failure_speed: float = 1.0  # m/s; failures above it count as "fast"
    eval_episode_steps: int = 500
    steer_bounds: tuple = (-1.0, 1.0)
    speed_bounds: tuple = (0.0, 1.0)

    @classmethod
    def from_dict(cls, d: dict) -> "CliffCarConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown environment config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    velocity: np.ndarray
    heading: float
    goal: np.ndarray
    roughness: float

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "velocity": self.velocity.tolist(),
            "heading": self.heading,
            "goal": self.goal.tolist(),
            "roughness": self.roughness,
        }


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    failed: bool
    done: bool

    def to_dict(self) -> dict:
        return {"next_state": self.next_state.to_dict(), "reward": self.reward,
                "failed": self.failed, "done": self.done}


class RoughnessField:
    """Smooth terrain roughness in ``[roughness_min, roughness_max]`` from a seed."""

    def __init__(self, config: CliffCarConfig):
        rng = np.random.default_rng(config.terrain_seed)
        n = config.roughness_waves
        angles = rng.uniform(0.0, 2 * math.pi, n)
        self._k = (2 * math.pi / config.roughness_scale) * np.stack([np.cos(angles), np.sin(angles)], 1)
        self._k *= rng.uniform(0.5, 1.5, (n, 1))
        self._phase = rng.uniform(0.0, 2 * math.pi, n)
        self._lo, self._hi = config.roughness_min, config.roughness_max

    def __call__(self, pos) -> float:
        wave = np.sin(self._k @ np.asarray(pos, dtype=float) + self._phase).mean()
        # mean of n unit sines concentrates near 0; stretch so the range is used
        u = np.clip(0.5 + wave, 0.0, 1.0)
        return float(self._lo + (self._hi - self._lo) * u)


def _logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x > -700 else 0.0


def rollover_probability(speed: float, steer: float, roughness: float, config: CliffCarConfig) -> float:
    return _logistic(config.hazard_k * (speed * abs(steer) * roughness - config.hazard_threshold))


def _sample_goal(position: np.ndarray, rng: np.random.Generator, config: CliffCarConfig) -> np.ndarray:
    while True:
        goal = position + rng.normal(0.0, config.goal_sigma, 2)
        if np.hypot(*(goal - position)) >= config.min_goal_distance:
            return goal


def cliffcar_step(state: EnvState, action, rng: np.random.Generator, config: CliffCarConfig,
                  terrain: RoughnessField | None = None) -> StepResult:
    """Advance one step.  Pure in ``(state, action, rng state)``."""
    terrain = terrain or RoughnessField(config)
    steer = float(np.clip(action[0], *config.steer_bounds))
    speed_cmd = float(np.clip(action[1], *config.speed_bounds))
    gain = min(1.0, config.speed_response * config.dt)
    speed = state.speed + gain * (speed_cmd * config.max_speed - state.speed)
    heading = state.heading + speed / config.wheelbase * math.tan(steer * config.max_steer_angle) * config.dt
    heading = math.atan2(math.sin(heading), math.cos(heading))
    velocity = speed * np.array([math.cos(heading), math.sin(heading)])
    to_goal = state.goal - state.position
    g_hat = to_goal / np.hypot(*to_goal)
    position = state.position + velocity * config.dt

    u_fail = rng.random()
    failed = u_fail < rollover_probability(speed, steer, state.roughness, config)
    goal = state.goal
    if np.hypot(*(goal - position)) < config.goal_radius:
        goal = _sample_goal(position, rng, config)
    nxt = EnvState(position, velocity, heading, goal, terrain(position))
    reward = 0.0 if failed else float(velocity @ g_hat)
    return StepResult(nxt, reward, bool(failed), bool(failed))


def observe(state: EnvState, config: CliffCarConfig) -> np.ndarray:
    """Egocentric observation: goal bearing (cos, sin), scaled distance, scaled speed, roughness."""
    d = state.goal - state.position
    dist = float(np.hypot(*d))
    bearing = math.atan2(d[1], d[0]) - state.heading
    return np.array([
        math.cos(bearing),
        math.sin(bearing),
        min(dist, 10.0) / 10.0,
        state.speed / config.max_speed,
        state.roughness,
    ])


class CliffCar:
    """Stateful wrapper around :func:`cliffcar_step` with failure accounting."""

    obs_dim = 5
    act_dim = 2
    limited_dims = (1,)

    def __init__(self, config: CliffCarConfig | None = None, seed=None):
        self.config = config or CliffCarConfig()
        self.terrain = RoughnessField(self.config)
        self.rng = check_random_state(seed)
        self.failures = 0
        self.state: EnvState | None = None
        self._last_failed = False

    @property
    def action_low(self) -> np.ndarray:
        return np.array([self.config.steer_bounds[0], self.config.speed_bounds[0]])

    @property
    def action_high(self) -> np.ndarray:
        return np.array([self.config.steer_bounds[1], self.config.speed_bounds[1]])

    @property
    def r_max(self) -> float:
        return self.config.max_speed

    @property
    def speed(self) -> float:
        return 0.0 if self.state is None else self.state.speed

    def reset(self, seed=None) -> np.ndarray:
        if self._last_failed:
            self.failures += 1
            self._last_failed = False
        if seed is not None:
            self.rng = check_random_state(seed)
        self.state = reset(self, self.rng)
        return observe(self.state, self.config)

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        res = cliffcar_step(self.state, action, self.rng, self.config, self.terrain)
        self.state = res.next_state
        self._last_failed = res.failed
        self.last_result = res
        return observe(res.next_state, self.config), res.reward, res.failed, res.done


def reset(env: CliffCar, seed) -> EnvState:
    """Deterministic spawn for a given seed (or Generator state)."""
    rng = check_random_state(seed)
    cfg = env.config
    position = rng.normal(0.0, cfg.spawn_sigma, 2)
    heading = float(rng.uniform(-math.pi, math.pi))
    goal = _sample_goal(position, rng, cfg)
    return EnvState(position, np.zeros(2), heading, goal, env.terrain(position))


def dump_trajectory(path, results: Iterable[StepResult]) -> None:
    with open(Path(path), "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


# -- tabular MDPs -------------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularMDP:
    """``transitions[s, a, s']`` probabilities and ``rewards[s, a, s']``.

    States in ``terminal`` absorb; ``failure`` marks the terminal states that
    count as failures.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    terminal: frozenset = field(default_factory=frozenset)
    failure: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        R = np.broadcast_to(np.asarray(self.rewards, dtype=float)[..., None] if np.ndim(self.rewards) == 2
                            else np.asarray(self.rewards, dtype=float), P.shape)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transitions must have shape (S, A, S)")
        if np.any(P < 0) or not np.allclose(P.sum(-1), 1.0, atol=1e-12):
            raise ValueError("transition rows must be distributions")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", np.array(R))
        object.__setattr__(self, "terminal", frozenset(self.terminal))
        object.__setattr__(self, "failure", frozenset(self.failure))
        if not self.failure <= self.terminal:
            raise ValueError("failure states must be terminal")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def step(self, s: int, a: int, rng: np.random.Generator) -> tuple[int, float, bool, bool]:
        s2 = int(rng.choice(self.n_states, p=self.transitions[s, a]))
        return s2, float(self.rewards[s, a, s2]), s2 in self.failure, s2 in self.terminal


def risky_bandit() -> TabularMDP:
    """Start state, risky state, and two absorbing outcomes (done / crashed).

    From the start, action 0 banks 1 and ends; action 1 moves to the risky
    state for free.  There, action 0 banks 1; action 1 pays 3 with probability
    0.7 and crashes (reward 0) with probability 0.3.
    """
    P = np.zeros((4, 2, 4))
    R = np.zeros((4, 2, 4))
    P[0, 0, 2], R[0, 0, 2] = 1.0, 1.0
    P[0, 1, 1] = 1.0
    P[1, 0, 2], R[1, 0, 2] = 1.0, 1.0
    P[1, 1, 2], R[1, 1, 2] = 0.7, 3.0
    P[1, 1, 3] = 0.3
    P[2, :, 2] = 1.0
    P[3, :, 3] = 1.0
    return TabularMDP(P, R, terminal={2, 3}, failure={3})


def tabular_return_distribution(m: TabularMDP, policy: np.ndarray, gamma: float, horizon: int,
                                tol: float = 1e-6) -> dict[tuple[int, int], CategoricalDistribution]:
    """Exact return distribution of every non-terminal ``(s, a)`` by trajectory enumeration.

    Trajectories still running after ``horizon`` steps are cut off at their
    partial return; if such mass exists and the neglected tail bound
    ``gamma**horizon * r_max / (1 - gamma)`` exceeds ``tol`` a ``ValueError``
    names the horizon required.
    """
    if m.n_states > 100:
        raise ValueError("tabular oracle is limited to 100 states")
    policy = np.asarray(policy, dtype=float)
    r_max = float(np.abs(m.rewards).max())
    out = {}
    for s0, a0 in product(range(m.n_states), range(m.n_actions)):
        if s0 in m.terminal:
            continue
        # frontier: (state, action) -> {partial return: prob}
        frontier = {(s0, a0): {0.0: 1.0}}
        finished: dict[float, float] = {}
        disc = 1.0
        for _ in range(horizon):
            nxt: dict[tuple[int, int], dict[float, float]] = {}
            for (s, a), rets in frontier.items():
                for s2 in np.flatnonzero(m.transitions[s, a]):
                    p_tr = m.transitions[s, a, s2]
                    for ret, pr in rets.items():
                        g = round(ret + disc * m.rewards[s, a, s2], 12)
                        if s2 in m.terminal:
                            finished[g] = finished.get(g, 0.0) + pr * p_tr
                            continue
                        for a2 in np.flatnonzero(policy[s2]):
                            bucket = nxt.setdefault((int(s2), int(a2)), {})
                            bucket[g] = bucket.get(g, 0.0) + pr * p_tr * policy[s2, a2]
            frontier = nxt
            disc *= gamma
            if not frontier:
                break
        if frontier:
            bound = disc * r_max / (1.0 - gamma) if gamma < 1 else math.inf
            if bound > tol:
                need = math.ceil(math.log(tol * (1.0 - gamma) / max(r_max, 1e-300)) / math.log(gamma)) if 0 < gamma < 1 else None
                raise ValueError(f"horizon {horizon} leaves tail bound {bound:.3g} > tol {tol:g}; need horizon >= {need}")
            for rets in frontier.values():
                for ret, pr in rets.items():
                    finished[ret] = finished.get(ret, 0.0) + pr
        atoms = np.array(sorted(finished))
        probs = np.array([finished[z] for z in atoms])
        out[(s0, a0)] = CategoricalDistribution(atoms, probs / probs.sum())
    return out
