import io
import json

import numpy as np
import pytest

from racer import gradnet as gn
from racer.actor_limits import ActionLimits, apply_limits
from racer.envs import CliffCar, CliffCarConfig
from racer.trainer import (
    ABLATIONS,
    PRESETS,
    ReplayBuffer,
    TrainerConfig,
    TrainingAborted,
    Transition,
    evaluate_policy,
    iter_metrics,
    load_learner,
    record_metrics,
    train,
)

TINY = dict(hidden=(8,), ensemble_n=2, n_atoms=11, batch_size=8, utd_ratio=1, warmup_steps=50, total_steps=300,
            metrics_every=50, gamma=0.9)


def tiny(**kw):
    return TrainerConfig(**{**TINY, **kw})


def run(cfg, env_cfg=None, out_dir=None):
    stream = io.StringIO()
    res = train(cfg, CliffCar(env_cfg), stream, out_dir)
    return res, [json.loads(line) for line in stream.getvalue().splitlines()], stream.getvalue()


def transition(i, failed=False):
    return Transition(np.full(2, float(i)), np.zeros(1), np.zeros(1), float(i), np.zeros(2), failed, failed)


# -- replay --------------------------------------------------------------------------------------


def test_transition_failed_implies_done():
    with pytest.raises(ValueError):
        Transition(np.zeros(2), np.zeros(1), np.zeros(1), 0.0, np.zeros(2), True, False)


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(3, 2, 1)
    for i in range(5):
        buf.add(transition(i))
    assert len(buf) == 3
    assert sorted(buf[j].r for j in range(3)) == [2.0, 3.0, 4.0]
    with pytest.raises(IndexError):
        buf[3]


def test_buffer_sampling_is_uniform():
    buf = ReplayBuffer(100, 2, 1)
    for i in range(100):
        buf.add(transition(i))
    idx = buf.sample_indices(1_000_000, np.random.default_rng(0))
    freq = np.bincount(idx, minlength=100) / 1_000_000
    assert np.all(np.abs(freq - 0.01) <= 0.05 * 0.01)


def test_buffer_errors():
    with pytest.raises(ValueError):
        ReplayBuffer(0, 2, 1)
    with pytest.raises(ValueError):
        ReplayBuffer(2, 2, 1).sample(1, np.random.default_rng(0))


# -- config ---------------------------------------------------------------------------------------


@pytest.mark.parametrize("bad", [{"gamma": 1.0}, {"alpha": 1.0}, {"utd_ratio": 0}, {"tau": 2.0}, {"n_atoms": 1},
                                 {"weight_decay": -1.0}, {"initial_limit_fraction": 0.0}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainerConfig(**bad)


def test_config_round_trip():
    cfg = TrainerConfig.from_dict(PRESETS["desk"])
    assert TrainerConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainerConfig.from_dict({"learning_rate": 1.0})


def test_ablations_are_independent():
    cfg = TrainerConfig()
    for name in ABLATIONS:
        on = cfg.with_ablation(name)
        assert getattr(on, name)
        assert sum(getattr(on, other) for other in ABLATIONS) == 1
    assert cfg.with_ablation("risk_neutral").effective_alpha == 0.0
    assert cfg.with_ablation("no_epistemic").effective_n == 1
    with pytest.raises(ValueError):
        cfg.with_ablation("no_critic")


def test_default_grid():
    g = TrainerConfig(gamma=0.9).grid(2.0)
    assert (g.v_min, g.v_max, g.n_atoms) == (0.0, pytest.approx(20.0), 51)


def test_record_metrics_writes_sorted_json_line():
    s = io.StringIO()
    record_metrics(s, {"b": 1, "a": 2})
    assert s.getvalue() == '{"a": 2, "b": 1}\n'


# -- training loop ---------------------------------------------------------------------------------


def test_same_seed_gives_identical_metrics():
    _, _, a = run(tiny(seed=3))
    _, _, b = run(tiny(seed=3))
    _, _, c = run(tiny(seed=4))
    assert a == b
    assert a != c


def test_metrics_invariants():
    res, rows, _ = run(tiny(total_steps=400), CliffCarConfig(hazard_threshold=0.2))
    steps = [r["step"] for r in rows]
    assert steps == sorted(steps)
    fails = [r["cum_failures"] for r in rows]
    assert fails == sorted(fails)
    episodes = [r for r in rows if r["kind"] == "episode"]
    assert sum(r["failed"] for r in episodes) == res.cum_failures > 0
    stored = res.buffer._data["failed"][: len(res.buffer)].sum()
    assert stored == res.cum_failures
    assert res.cum_failures_fast <= res.cum_failures
    periodic = [r for r in rows if r["kind"] == "periodic"]
    assert [r["step"] for r in periodic] == list(range(50, 401, 50))
    for key in ("episode", "cum_failures_fast", "avg_speed", "v_plus", "cvar_alpha_mean", "loss_critic"):
        assert key in periodic[-1]


def test_transitions_store_limited_actions():
    res, _, _ = run(tiny(limit_delay_steps=10_000))
    lim = res.limits
    np.testing.assert_allclose(lim.v_plus, [0.2])
    d = res.buffer._data
    np.testing.assert_array_equal(d["a_applied"], apply_limits(d["a_pre"], lim))


def test_no_limits_pins_v_plus_at_hard_max():
    _, rows, _ = run(tiny(no_limits=True))
    assert all(r["v_plus"] == [1.0] for r in rows)


def test_limits_frozen_during_warmup_and_delay():
    _, rows, _ = run(tiny(warmup_steps=100, limit_delay_steps=100))
    early = [r["v_plus"][0] for r in rows if r["kind"] == "periodic" and r["step"] <= 200]
    assert early == [pytest.approx(0.2)] * len(early)
    assert rows[-1]["v_plus"][0] != pytest.approx(0.2)


def test_v_plus_stays_within_bounds():
    res, rows, _ = run(tiny(lr_limits=1.0))
    vps = [r["v_plus"][0] for r in rows]
    assert min(vps) >= 0.01 - 1e-12 and max(vps) <= 1.0


def test_no_epistemic_drops_entropy_terms():
    res, rows, _ = run(tiny(no_epistemic=True))
    assert res.learner.critic.n_members == 1
    for r in rows:
        if r["kind"] == "periodic" and r["loss_critic"] is not None:
            assert r["loss_critic"] == pytest.approx(r["loss_kl"], abs=1e-12)
            assert r["entropy_in"] == r["entropy_ood"] == 0.0


def test_risk_neutral_ablation_runs():
    res, rows, _ = run(tiny(risk_neutral=True, no_limits=True, no_epistemic=True))
    assert res.learner.critic.n_members == 1
    assert np.isfinite(rows[-1]["loss_actor"])


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    with pytest.raises(TrainingAborted):
        run(tiny(lr_critic=1e300, lr_actor=1e300), out_dir=tmp_path)
    assert (tmp_path / "checkpoint_aborted.npz").exists()


def test_checkpoints_round_trip(tmp_path):
    res, _, _ = run(tiny(checkpoint_every=100), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.npz")) == [
        "checkpoint_00000100.npz", "checkpoint_00000200.npz", "checkpoint_00000300.npz", "checkpoint_final.npz"]
    learner, meta = load_learner(tmp_path / "checkpoint_final.npz")
    assert meta["step"] == 300
    assert learner.actor.equals(res.learner.actor)
    assert learner.critic.params.equals(res.learner.critic.params)
    assert learner.critic.target.equals(res.learner.critic.target)
    np.testing.assert_array_equal(learner.limits.v_plus, res.learner.limits.v_plus)
    assert learner.actor_opt.t == res.learner.actor_opt.t


def test_iter_metrics(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"step": 1}\n\n{"step": 2}\n')
    assert [r["step"] for r in iter_metrics(p)] == [1, 2]


# -- evaluation ---------------------------------------------------------------------------------------


def constant_actor(speed_pre: float):
    """Actor whose mean is fixed: straight ahead at the given unit speed."""
    p = gn.init_mlp([CliffCar.obs_dim, 4, 4], np.random.default_rng(0))
    p = p.map(np.zeros_like)
    return p.replace(b1=np.array([0.0, np.arctanh(speed_pre), 0.0, 0.0]))


def test_zero_speed_policy_evaluates_to_zero():
    lim = ActionLimits.initial(CliffCar().action_low, CliffCar().action_high, (1,), active=False)
    res = evaluate_policy(constant_actor(-0.999999), lim, CliffCar(), 3, seed=0, max_steps=100)
    assert res.avg_speed == pytest.approx(0.0, abs=1e-5)
    assert res.failures == 0


def test_evaluation_is_deterministic():
    lim = ActionLimits.initial(CliffCar().action_low, CliffCar().action_high, (1,), active=False)
    a = evaluate_policy(constant_actor(0.5), lim, CliffCar(), 3, seed=1, max_steps=100)
    b = evaluate_policy(constant_actor(0.5), lim, CliffCar(), 3, seed=1, max_steps=100)
    assert a == b


def test_full_throttle_random_policy_fails():
    env = CliffCar(seed=0)
    env.reset()
    rng = np.random.default_rng(0)
    fails = 0
    for _ in range(500):
        _, _, failed, done = env.step((rng.uniform(-1, 1), 1.0))
        fails += failed
        if done:
            env.reset()
    assert fails > 0
