import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from racer.envs import CliffCar
from racer.estimator import RacerAgent
from racer.trainer import EvalResult


def agent(**kw):
    return RacerAgent(hidden=(8,), ensemble_n=2, n_atoms=11, batch_size=8, utd_ratio=1, warmup_steps=30,
                      total_steps=100, gamma=0.9, **kw)


@pytest.fixture(scope="module")
def fitted():
    return agent(random_state=2).fit(CliffCar())


def test_params_round_trip_through_clone():
    a = agent(alpha=0.5, random_state=7)
    b = clone(a)
    assert b.get_params() == a.get_params()
    cfg = b.set_params(no_limits=True).to_config()
    assert cfg.seed == 7 and cfg.alpha == 0.5 and cfg.no_limits


def test_invalid_params_fail_at_fit():
    with pytest.raises(ValueError):
        agent(alpha=1.5).fit(CliffCar())


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        agent().predict(np.zeros((1, 5)))


def test_predict_shapes_and_limits(fitted):
    X = np.random.default_rng(0).uniform(0, 1, (7, 5))
    a = fitted.predict(X)
    assert a.shape == (7, 2)
    assert np.all(a[:, 1] <= fitted.learner_.limits.v_plus[0])
    assert fitted.predict(X[0]).shape == (2,)
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 4)))


def test_predict_cvar(fitted):
    X = np.random.default_rng(1).uniform(0, 1, (4, 5))
    out = fitted.predict_cvar(X, fitted.predict(X))
    assert out.shape == (4,)
    grid = fitted.learner_.critic.grid
    assert np.all((out >= grid.v_min) & (out <= grid.v_max))


def test_fit_is_deterministic(fitted):
    again = agent(random_state=2).fit(CliffCar())
    assert again.learner_.actor.equals(fitted.learner_.actor)
    assert again.cum_failures_ == fitted.cum_failures_


def test_evaluate(fitted):
    res = fitted.evaluate(CliffCar(), n_episodes=1, seed=0)
    assert isinstance(res, EvalResult)
    assert res == fitted.evaluate(CliffCar(), n_episodes=1, seed=0)
