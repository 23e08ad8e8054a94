from __future__ import annotations

import numpy as np
import pytest

from mccf.synthetic import regime_corpus, stochastic_corpus
from mccf.state_space import train_model
from mccf.trajdata import TrajectoryPair


def make_pair(pair_id="p", n=100, v_f=8.0, v_l=8.0, gap=15.0, dt=0.1, l=5.0, a_f=None):
    """Constant-speed pair; scalars broadcast, arrays are used as given."""
    t = np.arange(n) * dt
    v_f = np.broadcast_to(np.asarray(v_f, float), (n,)).copy()
    v_l = np.broadcast_to(np.asarray(v_l, float), (n,)).copy()
    x_f = np.concatenate([[0.0], np.cumsum(0.5 * (v_f[:-1] + v_f[1:]) * dt)])
    x_l = gap + l + np.concatenate([[0.0], np.cumsum(0.5 * (v_l[:-1] + v_l[1:]) * dt)])
    a = np.zeros(n) if a_f is None else np.broadcast_to(np.asarray(a_f, float), (n,)).copy()
    return TrajectoryPair(pair_id, t, x_f, v_f, a, x_l, v_l, np.zeros(n), l)


@pytest.fixture(scope="session")
def small_corpus():
    return stochastic_corpus(30, 200, seed=11)


@pytest.fixture(scope="session")
def small_model(small_corpus):
    return train_model(small_corpus)


@pytest.fixture(scope="session")
def regime_model():
    return train_model(regime_corpus(40, 200, seed=5, spread=0.8))
