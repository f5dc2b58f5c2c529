"""Mode Counter Environments.

Hidden state is ``(mode, count)``; the mode changes only when its lifespan is
used up.  While the count is in the informative set the observation lies in
the mode's interval ``[m/M, (m+1)/M)``, otherwise it is uniform on ``[0, 1)``.
Modes are 0-indexed so the intervals tile the unit interval.
"""

from dataclasses import dataclass

import numpy as np

from .. import rng as rngs
from ..automata import MooreMachine, minimize
from . import Environment, Episode


class NotRepresentable(ValueError):
    pass


@dataclass(frozen=True)
class MceConfig:
    name: str
    mode_count: int
    transition: tuple  # M x M, row m is P(. | m)
    initial: tuple  # distribution over the first mode
    lifespans: tuple  # one positive integer per mode
    count_set: frozenset
    episode_length: int = 50

    def __post_init__(self):
        m = self.mode_count
        if m < 1:
            raise ValueError("mode_count must be positive")
        p = np.asarray(self.transition, dtype=float)
        if p.shape != (m, m) or len(self.initial) != m or len(self.lifespans) != m:
            raise ValueError("transition, initial and lifespans must be sized by mode_count")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-9):
            raise ValueError("transition rows must be probability distributions")
        if min(self.initial) < 0 or abs(sum(self.initial) - 1) > 1e-9:
            raise ValueError("initial distribution must sum to 1")
        if min(self.lifespans) < 1:
            raise ValueError("lifespans must be positive")
        if any(c < 0 or c >= max(self.lifespans) for c in self.count_set):
            raise ValueError("count_set entries must lie below the largest lifespan")
        if self.episode_length < 1:
            raise ValueError("episode_length must be positive")


@dataclass(frozen=True)
class MceState:
    mode: int
    count: int


def _random_rows(rng, n_rows, m):
    return tuple(tuple(float(x) for x in rng.dirichlet(np.ones(m))) for _ in range(n_rows))


def amnesia(seed=0, mode_count=4, episode_length=50):
    r = rngs.stream(seed, "mce", "amnesia")
    rows = _random_rows(r, mode_count + 1, mode_count)
    return MceConfig("amnesia", mode_count, rows[:-1], rows[-1], (1,) * mode_count, frozenset({0}), episode_length)


def blind(seed=0, lifespans=(2, 3, 4, 1), episode_length=50):
    m = len(lifespans)
    cyc = tuple(tuple(1.0 if j == (i + 1) % m else 0.0 for j in range(m)) for i in range(m))
    start = tuple(1.0 if j == 0 else 0.0 for j in range(m))
    return MceConfig("blind", m, cyc, start, tuple(lifespans), frozenset(), episode_length)


def tracker(seed=0, lifespans=(2, 3, 4, 1), episode_length=50):
    m = len(lifespans)
    r = rngs.stream(seed, "mce", "tracker")
    rows = _random_rows(r, m + 1, m)
    return MceConfig("tracker", m, rows[:-1], rows[-1], tuple(lifespans), frozenset({0}), episode_length)


PRESETS = {"amnesia": amnesia, "blind": blind, "tracker": tracker}


def mce_preset(name, seed=0, episode_length=50):
    return PRESETS[name](seed=seed, episode_length=episode_length)


def mce_reset(config, rng):
    return MceState(int(rng.choice(config.mode_count, p=config.initial)), 0)


def mce_observe(config, state, rng):
    if state.count in config.count_set:
        return (state.mode + rng.random()) / config.mode_count
    return rng.random()


def mce_step(config, state, rng):
    """Observation of ``state`` and the state that follows it."""
    obs = mce_observe(config, state, rng)
    if state.count == config.lifespans[state.mode] - 1:
        nxt = MceState(int(rng.choice(config.mode_count, p=config.transition[state.mode])), 0)
    else:
        nxt = MceState(state.mode, state.count + 1)
    return nxt, obs


def mce_optimal_action(config, state):
    return state.mode


def obs_class(config, obs):
    return min(int(obs * config.mode_count), config.mode_count - 1)


def mce_ground_truth_machine(config):
    """Minimal Moore machine of the optimal policy over interval classes.

    States track the exact ``(mode, count)``; the start state's label is never
    emitted and is left to minimisation.
    """
    m = config.mode_count
    symbols = tuple(f"o{j}" for j in range(m))

    def successors(state):
        if state == "start":
            return [(k, 0) for k in range(m) if config.initial[k] > 0]
        mode, count = state
        if count < config.lifespans[mode] - 1:
            return [(mode, count + 1)]
        return [(k, 0) for k in range(m) if config.transition[mode][k] > 0]

    index = {"start": 0}
    order = ["start"]
    trans = {}
    i = 0
    while i < len(order):
        state = order[i]
        for j, sym in enumerate(symbols):
            nxt = [(k, c) for k, c in successors(state) if c not in config.count_set or k == j]
            if not nxt:
                continue
            if len(nxt) > 1:
                raise NotRepresentable(
                    f"{config.name}: from {state} observation {sym} leaves the mode ambiguous among {nxt}"
                )
            if nxt[0] not in index:
                index[nxt[0]] = len(order)
                order.append(nxt[0])
            trans[index[state], sym] = index[nxt[0]]
        i += 1
    labels = tuple(0 if s == "start" else s[0] for s in order)
    raw = MooreMachine(
        n_states=len(order),
        observations=symbols,
        initial=0,
        transitions=trans,
        labels=labels,
        free=frozenset({0}),
        action_names=tuple(f"m{k}" for k in range(m)),
    )
    return minimize(raw)


class MceEnv(Environment):
    obs_dim = 1

    def __init__(self, config):
        self.config = config
        self.action_count = config.mode_count
        self.action_names = tuple(f"m{k}" for k in range(config.mode_count))

    @property
    def name(self):
        return self.config.name

    def sample_episode(self, rng, index=0):
        cfg = self.config
        state = mce_reset(cfg, rng)
        obs, acts, syms = [], [], []
        for _ in range(cfg.episode_length):
            acts.append(mce_optimal_action(cfg, state))
            state, o = mce_step(cfg, state, rng)
            obs.append(o)
            syms.append(f"o{obs_class(cfg, o)}")
        return Episode(np.asarray(obs).reshape(-1, 1), np.asarray(acts), tuple(syms))

    def score(self, episode, actions):
        return float(np.array_equal(np.asarray(actions), episode.actions))

    def ground_truth_machine(self):
        return mce_ground_truth_machine(self.config)

    def class_observations(self):
        m = self.config.mode_count
        return {f"o{j}": np.array([(j + 0.5) / m]) for j in range(m)}
