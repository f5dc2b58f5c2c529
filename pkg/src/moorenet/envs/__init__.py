"""Benchmark environments with known optimal policies and ground-truth machines."""

from dataclasses import dataclass

import numpy as np

from .. import rng as rngs


@dataclass
class Episode:
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T,) optimal action after each observation
    symbols: tuple  # ground-truth observation class of each step


class Environment:
    obs_dim: int
    action_count: int
    action_names: tuple = None

    def sample_episode(self, rng, index=0):
        raise NotImplementedError

    def score(self, episode, actions):
        raise NotImplementedError

    def episodes(self, seed, tag, count, start=0):
        """Episodes ``start..start+count-1`` of the named stream, each from its own generator."""
        return [self.sample_episode(rngs.stream(seed, "episode", tag, i), i) for i in range(start, start + count)]

    def ground_truth_machine(self):
        raise NotImplementedError

    def class_observations(self):
        """Representative raw observation for each ground-truth symbol."""
        raise NotImplementedError


def make_env(spec):
    """Build an environment from its config dict (``{"kind": "mce" | "tomita", ...}``)."""
    from .mce import MceEnv, mce_preset
    from .tomita import TomitaEnv

    kind = spec["kind"]
    if kind == "mce":
        return MceEnv(mce_preset(spec["instance"], seed=spec.get("seed", 0), episode_length=spec.get("episode_length", 50)))
    if kind == "tomita":
        lo, hi = spec.get("length_range", (1, 50))
        return TomitaEnv(spec["grammar"], (lo, hi))
    raise ValueError(f"unknown environment kind {kind!r}")
