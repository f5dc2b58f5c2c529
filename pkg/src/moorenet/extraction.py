"""Tabulating an MMN into a Moore machine.

The MMN is run greedily on environment episodes and every
``(state code, observation code) -> state code`` step is recorded.  Because the
decoded state depends on its code alone, the recorded table is a
deterministic Moore machine.  Cells never visited can optionally be filled
by asking the MMN directly what it would do from that code pair.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import layers
from .automata import TransitionTable, UndefinedTransition
from .autodiff import Tape
from .mmn import mmn_unroll, observation_keys
from .policy import features, logits, pad_batch, transition
from .qbn import bottleneck, code_key, decode, key_code

log = logging.getLogger(__name__)


@dataclass
class ExtractConfig:
    min_episodes: int = 200
    saturation_window: int = 200  # stop once this many episodes add no cell
    max_episodes: int = 5000
    chunk: int = 100
    query_completion: bool = True
    max_query_states: int = 256  # new states the completion may discover


@dataclass
class ExtractStats:
    episodes: int
    raw_states: int
    raw_observations: int
    witnessed_cells: int
    queried_cells: int
    saturated: bool


class _Tables:
    """TransitionTable plus the raw data needed to query the MMN."""

    def __init__(self, mmn):
        self.mmn = mmn
        self.table = TransitionTable()
        self.raw_obs = {}  # observation key -> one raw observation (no b_f only)

    def state(self, code_row, dist_row):
        return self.table.state(code_key(code_row), int(np.argmax(dist_row)))


def _record(tables, run, episodes, obs):
    """Add a chunk of MMN runs; returns the number of new cells per episode."""
    mmn = tables.mmn
    start_label = _initial_label(mmn)
    fresh = []
    for i, e in enumerate(episodes):
        n = len(e.actions)
        keys = observation_keys(mmn, obs[i, :n], None if run.f_codes is None else run.f_codes[i, :n])
        if mmn.qbn_f is None:
            for k, row in zip(keys, obs[i, :n]):
                tables.raw_obs.setdefault(k, row.copy())
        s = tables.table.state(code_key(run.h_codes[i, 0]), start_label)
        new = 0
        for t in range(n):
            o = tables.table.observation(keys[t])
            nxt = tables.state(run.h_codes[i, t + 1], run.dists[i, t])
            new += tables.table.witness(s, o, nxt)
            s = nxt
        fresh.append(new)
    return fresh


def _initial_label(mmn):
    tp = Tape(record=False)
    ph = layers.bind(tp, mmn.qbn_h.params, False)
    pp = layers.bind(tp, mmn.policy.params, False)
    _, h_hat = bottleneck(tp, ph, mmn.qbn_h.config, tp.const(np.zeros((1, mmn.arch.hidden_size))))
    return int(np.argmax(logits(tp, pp, h_hat).data[0]))


def query_successors(mmn, state_keys, obs_inputs):
    """MMN successor code and action for each (state code, observation input) pair.

    ``obs_inputs`` are b_f code keys when the MMN has b_f, raw observation rows
    otherwise.
    """
    tp = Tape(record=False)
    ph = layers.bind(tp, mmn.qbn_h.params, False)
    pp = layers.bind(tp, mmn.policy.params, False)
    h_hat = decode(tp, ph, mmn.qbn_h.config, tp.const(np.stack([key_code(k) for k in state_keys])))
    if mmn.qbn_f is not None:
        pf = layers.bind(tp, mmn.qbn_f.params, False)
        f = decode(tp, pf, mmn.qbn_f.config, tp.const(np.stack([key_code(k) for k in obs_inputs])))
    else:
        f = features(tp, pp, mmn.arch, tp.const(np.stack(obs_inputs)))
    code, h_next = bottleneck(tp, ph, mmn.qbn_h.config, transition(tp, pp, f, h_hat))
    acts = np.argmax(logits(tp, pp, h_next).data, axis=1)
    return [code_key(c) for c in code.data], [int(a) for a in acts]


def _complete_by_query(tables, cap):
    table = tables.table
    mmn = tables.mmn
    obs_keys = sorted(table.observations, key=table.observations.get)
    start_states = len(table.states)
    queried = 0
    while True:
        state_keys = sorted(table.states, key=table.states.get)
        todo = [(s, o) for s in state_keys for o in obs_keys if (table.states[s], table.observations[o]) not in table.cells]
        if not todo:
            return queried
        if len(table.states) - start_states > cap:
            log.warning("query completion stopped after %d new states", len(table.states) - start_states)
            return queried
        inputs = [o if mmn.qbn_f is not None else tables.raw_obs[o] for _, o in todo]
        nxt, acts = query_successors(mmn, [s for s, _ in todo], inputs)
        for (s, o), t, a in zip(todo, nxt, acts):
            ti = table.state(t, a)
            table.witness(table.states[s], table.observations[o], ti)
            queried += 1


def extract(mmn, env, cfg, seed):
    """Run the MMN until the table saturates; returns ``(machine, stats)``.

    The returned machine is the raw (unminimised) table; its symbols are
    observation code keys and its state codes are state code keys.
    """
    tables = _Tables(mmn)
    history = []
    done = 0
    saturated = False
    while done < cfg.max_episodes:
        eps = env.episodes(seed, "extract", min(cfg.chunk, cfg.max_episodes - done), done)
        obs, _, _ = pad_batch(eps, mmn.arch.obs_dim)
        history += _record(tables, mmn_unroll(mmn, obs), eps, obs)
        done += len(eps)
        if done >= cfg.min_episodes and len(history) >= cfg.saturation_window:
            if sum(history[-cfg.saturation_window :]) == 0:
                saturated = True
                break
    table = tables.table
    witnessed = len(table.cells)
    shape = table.shape
    queried = _complete_by_query(tables, cfg.max_query_states) if cfg.query_completion else 0
    initial = 0  # first state ever recorded is the shared start code
    machine = table.to_machine(initial, getattr(env, "action_names", None))
    stats = ExtractStats(done, shape[0], shape[1], witnessed, queried, saturated)
    log.info("extracted %d states x %d observations from %d episodes", shape[0], shape[1], done)
    return machine, stats


# -- using extracted machines ------------------------------------------------


class MachineActor:
    """Acts with a Moore machine, discretising raw observations through the MMN.

    An observation whose code the machine never saw, or a missing
    transition, aborts the episode (reported as a failure).
    """

    def __init__(self, machine, mmn):
        self.machine = machine
        self.mmn = mmn
        self.symbols = machine.symbol_for_code()

    def actions(self, episodes):
        out = []
        for e in episodes:
            keys = observation_keys(self.mmn, e.observations)
            s = self.machine.initial
            acts = []
            try:
                for k in keys:
                    if k not in self.symbols:
                        raise UndefinedTransition(k)
                    s = self.machine.step(s, self.symbols[k])
                    acts.append(self.machine.labels[s])
            except UndefinedTransition:
                out.append(None)
                continue
            out.append(np.asarray(acts))
        return out


def symbol_alignment(machine, mmn, env, reference):
    """Map each ground-truth symbol to the extracted symbol of its observation.

    Returns ``{name: (reference_symbol, machine_symbol)}`` usable by
    ``equivalent(reference, machine, alignment=...)``, or raises KeyError if a
    class observation lands on a code the machine never saw.
    """
    lookup = machine.symbol_for_code()
    reps = env.class_observations()
    out = {}
    for sym in reference.observations:
        key = observation_keys(mmn, reps[sym][None, :])[0]
        if key not in lookup:
            raise KeyError(f"class {sym!r} maps to unseen observation code {key!r}")
        out[sym] = (sym, lookup[key])
    return out

