"""The seven Tomita languages over {0, 1}.

Membership is decided by plain string predicates; the ground-truth machines
come from separately transcribed DFAs.  Tests cross-check the two.
"""

import re
from functools import lru_cache
from itertools import groupby

import numpy as np

from ..automata import MooreMachine, minimize
from . import Environment, Episode

REJECT, ACCEPT = 0, 1
ACTION_NAMES = ("R", "A")


def _g3(s):
    runs = [(ch, len(list(grp))) for ch, grp in groupby(s)]
    for (a, na), (b, nb) in zip(runs, runs[1:]):
        if a == "1" and b == "0" and na % 2 == 1 and nb % 2 == 1:
            return False
    return True


PREDICATES = {
    1: lambda s: set(s) <= {"1"},
    2: lambda s: re.fullmatch("(10)*", s) is not None,
    3: _g3,
    4: lambda s: "000" not in s,
    5: lambda s: s.count("0") % 2 == 0 and s.count("1") % 2 == 0,
    6: lambda s: (s.count("1") - s.count("0")) % 3 == 0,
    7: lambda s: re.fullmatch("0*1*0*1*", s) is not None,
}

# grammar -> (transitions {state: (on '0', on '1')}, accepting states); start is 0
DFAS = {
    1: ({0: (1, 0), 1: (1, 1)}, {0}),
    2: ({0: (2, 1), 1: (0, 2), 2: (2, 2)}, {0}),
    3: (
        {0: (0, 1), 1: (3, 2), 2: (0, 1), 3: (4, 5), 4: (3, 1), 5: (5, 5)},
        {0, 1, 2, 4},
    ),
    4: ({0: (1, 0), 1: (2, 0), 2: (3, 0), 3: (3, 3)}, {0, 1, 2}),
    5: ({0: (2, 1), 1: (3, 0), 2: (0, 3), 3: (1, 2)}, {0}),
    6: ({0: (2, 1), 1: (0, 2), 2: (1, 0)}, {0}),
    7: ({0: (0, 1), 1: (2, 1), 2: (2, 3), 3: (4, 3), 4: (4, 4)}, {0, 1, 2, 3}),
}


def _check(g, s):
    if g not in PREDICATES:
        raise ValueError(f"grammar must be in 1..7, got {g}")
    if set(s) - {"0", "1"}:
        raise ValueError(f"non-binary symbol in {s!r}")


def tomita_membership(g, s):
    _check(g, s)
    return PREDICATES[g](s)


def tomita_ground_truth_machine(g):
    _check(g, "")
    table, accepting = DFAS[g]
    n = len(table)
    raw = MooreMachine(
        n_states=n,
        observations=("0", "1"),
        initial=0,
        transitions={(q, sym): table[q][i] for q in range(n) for i, sym in enumerate("01")},
        labels=tuple(ACCEPT if q in accepting else REJECT for q in range(n)),
        action_names=ACTION_NAMES,
    )
    return minimize(raw)


@lru_cache(maxsize=None)
def _completions(g, label, max_len):
    """counts[k][q]: strings of length k leading from q to a state with ``label``."""
    table, accepting = DFAS[g]
    states = range(len(table))
    counts = [[int((q in accepting) == label) for q in states]]
    for _ in range(max_len):
        prev = counts[-1]
        counts.append([prev[table[q][0]] + prev[table[q][1]] for q in states])
    return counts


def tomita_sample(g, label, length_range, rng):
    """Uniform string with the given membership, length uniform over feasible lengths."""
    _check(g, "")
    lo, hi = length_range
    counts = _completions(g, bool(label), hi)
    feasible = [n for n in range(lo, hi + 1) if counts[n][0] > 0]
    if not feasible:
        raise ValueError(f"grammar {g} has no {'accepted' if label else 'rejected'} strings with length in {length_range}")
    n = feasible[int(rng.integers(len(feasible)))]
    rank = int(rng.integers(counts[n][0]))
    table = DFAS[g][0]
    q, out = 0, []
    for k in range(n, 0, -1):
        zero = counts[k - 1][table[q][0]]
        if rank < zero:
            out.append("0")
            q = table[q][0]
        else:
            rank -= zero
            out.append("1")
            q = table[q][1]
    return "".join(out)


def one_hot(s):
    x = np.zeros((len(s), 2))
    x[np.arange(len(s)), [int(c) for c in s]] = 1.0
    return x


class TomitaEnv(Environment):
    """Episodes are strings; the decision that counts is the one after the last symbol.

    The optimal action after every prefix is that prefix's membership.  Even
    episode indices carry accepted strings, odd ones rejected strings.
    """

    obs_dim = 2
    action_count = 2
    action_names = ACTION_NAMES

    def __init__(self, grammar, length_range=(1, 50)):
        _check(grammar, "")
        self.grammar = grammar
        self.length_range = tuple(length_range)

    @property
    def name(self):
        return f"tomita{self.grammar}"

    def sample_episode(self, rng, index=0):
        s = tomita_sample(self.grammar, index % 2 == 0, self.length_range, rng)
        return self.episode_for(s)

    def episode_for(self, s):
        acts = [int(tomita_membership(self.grammar, s[: k + 1])) for k in range(len(s))]
        return Episode(one_hot(s), np.asarray(acts), tuple(s))

    def score(self, episode, actions):
        return float(actions[-1] == episode.actions[-1])

    def ground_truth_machine(self):
        return tomita_ground_truth_machine(self.grammar)

    def class_observations(self):
        return {"0": one_hot("0")[0], "1": one_hot("1")[0]}
