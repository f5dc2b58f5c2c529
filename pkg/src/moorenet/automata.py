"""Moore machines: tabulation, minimisation, equivalence, rendering.

States are ``0..n-1``; observations are string symbols.  A machine may carry
provenance (which ternary codes each state/symbol stands for) and a set of
*free* states whose action label is never emitted, which minimisation is
allowed to choose.
"""

from collections import Counter, deque
from dataclasses import dataclass, replace
from itertools import product

SCHEMA = "moorenet.machine/1"


class UndefinedTransition(KeyError):
    pass


class MooreViolation(ValueError):
    """Same (state, observation) witnessed with two different successors."""


@dataclass(frozen=True)
class MooreMachine:
    n_states: int
    observations: tuple
    initial: int
    transitions: dict
    labels: tuple
    free: frozenset = frozenset()
    action_names: tuple = None
    state_codes: tuple = None
    obs_codes: dict = None

    def __post_init__(self):
        if not 0 <= self.initial < self.n_states:
            raise ValueError(f"initial state {self.initial} outside 0..{self.n_states - 1}")
        if len(self.labels) != self.n_states:
            raise ValueError("every state needs exactly one label")
        alphabet = set(self.observations)
        if len(alphabet) != len(self.observations):
            raise ValueError("duplicate observation symbols")
        for (s, o), t in self.transitions.items():
            if o not in alphabet:
                raise ValueError(f"transition on unknown symbol {o!r}")
            if not (0 <= s < self.n_states and 0 <= t < self.n_states):
                raise ValueError(f"transition ({s}, {o!r}) -> {t} leaves the state set")

    def step(self, state, symbol):
        try:
            return self.transitions[state, symbol]
        except KeyError:
            raise UndefinedTransition(f"no transition from state {state} on {symbol!r}") from None

    def action_name(self, label):
        return self.action_names[label] if self.action_names else str(label)

    def symbol_for_code(self):
        """Inverse of ``obs_codes``: raw code -> (possibly merged) symbol."""
        if self.obs_codes is None:
            return {o: o for o in self.observations}
        return {c: sym for sym, codes in self.obs_codes.items() for c in codes}

    @property
    def is_complete(self):
        return len(self.transitions) == self.n_states * len(self.observations)


def mm_run(mm, observations):
    """Labels of the initial state and of every state entered afterwards."""
    state = mm.initial
    out = [mm.labels[state]]
    for o in observations:
        state = mm.step(state, o)
        out.append(mm.labels[state])
    return out


def reachable(mm):
    seen = [mm.initial]
    found = {mm.initial}
    queue = deque(seen)
    while queue:
        s = queue.popleft()
        for o in mm.observations:
            t = mm.transitions.get((s, o))
            if t is not None and t not in found:
                found.add(t)
                seen.append(t)
                queue.append(t)
    return seen


# --------------------------------------------------------------------------
# restructuring helpers


def _relabel(mm, order):
    """Keep states in ``order`` (a list of old ids), renumbered 0..k-1."""
    new_id = {old: i for i, old in enumerate(order)}
    trans = {
        (new_id[s], o): new_id[t]
        for (s, o), t in mm.transitions.items()
        if s in new_id and t in new_id
    }
    return replace(
        mm,
        n_states=len(order),
        initial=new_id[mm.initial],
        transitions=trans,
        labels=tuple(mm.labels[s] for s in order),
        free=frozenset(new_id[s] for s in mm.free if s in new_id),
        state_codes=None if mm.state_codes is None else tuple(mm.state_codes[s] for s in order),
    )


def canonical(mm):
    """Drop unreachable states and number the rest in BFS order."""
    mm = replace(mm, observations=tuple(sorted(mm.observations)))
    return _relabel(mm, reachable(mm))


def complete(mm):
    """Fill unwitnessed cells with self-loops."""
    trans = dict(mm.transitions)
    for s in range(mm.n_states):
        for o in mm.observations:
            trans.setdefault((s, o), s)
    return replace(mm, transitions=trans)


def _refine(mm):
    """Coarsest label-respecting partition stable under all transitions."""
    block = list(mm.labels)
    n_blocks = len(set(block))
    while True:
        sigs = {}
        new = []
        for s in range(mm.n_states):
            key = (block[s], tuple(block[mm.transitions[s, o]] for o in mm.observations))
            new.append(sigs.setdefault(key, len(sigs)))
        block = new
        if len(sigs) == n_blocks:
            return block
        n_blocks = len(sigs)


def _quotient(mm, block):
    members = {}
    for s, b in enumerate(block):
        members.setdefault(b, []).append(s)
    n = len(members)
    reps = [members[b][0] for b in range(n)]
    trans = {(b, o): block[mm.transitions[reps[b], o]] for b in range(n) for o in mm.observations}
    labels, free = [], set()
    for b in range(n):
        fixed = [s for s in members[b] if s not in mm.free]
        labels.append(mm.labels[fixed[0]] if fixed else mm.labels[reps[b]])
        if not fixed:
            free.add(b)
    codes = None
    if mm.state_codes is not None:
        codes = tuple(tuple(sorted({c for s in members[b] for c in mm.state_codes[s]})) for b in range(n))
    return replace(
        mm,
        n_states=n,
        initial=block[mm.initial],
        transitions=trans,
        labels=tuple(labels),
        free=frozenset(free),
        state_codes=codes,
    )


def merge_observations(mm):
    """Collapse symbols whose transition columns coincide (complete machines)."""
    groups = {}
    for o in sorted(mm.observations):
        column = tuple(mm.transitions[s, o] for s in range(mm.n_states))
        groups.setdefault(column, []).append(o)
    if len(groups) == len(mm.observations):
        return mm
    rename = {o: members[0] for members in groups.values() for o in members}
    kept = tuple(members[0] for members in groups.values())
    trans = {(s, o): t for (s, o), t in mm.transitions.items() if rename[o] == o}
    codes = mm.obs_codes if mm.obs_codes is not None else {o: (o,) for o in mm.observations}
    merged = {}
    for o in mm.observations:
        merged.setdefault(rename[o], []).extend(codes[o])
    return replace(
        mm,
        observations=kept,
        transitions=trans,
        obs_codes={k: tuple(sorted(set(v))) for k, v in merged.items()},
    )


def _minimize_fixed(mm):
    while True:
        mm = _quotient(mm, _refine(mm))
        merged = merge_observations(mm)
        if len(merged.observations) == len(mm.observations):
            return canonical(mm)
        mm = merged


def minimize(mm):
    """Minimal machine agreeing with ``mm`` on every witnessed input sequence.

    Unwitnessed cells become self-loops first.  State refinement and
    observation merging alternate until neither changes anything.  Labels of
    free states are chosen to give the smallest result (ties: lowest label).
    """
    mm = complete(canonical(mm))
    free = sorted(mm.free)
    if not free:
        return _minimize_fixed(mm)
    candidates = sorted(set(mm.labels))
    if len(candidates) ** len(free) > 256:
        return _minimize_fixed(mm)
    best = None
    for choice in product(candidates, repeat=len(free)):
        labels = list(mm.labels)
        for s, lab in zip(free, choice):
            labels[s] = lab
        out = _minimize_fixed(replace(mm, labels=tuple(labels)))
        key = (out.n_states, len(out.observations), choice)
        if best is None or key < best[0]:
            best = (key, out)
    return best[1]


# --------------------------------------------------------------------------
# equivalence


@dataclass(frozen=True)
class Equivalence:
    equal: bool
    counterexample: tuple = None

    def __bool__(self):
        return self.equal


def equivalent(a, b, max_depth=None, alignment=None):
    """Breadth-first product search for the shortest distinguishing input.

    ``alignment`` maps each common symbol to its ``(a_symbol, b_symbol)``;
    without it both machines must share one alphabet.  Labels of free states
    are ignored.  A cell defined on one side only counts as a difference.
    """
    if alignment is None:
        if set(a.observations) != set(b.observations):
            raise ValueError(
                f"alphabets differ: {sorted(a.observations)} vs {sorted(b.observations)}; pass an alignment"
            )
        alignment = {o: (o, o) for o in sorted(a.observations)}
    for sym, (x, y) in alignment.items():
        if x not in a.observations or y not in b.observations:
            raise ValueError(f"alignment of {sym!r} -> ({x!r}, {y!r}) names an unknown symbol")
    if max_depth is None:
        max_depth = a.n_states * b.n_states
    symbols = sorted(alignment)

    def differ(sa, sb):
        return sa not in a.free and sb not in b.free and a.labels[sa] != b.labels[sb]

    start = (a.initial, b.initial)
    if differ(*start):
        return Equivalence(False, ())
    parent = {start: None}
    queue = deque([(start, 0)])
    while queue:
        pair, depth = queue.popleft()
        if depth >= max_depth:
            continue
        for sym in symbols:
            x, y = alignment[sym]
            ta = a.transitions.get((pair[0], x))
            tb = b.transitions.get((pair[1], y))
            if ta is None and tb is None:
                continue
            if ta is None or tb is None or differ(ta, tb):
                path = [sym]
                node = pair
                while parent[node] is not None:
                    node, s = parent[node]
                    path.append(s)
                return Equivalence(False, tuple(reversed(path)))
            nxt = (ta, tb)
            if nxt not in parent:
                parent[nxt] = (pair, sym)
                queue.append((nxt, depth + 1))
    return Equivalence(True)


# --------------------------------------------------------------------------
# tabulation from traces


class TransitionTable:
    """Witnessed ``(state code, observation code) -> state code`` transitions."""

    def __init__(self):
        self.states = {}
        self.observations = {}
        self.labels = []
        self.cells = {}
        self.targets = set()

    @property
    def shape(self):
        return len(self.states), len(self.observations)

    def state(self, code, label):
        idx = self.states.get(code)
        if idx is None:
            idx = self.states[code] = len(self.states)
            self.labels.append(label)
        elif self.labels[idx] != label:
            raise MooreViolation(f"state {code} emitted both {self.labels[idx]} and {label}")
        return idx

    def observation(self, code):
        idx = self.observations.get(code)
        if idx is None:
            idx = self.observations[code] = len(self.observations)
        return idx

    def witness(self, s, o, t):
        """Record one transition; returns True if the cell was new."""
        counts = self.cells.setdefault((s, o), Counter())
        fresh = not counts
        if counts and t not in counts:
            raise MooreViolation(f"state {s} on observation {o} leads to both {next(iter(counts))} and {t}")
        counts[t] += 1
        self.targets.add(t)
        return fresh

    def successor(self, s, o):
        counts = self.cells.get((s, o))
        return None if not counts else next(iter(counts))

    def to_machine(self, initial, action_names=None):
        state_codes = [None] * len(self.states)
        for code, i in self.states.items():
            state_codes[i] = (code,)
        symbols = {i: code for code, i in self.observations.items()}
        trans = {(s, symbols[o]): self.successor(s, o) for (s, o) in self.cells}
        free = frozenset() if initial in self.targets else frozenset([initial])
        return MooreMachine(
            n_states=len(self.states),
            observations=tuple(symbols[i] for i in range(len(symbols))),
            initial=initial,
            transitions=trans,
            labels=tuple(self.labels),
            free=free,
            action_names=action_names,
            state_codes=tuple(state_codes),
            obs_codes={code: (code,) for code in self.observations},
        )


# --------------------------------------------------------------------------
# rendering and persistence


def _quote(text):
    return '"' + str(text).replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(mm, name="moore"):
    lines = [f"digraph {_quote(name)} {{", "  rankdir=LR;", '  __start [shape=point, label=""];']
    for s in range(mm.n_states):
        lines.append(f"  s{s} [shape=circle, label={_quote(f's{s}: ' + mm.action_name(mm.labels[s]))}];")
    lines.append(f"  __start -> s{mm.initial};")
    for s in range(mm.n_states):
        for o in mm.observations:
            t = mm.transitions.get((s, o))
            if t is not None:
                lines.append(f"  s{s} -> s{t} [label={_quote(o)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_dict(mm):
    return {
        "schema": SCHEMA,
        "n_states": mm.n_states,
        "initial": mm.initial,
        "observations": list(mm.observations),
        "labels": list(mm.labels),
        "free": sorted(mm.free),
        "action_names": None if mm.action_names is None else list(mm.action_names),
        "transitions": sorted([s, o, t] for (s, o), t in mm.transitions.items()),
        "state_codes": None if mm.state_codes is None else [list(c) for c in mm.state_codes],
        "obs_codes": None if mm.obs_codes is None else {k: list(v) for k, v in sorted(mm.obs_codes.items())},
    }


def from_dict(doc):
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"unsupported machine schema {doc.get('schema')!r}")
    return MooreMachine(
        n_states=doc["n_states"],
        observations=tuple(doc["observations"]),
        initial=doc["initial"],
        transitions={(s, o): t for s, o, t in doc["transitions"]},
        labels=tuple(doc["labels"]),
        free=frozenset(doc["free"]),
        action_names=None if doc["action_names"] is None else tuple(doc["action_names"]),
        state_codes=None if doc["state_codes"] is None else tuple(tuple(c) for c in doc["state_codes"]),
        obs_codes=None if doc["obs_codes"] is None else {k: tuple(v) for k, v in doc["obs_codes"].items()},
    )
