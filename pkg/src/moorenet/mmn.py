"""Moore machine networks: a policy with QBNs spliced into its wires.

``b_f`` sits between the feature layer and the GRU input, ``b_h`` closes the
recurrent loop: after every transition the new hidden state is encoded,
quantized and decoded before it is used by the head and by the next step.
The ternary codes are therefore the network's discrete observations and
states.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import layers
from . import rng as rngs
from .autodiff import AdamState, NonFiniteError, ShapeError, Tape, adam_step
from .policy import PolicyNet, TrainingFailed, evaluate, features, greedy, logits, pad_batch, transition
from .qbn import Qbn, code_key

log = logging.getLogger(__name__)


@dataclass
class MooreMachineNetwork:
    policy: PolicyNet
    qbn_h: Qbn
    qbn_f: Qbn = None

    @property
    def arch(self):
        return self.policy.arch

    def flat_params(self):
        out = {f"policy/{k}": v for k, v in self.policy.params.items()}
        out.update({f"bh/{k}": v for k, v in self.qbn_h.params.items()})
        if self.qbn_f is not None:
            out.update({f"bf/{k}": v for k, v in self.qbn_f.params.items()})
        return out

    def with_params(self, flat):
        def part(prefix):
            n = len(prefix) + 1
            return {k[n:]: v for k, v in flat.items() if k.startswith(prefix + "/")}

        return MooreMachineNetwork(
            PolicyNet(self.arch, part("policy")),
            Qbn(self.qbn_h.config, part("bh")),
            None if self.qbn_f is None else Qbn(self.qbn_f.config, part("bf")),
        )

    def actions(self, episodes):
        obs, _, _ = pad_batch(episodes, self.arch.obs_dim)
        run = mmn_unroll(self, obs)
        return [greedy(run.dists[i, : len(e.actions)]) for i, e in enumerate(episodes)]


def insert(net, qbn_h, qbn_f=None):
    """Splice the QBNs into ``net``; no parameter is changed."""
    if qbn_h.config.input_dim != net.arch.hidden_size:
        raise ShapeError(f"insert: b_h expects width {qbn_h.config.input_dim}, hidden size is {net.arch.hidden_size}")
    if qbn_f is not None and qbn_f.config.input_dim != net.arch.feature_dim:
        raise ShapeError(f"insert: b_f expects width {qbn_f.config.input_dim}, features are {net.arch.feature_dim}")
    return MooreMachineNetwork(net, qbn_h, qbn_f)


class _Bound:
    """Parameters of an MMN bound on one tape."""

    def __init__(self, tp, mmn, trainable):
        flat = layers.bind(tp, mmn.flat_params(), trainable)
        self.policy = {k[7:]: v for k, v in flat.items() if k.startswith("policy/")}
        self.bh = {k[3:]: v for k, v in flat.items() if k.startswith("bh/")}
        self.bf = {k[3:]: v for k, v in flat.items() if k.startswith("bf/")}
        self.mmn = mmn

    def initial(self, tp, batch):
        """Code and decoded value of the quantized zero state."""
        h0 = tp.const(np.zeros((batch, self.mmn.arch.hidden_size)))
        return self.mmn.qbn_h.apply(tp, self.bh, h0)

    def step(self, tp, obs, h_hat):
        m = self.mmn
        f = features(tp, self.policy, m.arch, obs)
        f_code = None
        if m.qbn_f is not None:
            f_code, f = m.qbn_f.apply(tp, self.bf, f)
        h_raw = transition(tp, self.policy, f, h_hat)
        h_code, h_hat = m.qbn_h.apply(tp, self.bh, h_raw)
        return f_code, h_raw, h_code, h_hat, logits(tp, self.policy, h_hat)


def mmn_step(mmn, obs, h):
    """One step from decoded state ``h``: ``(f_code, h_next, h_code, dist)``.

    ``f_code`` is None when there is no feature bottleneck.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    h = np.atleast_2d(np.asarray(h, dtype=float))
    if obs.shape[1] != mmn.arch.obs_dim or h.shape != (obs.shape[0], mmn.arch.hidden_size):
        raise ShapeError(f"mmn_step: got obs {obs.shape} and state {h.shape}")
    tp = Tape(record=False)
    b = _Bound(tp, mmn, False)
    f_code, _, h_code, h_hat, lg = b.step(tp, tp.const(obs), tp.const(h))
    return (
        None if f_code is None else f_code.data,
        h_hat.data,
        h_code.data,
        tp.softmax(lg).data,
    )


def mmn_initial(mmn, batch=1):
    """``(code, decoded state)`` the MMN starts from."""
    tp = Tape(record=False)
    code, h_hat = _Bound(tp, mmn, False).initial(tp, batch)
    return code.data, h_hat.data


@dataclass
class MmnRun:
    f_codes: np.ndarray  # (B, T, B_f) or None
    h_codes: np.ndarray  # (B, T+1, B_h), index 0 is the initial code
    h_hats: np.ndarray  # (B, T+1, H)
    dists: np.ndarray  # (B, T, A)


def mmn_unroll(mmn, obs):
    b, t_len, _ = obs.shape
    tp = Tape(record=False)
    bound = _Bound(tp, mmn, False)
    code, h_hat = bound.initial(tp, b)
    fcs, hcs, hhs, ds = [], [code.data], [h_hat.data], []
    for t in range(t_len):
        f_code, _, code, h_hat, lg = bound.step(tp, tp.const(obs[:, t]), h_hat)
        if f_code is not None:
            fcs.append(f_code.data)
        hcs.append(code.data)
        hhs.append(h_hat.data)
        ds.append(tp.softmax(lg).data)
    return MmnRun(
        np.stack(fcs, 1) if fcs else None,
        np.stack(hcs, 1),
        np.stack(hhs, 1),
        np.stack(ds, 1),
    )


def raw_observation_key(row):
    row = np.asarray(row)
    if np.all((row == 0) | (row == 1)) and row.sum() == 1:
        return str(int(np.argmax(row)))
    return ",".join(repr(float(v)) for v in row)


def observation_keys(mmn, obs_rows, f_codes=None):
    """Symbol for each observation: its b_f code, or the raw symbol without b_f."""
    if mmn.qbn_f is None:
        return [raw_observation_key(r) for r in np.atleast_2d(obs_rows)]
    if f_codes is None:
        tp = Tape(record=False)
        bound = _Bound(tp, mmn, False)
        f = features(tp, bound.policy, mmn.arch, tp.const(np.atleast_2d(obs_rows)))
        f_codes, _ = mmn.qbn_f.apply(tp, bound.bf, f)
        f_codes = f_codes.data
    return [code_key(c) for c in f_codes]


# -- fine-tuning -------------------------------------------------------------


@dataclass
class FineTuneConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 20
    rollout_episodes: int = 500
    eval_episodes: int = 50


@dataclass
class FineTuneMetrics:
    teacher_score: float
    pre_score: float
    post_score: float
    epochs: int
    history: list = field(default_factory=list)


def distribution_loss(tp, bound, obs, targets, mask):
    b, t_len, _ = obs.shape
    _, h_hat = bound.initial(tp, b)
    outs = []
    for t in range(t_len):
        *_, h_hat, lg = bound.step(tp, tp.const(obs[:, t]), h_hat)
        outs.append(lg)
    stacked = tp.concat(*outs, axis=0)
    flat = tp.const(targets.transpose(1, 0, 2).reshape(t_len * b, -1))
    return tp.cross_entropy(stacked, flat, mask.T.reshape(-1))


def _pad_targets(dists, t_max):
    out = np.zeros((len(dists), t_max, dists[0].shape[1]))
    for i, d in enumerate(dists):
        out[i, : len(d)] = d
    return out


def fine_tune(mmn, rollouts, env, cfg, seed, teacher=None):
    """Train every MMN parameter to reproduce the teacher's action distributions.

    ``rollouts`` were recorded from the teacher; its distributions are fixed
    targets.  Stops once the MMN's score on held-out episodes reaches the
    teacher's, or after ``patience`` epochs without improvement.  Returns the
    best-scoring parameters seen.
    """
    eval_eps = env.episodes(seed, "fine-tune-eval", cfg.eval_episodes)
    teacher_score = evaluate(teacher or mmn.policy, env, eval_eps).score
    pre = evaluate(mmn, env, eval_eps).score
    best_score, best = pre, mmn
    history = [(0, None, pre)]
    r = rngs.stream(seed, "fine-tune-order")
    params = mmn.flat_params()
    state = AdamState(lr=cfg.lr)
    stale, epoch = 0, 0
    episodes = [type("E", (), {"observations": o, "actions": a}) for o, a in zip(rollouts.observations, rollouts.actions)]
    while best_score < teacher_score and epoch < cfg.max_epochs and stale < cfg.patience:
        epoch += 1
        order = r.permutation(len(episodes))
        losses = []
        for start in range(0, len(episodes), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            obs, _, mask = pad_batch([episodes[i] for i in idx], mmn.arch.obs_dim)
            targets = _pad_targets([rollouts.dists[i] for i in idx], obs.shape[1])
            tp = Tape()
            bound = _Bound(tp, mmn.with_params(params), True)
            try:
                loss = distribution_loss(tp, bound, obs, targets, mask)
                params, state = adam_step(params, tp.backward(loss), state)
            except NonFiniteError as exc:
                raise TrainingFailed(f"fine-tuning diverged in epoch {epoch}: {exc}") from exc
            losses.append(float(loss.data))
        current = mmn.with_params(params)
        score = evaluate(current, env, eval_eps).score
        history.append((epoch, float(np.mean(losses)), score))
        log.info("fine-tune epoch %d loss %.5f score %.3f", epoch, np.mean(losses), score)
        if score > best_score:
            best_score, best, stale = score, current, 0
        else:
            stale += 1
    return best, FineTuneMetrics(teacher_score, pre, best_score, epoch, history)
