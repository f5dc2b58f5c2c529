"""Recurrent policies: optional dense feature layer, GRU memory, softmax head.

At each step ``f_t = features(o_t)``, ``h_{t+1} = gru(f_t, h_t)`` and the action
distribution is ``softmax(head(h_{t+1}))``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import layers
from . import rng as rngs
from .autodiff import AdamState, NonFiniteError, ShapeError, Tape, adam_step

log = logging.getLogger(__name__)


class TrainingFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyArch:
    obs_dim: int
    action_count: int
    hidden_size: int
    feature_width: int = None  # None: the observation is the feature

    @property
    def feature_dim(self):
        return self.obs_dim if self.feature_width is None else self.feature_width


def mce_arch(mode_count=4):
    return PolicyArch(obs_dim=1, action_count=mode_count, hidden_size=8, feature_width=4)


def tomita_arch():
    return PolicyArch(obs_dim=2, action_count=2, hidden_size=10)


@dataclass
class PolicyNet:
    arch: PolicyArch
    params: dict

    @classmethod
    def init(cls, arch, rng):
        p = {}
        if arch.feature_width is not None:
            p.update(layers.init_dense(rng, arch.obs_dim, arch.feature_width, "feat"))
        p.update(layers.init_gru(rng, arch.feature_dim, arch.hidden_size, "gru"))
        p.update(layers.init_dense(rng, arch.hidden_size, arch.action_count, "head"))
        return cls(arch, p)

    def initial_state(self, batch=1):
        return np.zeros((batch, self.arch.hidden_size))


# -- tape-level pieces shared with the MMN ---------------------------------


def features(tp, p, arch, obs):
    if arch.feature_width is None:
        return obs
    return tp.relu6(layers.dense(tp, p, "feat", obs))


def transition(tp, p, f, h):
    return layers.gru(tp, p, "gru", f, h)


def logits(tp, p, h):
    return layers.dense(tp, p, "head", h)


def _check_dims(arch, obs, h):
    if obs.ndim != 2 or obs.shape[1] != arch.obs_dim:
        raise ShapeError(f"rnn_step: observation shape {obs.shape}, expected (batch, {arch.obs_dim})")
    if h.shape != (obs.shape[0], arch.hidden_size):
        raise ShapeError(f"rnn_step: hidden shape {h.shape}, expected ({obs.shape[0]}, {arch.hidden_size})")


def rnn_step(net, obs, h):
    """One inference step on a batch: returns ``(f, h_next, dist)``."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    h = np.atleast_2d(np.asarray(h, dtype=float))
    _check_dims(net.arch, obs, h)
    tp = Tape(record=False)
    p = layers.bind(tp, net.params, trainable=False)
    f = features(tp, p, net.arch, tp.const(obs))
    h_next = transition(tp, p, f, tp.const(h))
    dist = tp.softmax(logits(tp, p, h_next))
    return f.data, h_next.data, dist.data


# -- batching helpers --------------------------------------------------------


def pad_batch(episodes, obs_dim):
    """Stack episodes into ``(B, T, d)`` observations, ``(B, T)`` targets and mask."""
    t_max = max(len(e.actions) for e in episodes)
    obs = np.zeros((len(episodes), t_max, obs_dim))
    acts = np.zeros((len(episodes), t_max), dtype=int)
    mask = np.zeros((len(episodes), t_max))
    for i, e in enumerate(episodes):
        n = len(e.actions)
        obs[i, :n] = e.observations
        acts[i, :n] = e.actions
        mask[i, :n] = 1.0
    return obs, acts, mask


def unroll(net, obs):
    """Inference over padded ``(B, T, d)`` observations.

    Returns features ``(B, T, F)``, hidden states ``(B, T+1, H)`` and action
    distributions ``(B, T, A)``.
    """
    b, t_len, _ = obs.shape
    tp = Tape(record=False)
    p = layers.bind(tp, net.params, trainable=False)
    h = tp.const(net.initial_state(b))
    fs, hs, ds = [], [h.data], []
    for t in range(t_len):
        f = features(tp, p, net.arch, tp.const(obs[:, t]))
        h = transition(tp, p, f, h)
        fs.append(f.data)
        hs.append(h.data)
        ds.append(tp.softmax(logits(tp, p, h)).data)
    return np.stack(fs, 1), np.stack(hs, 1), np.stack(ds, 1)


def greedy(dists):
    return np.argmax(dists, axis=-1)


# -- imitation ---------------------------------------------------------------


@dataclass
class ImitationConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    train_episodes: int = 1000
    test_episodes: int = 100
    settle_epochs: int = 3  # consecutive perfect epochs before stopping
    target_loss: float = 0.0  # once perfect, also wait for the loss to drop below this
    lr_decay: float = 1.0  # per-epoch multiplier
    min_lr: float = 1e-5


def sequence_loss(tp, p, arch, obs, targets, mask):
    """Mean per-step cross-entropy of a padded batch under teacher forcing.

    ``targets`` is ``(B, T, A)``: one-hot labels or teacher distributions.
    """
    b, t_len, _ = obs.shape
    h = tp.const(np.zeros((b, arch.hidden_size)))
    outs = []
    for t in range(t_len):
        f = features(tp, p, arch, tp.const(obs[:, t]))
        h = transition(tp, p, f, h)
        outs.append(logits(tp, p, h))
    stacked = tp.concat(*outs, axis=0)
    flat_targets = tp.const(targets.transpose(1, 0, 2).reshape(t_len * b, -1))
    return tp.cross_entropy(stacked, flat_targets, mask.T.reshape(-1))


def step_accuracy(net, episodes):
    obs, acts, mask = pad_batch(episodes, net.arch.obs_dim)
    _, _, dists = unroll(net, obs)
    hit = (greedy(dists) == acts) * mask
    return float(hit.sum() / mask.sum())


@dataclass
class TrainMetrics:
    train_accuracy: float
    test_accuracy: float
    test_score: float
    epochs: int
    final_loss: float
    history: list = field(default_factory=list)


def imitation_train(net, env, cfg, seed):
    """Fit the policy to the environment's optimal actions, step by step."""
    arch = net.arch
    train = env.episodes(seed, "imitation-train", cfg.train_episodes)
    test = env.episodes(seed, "imitation-test", cfg.test_episodes)
    order_rng = rngs.stream(seed, "imitation-order")
    params = {k: v.copy() for k, v in net.params.items()}
    state = AdamState(lr=cfg.lr)
    best, stale, perfect, history = (-1.0, np.inf), 0, 0, []
    eye = np.eye(arch.action_count)
    for epoch in range(1, cfg.max_epochs + 1):
        order = order_rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            obs, acts, mask = pad_batch(batch, arch.obs_dim)
            tp = Tape()
            p = layers.bind(tp, params)
            try:
                loss = sequence_loss(tp, p, arch, obs, eye[acts], mask)
                params, state = adam_step(params, tp.backward(loss), state)
            except NonFiniteError as exc:
                raise TrainingFailed(f"imitation diverged in epoch {epoch}: {exc}") from exc
            losses.append(float(loss.data))
        state.lr = max(cfg.min_lr, state.lr * cfg.lr_decay)
        net = PolicyNet(arch, params)
        acc = step_accuracy(net, train)
        history.append((epoch, float(np.mean(losses)), acc))
        log.info("imitation epoch %d loss %.5f train acc %.5f", epoch, np.mean(losses), acc)
        loss_now = history[-1][1]
        perfect = perfect + 1 if acc == 1.0 else 0
        if perfect >= cfg.settle_epochs and loss_now <= cfg.target_loss:
            break
        if acc > best[0] or (acc == best[0] and loss_now < best[1] * 0.99):
            best, stale = (acc, loss_now), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    metrics = TrainMetrics(
        train_accuracy=acc,
        test_accuracy=step_accuracy(net, test),
        test_score=evaluate(net, env, test).score,
        epochs=epoch,
        final_loss=history[-1][1],
        history=history,
    )
    return net, metrics


# -- rollouts ----------------------------------------------------------------


@dataclass
class RolloutDataset:
    observations: list  # per episode (T, d)
    features: list  # (T, F)
    hidden: list  # (T+1, H), hidden[0] is h_0
    dists: list  # (T, A)
    actions: list  # (T,)
    policy_id: str = ""
    seed: int = 0
    epsilon: float = 0.0

    def __len__(self):
        return len(self.actions)

    @property
    def n_records(self):
        return sum(len(a) for a in self.actions)

    def all_features(self):
        return np.concatenate(self.features)

    def all_hidden(self):
        return np.concatenate(self.hidden)


def collect_rollouts(net, env, episodes, epsilon, seed, policy_id="", chunk=500):
    """Run the policy on fresh episodes, recording every step.

    With probability ``epsilon`` the recorded action is uniform instead of
    greedy.  Episodes come from per-index streams, so results do not depend on
    chunking.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    data = RolloutDataset([], [], [], [], [], policy_id, seed, epsilon)
    for start in range(0, episodes, chunk):
        eps = env.episodes(seed, "rollout", min(chunk, episodes - start), start)
        obs, _, _ = pad_batch(eps, net.arch.obs_dim)
        f, h, d = unroll(net, obs)
        for i, e in enumerate(eps):
            n = len(e.actions)
            acts = greedy(d[i, :n])
            if epsilon > 0:
                r = rngs.stream(seed, "epsilon", start + i)
                explore = r.random(n) < epsilon
                acts = np.where(explore, r.integers(net.arch.action_count, size=n), acts)
            data.observations.append(e.observations)
            data.features.append(f[i, :n])
            data.hidden.append(h[i, : n + 1])
            data.dists.append(d[i, :n])
            data.actions.append(acts)
    return data


# -- evaluation --------------------------------------------------------------


@dataclass
class Evaluation:
    score: float
    episodes: int
    failures: int = 0  # episodes aborted on an unwitnessed machine transition


def policy_actions(net, episodes):
    obs, _, _ = pad_batch(episodes, net.arch.obs_dim)
    _, _, d = unroll(net, obs)
    return [greedy(d[i, : len(e.actions)]) for i, e in enumerate(episodes)]


def evaluate(actor, env, episodes, seed=0):
    """Mean episode score; ``episodes`` is a count (fresh test stream) or a list."""
    if isinstance(episodes, int):
        episodes = env.episodes(seed, "evaluate", episodes)
    runs = actor_actions(actor, episodes)
    total, failures = 0.0, 0
    for e, acts in zip(episodes, runs):
        if acts is None:
            failures += 1
            continue
        total += env.score(e, acts)
    return Evaluation(total / len(episodes), len(episodes), failures)


def actor_actions(actor, episodes):
    if isinstance(actor, PolicyNet):
        return policy_actions(actor, episodes)
    return actor.actions(episodes)
