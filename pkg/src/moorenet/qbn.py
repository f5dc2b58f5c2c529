"""Quantized bottleneck networks: autoencoders with a ternary latent layer.

``b(x) = D(quantize(phi(E(x))))`` where ``phi(x) = 1.5 tanh(x) + 0.5 tanh(-3x)``
is flat around zero so the encoder can settle on the 0 level.  Training uses
the straight-through estimator built into the tape's ``quantize``.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import layers
from . import rng as rngs
from .autodiff import AdamState, NonFiniteError, ShapeError, Tape, adam_step
from .policy import TrainingFailed

log = logging.getLogger(__name__)

LEVELS = 3
_CHARS = {-1: "-", 0: "0", 1: "+"}


def phi(x):
    x = np.asarray(x, dtype=float)
    return 1.5 * np.tanh(x) + 0.5 * np.tanh(-3.0 * x)


def quantize(x):
    """Nearest level in {-1, 0, +1}; |x| = 0.5 maps to 0."""
    x = np.asarray(x, dtype=float)
    return np.where(x > 0.5, 1.0, np.where(x < -0.5, -1.0, 0.0))


def code_key(code):
    return "".join(_CHARS[int(v)] for v in code)


def key_code(key):
    inv = {c: v for v, c in _CHARS.items()}
    return np.array([inv[c] for c in key], dtype=float)


@dataclass(frozen=True)
class QbnConfig:
    input_dim: int
    bottleneck: int
    encoder_widths: tuple = None  # default: one layer of 4 * bottleneck
    output_activation: str = "linear"  # linear | relu6 | tanh
    levels: int = LEVELS

    def __post_init__(self):
        if self.levels != LEVELS:
            raise ValueError("only ternary quantization is supported")
        if self.input_dim < 1 or self.bottleneck < 1:
            raise ValueError("input_dim and bottleneck must be positive")
        if self.output_activation not in ("linear", "relu6", "tanh"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.encoder_widths is None:
            object.__setattr__(self, "encoder_widths", (4 * self.bottleneck,))
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))


def ladder_config(input_dim, bottleneck, output_activation="linear"):
    """Three-layer encoder ``8B, 4B`` then ``B`` with a mirrored decoder."""
    return QbnConfig(input_dim, bottleneck, (8 * bottleneck, 4 * bottleneck), output_activation)


@dataclass
class Qbn:
    config: QbnConfig
    params: dict

    @classmethod
    def init(cls, config, rng):
        p = {}
        dims = [config.input_dim, *config.encoder_widths, config.bottleneck]
        for i in range(len(dims) - 1):
            p.update(layers.init_dense(rng, dims[i], dims[i + 1], f"enc{i}"))
        dims = dims[::-1]
        for i in range(len(dims) - 1):
            p.update(layers.init_dense(rng, dims[i], dims[i + 1], f"dec{i}"))
        return cls(config, p)

    @property
    def depth(self):
        return len(self.config.encoder_widths) + 1

    def apply(self, tp, p, x):
        """``(code, reconstruction)`` with ``p`` the params bound on ``tp``."""
        return bottleneck(tp, p, self.config, x)


def encode(tp, p, cfg, x):
    """Encoder up to (and including) the phi activation, before quantization."""
    depth = len(cfg.encoder_widths) + 1
    for i in range(depth - 1):
        x = tp.tanh(layers.dense(tp, p, f"enc{i}", x))
    return tp.phi(layers.dense(tp, p, f"enc{depth - 1}", x))


def decode(tp, p, cfg, code):
    depth = len(cfg.encoder_widths) + 1
    x = code
    for i in range(depth - 1):
        x = tp.tanh(layers.dense(tp, p, f"dec{i}", x))
    x = layers.dense(tp, p, f"dec{depth - 1}", x)
    if cfg.output_activation == "relu6":
        return tp.relu6(x)
    if cfg.output_activation == "tanh":
        return tp.tanh(x)
    return x


def bottleneck(tp, p, cfg, x):
    """Returns ``(code, reconstruction)`` tensors."""
    code = tp.quantize(encode(tp, p, cfg, x))
    return code, decode(tp, p, cfg, code)


def _rows(q, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != q.config.input_dim:
        raise ShapeError(f"qbn: input width {x.shape[1]}, expected {q.config.input_dim}")
    return x


def qbn_forward(q, x):
    x = _rows(q, x)
    tp = Tape(record=False)
    p = layers.bind(tp, q.params, trainable=False)
    code, recon = bottleneck(tp, p, q.config, tp.const(x))
    return code.data, recon.data


def encode_codes(q, x):
    return qbn_forward(q, x)[0]


def decode_codes(q, codes):
    codes = np.atleast_2d(np.asarray(codes, dtype=float))
    if codes.shape[1] != q.config.bottleneck:
        raise ShapeError(f"qbn: code width {codes.shape[1]}, expected {q.config.bottleneck}")
    tp = Tape(record=False)
    p = layers.bind(tp, q.params, trainable=False)
    return decode(tp, p, q.config, tp.const(codes)).data


def reconstruction_mse(q, x):
    _, recon = qbn_forward(q, x)
    d = _rows(q, x) - recon
    return float((d * d).sum() / d.shape[0])


@dataclass
class QbnTrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 400
    patience: int = 15
    min_rel_improvement: float = 1e-4
    holdout_fraction: float = 0.1


@dataclass
class QbnMetrics:
    train_mse: float
    holdout_mse: float
    epochs: int
    code_histogram: dict = field(default_factory=dict)


def qbn_train(q, data, cfg, seed, tag="qbn"):
    """Minimise mean squared reconstruction error until the loss saturates."""
    data = _rows(q, data)
    if len(data) == 0:
        raise ValueError("qbn_train: empty dataset")
    r = rngs.stream(seed, tag)
    perm = r.permutation(len(data))
    n_hold = int(len(data) * cfg.holdout_fraction)
    hold, train = data[perm[:n_hold]], data[perm[n_hold:]]
    params = {k: v.copy() for k, v in q.params.items()}
    state = AdamState(lr=cfg.lr)
    best, stale = np.inf, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = r.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            x = train[order[start : start + cfg.batch_size]]
            tp = Tape()
            p = layers.bind(tp, params)
            try:
                _, recon = bottleneck(tp, p, q.config, tp.const(x))
                loss = tp.sq_error(recon, tp.const(x))
                params, state = adam_step(params, tp.backward(loss), state)
            except NonFiniteError as exc:
                raise TrainingFailed(f"qbn training diverged in epoch {epoch}: {exc}") from exc
        q = Qbn(q.config, params)
        mse = reconstruction_mse(q, train)
        log.info("qbn epoch %d mse %.6g", epoch, mse)
        if mse < best * (1 - cfg.min_rel_improvement):
            best, stale = mse, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    codes = encode_codes(q, data)
    hist = Counter(code_key(c) for c in codes)
    metrics = QbnMetrics(
        train_mse=reconstruction_mse(q, train),
        holdout_mse=reconstruction_mse(q, hold) if n_hold else float("nan"),
        epochs=epoch,
        code_histogram=dict(sorted(hist.items())),
    )
    return q, metrics
