"""Parameter initialisation and the two composite layers built on the tape."""

import numpy as np


def init_dense(rng, n_in, n_out, prefix):
    bound = 1.0 / np.sqrt(n_in)
    return {
        f"{prefix}.w": rng.uniform(-bound, bound, size=(n_in, n_out)),
        f"{prefix}.b": rng.uniform(-bound, bound, size=(n_out,)),
    }


def init_gru(rng, n_in, hidden, prefix):
    # gate order in the packed matrices: update z, reset r, candidate n
    bound = 1.0 / np.sqrt(hidden)
    u = lambda *shape: rng.uniform(-bound, bound, size=shape)  # noqa: E731
    return {
        f"{prefix}.w": u(n_in, 3 * hidden),
        f"{prefix}.u_zr": u(hidden, 2 * hidden),
        f"{prefix}.u_n": u(hidden, hidden),
        f"{prefix}.b": u(3 * hidden),
    }


def dense(tp, p, prefix, x):
    return tp.dense(x, p[f"{prefix}.w"], p[f"{prefix}.b"])


def gru(tp, p, prefix, x, h):
    """Update/reset-gate GRU cell: ``h' = (1 - z) * n + z * h``."""
    hidden = h.shape[1]
    xw = tp.dense(x, p[f"{prefix}.w"], p[f"{prefix}.b"])
    zr = tp.sigmoid(tp.add(tp.slice(xw, 0, 2 * hidden), tp.matmul(h, p[f"{prefix}.u_zr"])))
    z = tp.slice(zr, 0, hidden)
    r = tp.slice(zr, hidden, 2 * hidden)
    n = tp.tanh(tp.add(tp.slice(xw, 2 * hidden, 3 * hidden), tp.matmul(tp.mul(r, h), p[f"{prefix}.u_n"])))
    return tp.add(n, tp.mul(z, tp.sub(h, n)))


def bind(tp, params, trainable=True):
    """Put a dict of arrays on the tape as named leaves."""
    make = tp.param if trainable else tp.const
    return {name: make(value, name) for name, value in params.items()}
