"""Numpy building blocks with hand-written backward passes.

Conventions: row-vector inputs (``x @ W + b``), parameters live in plain
``dict[str, np.ndarray]`` and gradients in a dict with the same keys.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

LN_EPS = 1e-12


class NonFiniteLoss(FloatingPointError):
    pass


class DimensionMismatch(ValueError):
    pass


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(p, dp, axis=-1):
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Returns (output, normalized pre-affine values, inverse std)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv


def layer_norm_backward(dy, xhat, inv, gamma):
    """Returns (dx, dgamma, dbeta) with dgamma/dbeta summed over leading axes."""
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    d = xhat.shape[-1]
    dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# LSTM cell, batched, gate order (input, forget, output, candidate)


def lstm_step(x, h_prev, c_prev, Wx, Wh, b, mask=None):
    """One masked LSTM step. Rows with mask 0 keep their previous state."""
    H = h_prev.shape[-1]
    z = x @ Wx + h_prev @ Wh + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    o = sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c_new = f * c_prev + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = mask[:, None]
        h = m * h_new + (1 - m) * h_prev
        c = m * c_new + (1 - m) * c_prev
    else:
        h, c = h_new, c_new
    cache = (x, h_prev, c_prev, i, f, o, g, tc, mask)
    return h, c, cache


def lstm_step_backward(dh, dc, cache, Wx, Wh, grads, prefix):
    """Backprop one step; accumulates into grads[prefix+'Wx'|'Wh'|'b']. Returns (dx, dh_prev, dc_prev)."""
    x, h_prev, c_prev, i, f, o, g, tc, mask = cache
    if mask is not None:
        m = mask[:, None]
        dh_keep, dc_keep = (1 - m) * dh, (1 - m) * dc
        dh, dc = m * dh, m * dc
    else:
        dh_keep = dc_keep = 0.0
    do = dh * tc
    dc = dc + dh * o * (1 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
    grads[prefix + "Wx"] += x.T @ dz
    grads[prefix + "Wh"] += h_prev.T @ dz
    grads[prefix + "b"] += dz.sum(0)
    dx = dz @ Wx.T
    dh_prev = dz @ Wh.T + dh_keep
    dc_prev = dc * f + dc_keep
    return dx, dh_prev, dc_prev


def init_lstm(params, prefix, n_in, n_hidden, rng, dtype):
    scale = 1.0 / math.sqrt(n_hidden)
    params[prefix + "Wx"] = rng.uniform(-scale, scale, (n_in, 4 * n_hidden)).astype(dtype)
    params[prefix + "Wh"] = rng.uniform(-scale, scale, (n_hidden, 4 * n_hidden)).astype(dtype)
    b = np.zeros(4 * n_hidden, dtype=dtype)
    b[n_hidden:2 * n_hidden] = 1.0  # forget-gate bias
    params[prefix + "b"] = b


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0, clip: float | None = 5.0):
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, frozen=()):
        scale = _clip_scale(grads, self.clip, frozen)
        for k, g in grads.items():
            if k in frozen:
                continue
            if self.momentum:
                v = self.velocity.setdefault(k, np.zeros_like(g))
                v *= self.momentum
                v += scale * g
                params[k] -= self.lr * v
            else:
                params[k] -= self.lr * scale * g

    def state(self):
        return {f"velocity/{k}": v for k, v in self.velocity.items()}, {}

    def load_state(self, arrays, meta):
        self.velocity = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("velocity/")}


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, clip: float | None = 5.0):
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, frozen=()):
        self.t += 1
        scale = _clip_scale(grads, self.clip, frozen)
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            if k in frozen:
                continue
            g = g * scale
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        arrays = {f"m/{k}": v for k, v in self.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        return arrays, {"t": self.t}

    def load_state(self, arrays, meta):
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}
        self.t = int(meta.get("t", 0))


def _clip_scale(grads, clip, frozen):
    if not clip:
        return 1.0
    norm = math.sqrt(sum(float((g * g).sum()) for k, g in grads.items() if k not in frozen))
    return min(1.0, clip / (norm + 1e-12))


def make_optimizer(name: str, lr: float, momentum: float = 0.0, clip: float | None = 5.0):
    if name == "sgd":
        return SGD(lr, momentum, clip)
    if name == "adam":
        return Adam(lr, clip=clip)
    raise ValueError(f"unknown optimizer {name!r}")


OPT_PREFIX = "opt:"


def save_checkpoint(path, params, optimizer, meta) -> None:
    """Weights plus optimizer state, so a resumed run continues exactly."""
    blocks = dict(params)
    meta = dict(meta)
    if optimizer is not None:
        arrays, opt_meta = optimizer.state()
        blocks.update({OPT_PREFIX + k: v for k, v in arrays.items()})
        meta["optimizer_state"] = opt_meta
    save_weights(path, blocks, meta)


def load_checkpoint(path):
    """Returns (params, optimizer arrays, meta)."""
    blocks, meta = load_weights(path)
    params = {k: v for k, v in blocks.items() if not k.startswith(OPT_PREFIX)}
    opt = {k[len(OPT_PREFIX):]: v for k, v in blocks.items() if k.startswith(OPT_PREFIX)}
    return params, opt, meta


# ---------------------------------------------------------------------------
# weight files
#
# layout: b"SGVQ" | uint32 version | uint32 header length | header JSON (utf-8)
#         | float64 little-endian blocks, in header["blocks"] order

MAGIC = b"SGVQ"
FORMAT_VERSION = 1


def save_weights(path, params: Mapping[str, np.ndarray], meta: Mapping) -> None:
    path = Path(path)
    blocks = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    header = json.dumps({"meta": meta, "blocks": blocks}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    sidecar = {"version": FORMAT_VERSION, "meta": meta, "blocks": blocks}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_weights(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a weight file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    header = json.loads(data[12:12 + hlen])
    offset = 12 + hlen
    params = {}
    for blk in header["blocks"]:
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(blk["shape"]).copy()
        params[blk["name"]] = arr
        offset += 8 * n
    return params, header["meta"]


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||); two all-zero vectors agree."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def finite_difference_check(loss_fn: Callable[[], float], params: dict[str, np.ndarray],
                            grads: Mapping[str, np.ndarray], blocks: Iterable[str], eps: float,
                            rng, entries_per_block: int = 20) -> dict[str, float]:
    """Central differences on sampled entries of each block.

    Returns the norm-wise relative error per block, so isolated entries whose
    true gradient sits at the finite-difference noise level do not dominate.
    """
    out = {}
    for name in blocks:
        flat = params[name].reshape(-1)
        idx = rng.choice(flat.size, size=min(flat.size, entries_per_block), replace=False)
        numeric = np.empty(len(idx))
        for k, j in enumerate(idx):
            old = flat[j]
            flat[j] = old + eps
            lp = loss_fn()
            flat[j] = old - eps
            lm = loss_fn()
            flat[j] = old
            numeric[k] = (lp - lm) / (2 * eps)
        out[name] = relative_error(np.asarray(grads[name]).reshape(-1)[idx], numeric)
    return out
