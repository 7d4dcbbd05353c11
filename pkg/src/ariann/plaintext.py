"""Plaintext reference paths: float MLP and its fixed-point mirror.

The fixed-point mirror runs the same operation sequence as the private
engine (ring arithmetic, rescale after every multiply, mask-style ReLU) but
on local values, so private-vs-fixed comparisons isolate the cost of secret
sharing itself, and fixed-vs-float comparisons isolate quantization.
"""

from __future__ import annotations

import numpy as np

from .ring import RingTensor, ring_mask
from .sharing import SCALE_BASE, decode_fixed, encode_fixed


def mlp_init(sizes: list, rng: np.random.Generator) -> list:
    """Uniform He-style init; shared by the float, fixed, and private paths."""
    params = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        params.append((w, b))
    return params


# ---------------------------------------------------------------------------
# Float path
# ---------------------------------------------------------------------------

def float_forward(params: list, x: np.ndarray) -> np.ndarray:
    out = x
    for i, (w, b) in enumerate(params):
        out = out @ w.T + b
        if i < len(params) - 1:
            out = np.maximum(out, 0.0)
    return out


def float_train(params: list, x: np.ndarray, y: np.ndarray, epochs: int,
                lr: float, momentum: float = 0.0, batch_size: int = 0) -> list:
    params = [(w.copy(), b.copy()) for w, b in params]
    vels = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    n = x.shape[0]
    bs = batch_size or n
    for _ in range(epochs):
        for start in range(0, n, bs):
            xb, yb = x[start:start + bs], y[start:start + bs]
            acts = [xb]
            masks = []
            out = xb
            for i, (w, b) in enumerate(params):
                out = out @ w.T + b
                if i < len(params) - 1:
                    masks.append(out >= 0)
                    out = np.maximum(out, 0.0)
                acts.append(out)
            g = 2.0 * (out - yb) / out.size
            for i in range(len(params) - 1, -1, -1):
                w, b = params[i]
                dw = g.T @ acts[i]  # acts[i] is the layer input (post-ReLU)
                db = g.sum(axis=0)
                if i > 0:
                    g = (g @ w) * masks[i - 1]
                vw, vb = vels[i]
                vw = momentum * vw + dw
                vb = momentum * vb + db
                vels[i] = (vw, vb)
                params[i] = (w - lr * vw, b - lr * vb)
    return params


# ---------------------------------------------------------------------------
# Fixed-point mirror
# ---------------------------------------------------------------------------

def _trunc(v: RingTensor, digits: int) -> RingTensor:
    """Exact signed rescale by 10^-digits (floor toward -inf)."""
    signed = v.signed()
    out = np.floor_divide(signed, SCALE_BASE ** digits)
    return RingTensor.from_ints(out, v.n_bits)


def fixed_encode_params(params: list, precision: int, n_bits: int) -> list:
    return [(encode_fixed(w, precision, n_bits), encode_fixed(b, precision, n_bits))
            for w, b in params]


def fixed_forward(params_fx: list, x_fx: RingTensor, precision: int) -> RingTensor:
    out = x_fx
    last = len(params_fx) - 1
    for i, (w, b) in enumerate(params_fx):
        wt = RingTensor(w.data.T.copy(), w.n_bits, _trusted=True)
        out = _trunc(out.matmul(wt), precision) + RingTensor(
            np.broadcast_to(b.data, (out.shape[0], b.shape[0])).copy(), b.n_bits,
            _trusted=True)
        if i < last:
            mask = (out.signed() >= 0).astype(np.uint64)
            out = RingTensor(out.data * mask & ring_mask(out.n_bits),
                             out.n_bits, _trusted=True)
    return out


def fixed_train(params: list, x: np.ndarray, y: np.ndarray, epochs: int,
                lr: float, momentum: float, precision: int, n_bits: int,
                batch_size: int = 0) -> list:
    """Fixed-point training mirroring the private op-for-op schedule."""
    p = precision
    pf = fixed_encode_params(params, p, n_bits)
    x_fx = encode_fixed(x, p, n_bits)
    y_fx = encode_fixed(y, p, n_bits)
    vels = [(RingTensor.zeros(w.shape, n_bits), RingTensor.zeros(b.shape, n_bits))
            for w, b in pf]
    n = x.shape[0]
    bs = batch_size or n
    last = len(pf) - 1

    def crop(t, start, stop):
        return RingTensor(t.data[start:stop], t.n_bits, _trusted=True)

    for _ in range(epochs):
        for start in range(0, n, bs):
            xb, yb = crop(x_fx, start, start + bs), crop(y_fx, start, start + bs)
            acts, masks = [xb], []
            out = xb
            for i, (w, b) in enumerate(pf):
                wt = RingTensor(w.data.T.copy(), n_bits, _trusted=True)
                out = _trunc(out.matmul(wt), p) + RingTensor(
                    np.broadcast_to(b.data, (out.shape[0], b.shape[0])).copy(),
                    n_bits, _trusted=True)
                if i < last:
                    mask = (out.signed() >= 0).astype(np.uint64)
                    masks.append(mask)
                    out = RingTensor(out.data * mask & ring_mask(n_bits),
                                     n_bits, _trusted=True)
                acts.append(out)

            scale = int(np.floor(2.0 / out.size * SCALE_BASE ** p))
            g = _trunc((acts[-1] - yb) * scale, p)
            for i in range(last, -1, -1):
                w, b = pf[i]
                gt = RingTensor(g.data.T.copy(), n_bits, _trusted=True)
                dw = _trunc(gt.matmul(acts[i]), p)
                db = g.sum(axis=0)
                if i > 0:
                    g = _trunc(g.matmul(w), p)
                    g = RingTensor(g.data * masks[i - 1] & ring_mask(n_bits),
                                   n_bits, _trusted=True)
                vw, vb = vels[i]
                mu = int(np.floor(momentum * SCALE_BASE ** p))
                if momentum:
                    vw = _trunc(vw * mu, p) + dw
                    vb = _trunc(vb * mu, p) + db
                else:
                    vw, vb = dw, db
                vels[i] = (vw, vb)
                lr_fx = int(np.floor(lr * SCALE_BASE ** p))
                pf[i] = (w - _trunc(vw * lr_fx, p), b - _trunc(vb * lr_fx, p))
    return pf


def fixed_decode_params(params_fx: list, precision: int) -> list:
    return [(decode_fixed(w, precision), decode_fixed(b, precision))
            for w, b in params_fx]


# ---------------------------------------------------------------------------
# Desk-scale synthetic tasks
# ---------------------------------------------------------------------------

def xor_dataset():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([[0.0], [1.0], [1.0], [0.0]])
    return x, y


def moons_dataset(n: int, rng: np.random.Generator, noise: float = 0.1):
    """Two interleaved half circles, labels in {0, 1}."""
    half = n // 2
    t = rng.uniform(0, np.pi, half)
    x0 = np.stack([np.cos(t), np.sin(t)], axis=1)
    x1 = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.concatenate([x0, x1]) + rng.normal(0, noise, (2 * half, 2))
    y = np.concatenate([np.zeros((half, 1)), np.ones((half, 1))])
    order = rng.permutation(2 * half)
    return x[order], y[order]


def blobs_dataset(n: int, classes: int, dim: int, rng: np.random.Generator,
                  spread: float = 0.35):
    """Gaussian clusters; targets are one-hot rows."""
    centers = rng.uniform(-2.0, 2.0, size=(classes, dim))
    labels = rng.integers(0, classes, size=n)
    x = centers[labels] + rng.normal(0, spread, (n, dim))
    y = np.eye(classes)[labels]
    return x, y, labels
