"""Private training: forward/backward over Linear, Conv2d, ReLU with MSE loss
and SGD(+momentum), entirely on shares.

Parameters, activations, and gradients stay additively shared end to end; the
only values ever opened are the optional per-epoch loss telemetry (behind an
explicit config flag) and whatever the test harness reconstructs itself. The
forward pass records the intermediates backward needs on a single-use tape.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import beaver, nn_ops
from .beaver import (ConvGeometry, OP_CONV2D_GRAD_INPUT,
                     OP_CONV2D_GRAD_KERNEL, beaver_protocol, matmul_protocol,
                     mul_protocol)
from .dealer import PartyPrep
from .ring import RingTensor
from .sharing import (AdditiveShare, allow_reconstruction, encode_fixed,
                      forbid_reconstruction, reveal, share, truncate)


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.0
    epochs: int = 1
    batch_size: int = 0          # 0 = full batch
    allow_loss_reveal: bool = False


class StaleTapeError(RuntimeError):
    """A forward tape may drive exactly one backward pass."""


@dataclass
class Tape:
    entries: list = field(default_factory=list)
    consumed: bool = False

    def push(self, saved):
        self.entries.append(saved)

    def pop_all(self) -> list:
        if self.consumed:
            raise StaleTapeError("tape already consumed by a backward pass")
        self.consumed = True
        return self.entries


def _zeros_like(ref: AdditiveShare, shape=None) -> AdditiveShare:
    shape = ref.shape if shape is None else shape
    return AdditiveShare(ref.party, RingTensor.zeros(shape, ref.n_bits),
                         ref.precision)


class Linear:
    """y = x @ W^T + b for x of shape (batch, in_features)."""

    def __init__(self, weight: AdditiveShare, bias: AdditiveShare):
        self.weight = weight
        self.bias = bias
        self.grad_weight: Optional[AdditiveShare] = None
        self.grad_bias: Optional[AdditiveShare] = None
        self.vel_weight = _zeros_like(weight)
        self.vel_bias = _zeros_like(bias)

    @property
    def out_features(self):
        return self.weight.shape[0]

    @property
    def in_features(self):
        return self.weight.shape[1]

    def forward(self, session, x: AdditiveShare, prep: PartyPrep, tape: Tape):
        m = x.shape[0]
        p = x.precision
        t = prep.matmul(m, self.in_features, self.out_features)
        z = truncate(matmul_protocol(session, x, self.weight.transpose(), t), p)
        tape.push(("linear", self, x))
        return z + AdditiveShare(
            self.bias.party,
            RingTensor(np.broadcast_to(self.bias.values.data, z.shape).copy(),
                       z.n_bits), p)

    def backward(self, session, g: AdditiveShare, saved, prep: PartyPrep,
                 need_input_grad: bool):
        _, _, x = saved
        m = g.shape[0]
        p = g.precision
        t_w = prep.matmul(self.out_features, m, self.in_features)
        self.grad_weight = truncate(
            matmul_protocol(session, g.transpose(), x, t_w), p)
        self.grad_bias = g.sum(axis=0)
        if not need_input_grad:
            return None
        t_x = prep.matmul(m, self.out_features, self.in_features)
        return truncate(matmul_protocol(session, g, self.weight, t_x), p)

    def parameters(self):
        return [("weight", self.weight, "grad_weight", "vel_weight"),
                ("bias", self.bias, "grad_bias", "vel_bias")]


class ReLU:
    """Elementwise max(x, 0); the 0/1 selection mask is taped for backward."""

    def forward(self, session, x: AdditiveShare, prep: PartyPrep, tape: Tape):
        mask = nn_ops.relu_mask(session, x, prep.cmp_keys(x.values.size))
        mask = mask.reshape(*x.shape)
        t = prep.triple(beaver.OP_MUL, beaver.ElemwiseGeometry(tuple(x.shape)))
        out = mul_protocol(session, mask, x, t)
        tape.push(("relu", self, mask))
        return out

    def backward(self, session, g: AdditiveShare, saved, prep: PartyPrep,
                 need_input_grad: bool):
        _, _, mask = saved
        t = prep.triple(beaver.OP_MUL, beaver.ElemwiseGeometry(tuple(g.shape)))
        return mul_protocol(session, mask, g, t)

    def parameters(self):
        return []


class Conv2d:
    """Strided 2-D convolution with zero padding; x is (N, C, H, W)."""

    def __init__(self, weight: AdditiveShare, bias: AdditiveShare,
                 stride: int = 1, padding: int = 0):
        self.weight = weight  # (O, C, kh, kw)
        self.bias = bias      # (O,)
        self.stride = stride
        self.padding = padding
        self.grad_weight: Optional[AdditiveShare] = None
        self.grad_bias: Optional[AdditiveShare] = None
        self.vel_weight = _zeros_like(weight)
        self.vel_bias = _zeros_like(bias)

    def _geometry(self, in_shape) -> ConvGeometry:
        return ConvGeometry(tuple(in_shape), tuple(self.weight.shape),
                            self.stride, self.padding)

    def forward(self, session, x: AdditiveShare, prep: PartyPrep, tape: Tape):
        p = x.precision
        geom = self._geometry(x.shape)
        t = prep.conv2d(geom)
        z = truncate(beaver_protocol(session, x, self.weight, t), p)
        tape.push(("conv2d", self, x))
        bias = self.bias.values.data.reshape(1, -1, 1, 1)
        return z + AdditiveShare(
            self.bias.party,
            RingTensor(np.broadcast_to(bias, z.shape).copy(), z.n_bits), p)

    def backward(self, session, g: AdditiveShare, saved, prep: PartyPrep,
                 need_input_grad: bool):
        _, _, x = saved
        p = g.precision
        geom = self._geometry(x.shape)
        t_k = prep.conv2d(geom, op_tag=OP_CONV2D_GRAD_KERNEL)
        self.grad_weight = truncate(beaver_protocol(session, x, g, t_k), p)
        self.grad_bias = g.sum(axis=(0, 2, 3))
        if not need_input_grad:
            return None
        t_x = prep.conv2d(geom, op_tag=OP_CONV2D_GRAD_INPUT)
        return truncate(beaver_protocol(session, g, self.weight, t_x), p)

    def parameters(self):
        return [("weight", self.weight, "grad_weight", "vel_weight"),
                ("bias", self.bias, "grad_bias", "vel_bias")]


class PrivateModel:
    def __init__(self, layers: list):
        self.layers = layers

    @property
    def party(self) -> int:
        for layer in self.layers:
            for _, p, _, _ in layer.parameters():
                return p.party
        raise ValueError("model has no parameters")


def forward(session, model: PrivateModel, x: AdditiveShare,
            prep: PartyPrep) -> tuple[AdditiveShare, Tape]:
    tape = Tape()
    out = x
    for layer in model.layers:
        out = layer.forward(session, out, prep, tape)
    return out, tape


def backward(session, loss_grad: AdditiveShare, tape: Tape,
             model: PrivateModel, prep: PartyPrep):
    entries = tape.pop_all()
    if len(entries) != len(model.layers):
        raise ValueError("tape does not match the model")
    g = loss_grad
    for i in range(len(model.layers) - 1, -1, -1):
        need_input = i > 0
        g = model.layers[i].backward(session, g, entries[i], prep, need_input)


def mse_loss_grad(y_pred: AdditiveShare, y: AdditiveShare) -> AdditiveShare:
    """d/dy_pred of mean((y_pred - y)^2): 2 (y_pred - y) / batch, local."""
    m = int(np.prod(y_pred.shape))
    diff = y_pred - y
    return truncate(diff.mul_public_fixed(2.0 / m, y_pred.precision),
                    y_pred.precision)


def sgd_step(model: PrivateModel, lr: float, momentum: float = 0.0):
    """v <- momentum*v + g; theta <- theta - lr*v. Local only, zero rounds."""
    for layer in model.layers:
        for attr, param, grad_attr, vel_attr in layer.parameters():
            grad = getattr(layer, grad_attr)
            if grad is None:
                raise ValueError(f"{attr} gradient not populated")
            p = param.precision
            vel = getattr(layer, vel_attr)
            if momentum:
                vel = truncate(vel.mul_public_fixed(momentum, p), p) + grad
            else:
                vel = grad
            setattr(layer, vel_attr, vel)
            step = truncate(vel.mul_public_fixed(lr, p), p)
            setattr(layer, attr, param - step)
            setattr(layer, grad_attr, None)


def _loss_value(session, y_pred, y, prep):
    diff = y_pred - y
    t = prep.triple(beaver.OP_MUL, beaver.ElemwiseGeometry(tuple(diff.shape)))
    sq = truncate(mul_protocol(session, diff, diff, t), diff.precision)
    total = sq.sum()
    with allow_reconstruction():
        opened = reveal(session, total, op="loss-telemetry")
    from .sharing import decode_fixed
    return float(decode_fixed(opened, diff.precision) / np.prod(diff.shape))


def train(session, model: PrivateModel, x: AdditiveShare, y: AdditiveShare,
          config: TrainConfig, prep: PartyPrep) -> list:
    """Iterate forward / MSE / backward / step over the shared dataset.

    Returns per-epoch loss telemetry (empty unless allow_loss_reveal).
    Model state is never reconstructed here; the reconstruction guard makes
    any attempt raise.
    """
    n_samples = x.shape[0]
    bs = config.batch_size or n_samples
    losses = []
    with forbid_reconstruction("training must not open model state"):
        for _ in range(config.epochs):
            for start in range(0, n_samples, bs):
                xb = x[start:start + bs]
                yb = y[start:start + bs]
                y_pred, tape = forward(session, model, xb, prep)
                grad = mse_loss_grad(y_pred, yb)
                backward(session, grad, tape, model, prep)
                sgd_step(model, config.lr, config.momentum)
            if config.allow_loss_reveal:
                y_pred, _ = forward(session, model, x, prep)
                losses.append(_loss_value(session, y_pred, y, prep))
    return losses


# ---------------------------------------------------------------------------
# Model construction and checkpoints
# ---------------------------------------------------------------------------

def mlp_forward_plan(sizes: list, batch: int) -> list:
    """Preprocessing plan for one forward pass of an MLP with ReLU between
    linear layers: one matmul triple per layer plus ReLU material."""
    from . import nn_ops
    plan = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        plan.append(("triple", beaver.OP_MATMUL,
                     beaver.MatmulGeometry(batch, fan_in, fan_out)))
        if i < len(sizes) - 2:
            plan.append(("cmp", batch * fan_out))
            plan.append(("triple", beaver.OP_MUL,
                         beaver.ElemwiseGeometry((batch, fan_out))))
    return plan


def mlp_from_params(params: list, n_bits: int, precision: int,
                    rng: np.random.Generator, allow_wrap: bool = False):
    """Share float (W, b) pairs into two PrivateModel replicas with ReLU
    between linear layers (none after the last)."""
    layers0, layers1 = [], []
    for i, (w, b) in enumerate(params):
        w0, w1 = share(encode_fixed(w, precision, n_bits, allow_wrap=allow_wrap),
                       rng, precision)
        b0, b1 = share(encode_fixed(b, precision, n_bits, allow_wrap=allow_wrap),
                       rng, precision)
        layers0.append(Linear(w0, b0))
        layers1.append(Linear(w1, b1))
        if i < len(params) - 1:
            layers0.append(ReLU())
            layers1.append(ReLU())
    return PrivateModel(layers0), PrivateModel(layers1)


_CKPT_MAGIC = b"ARNC"


def save_checkpoint(model: PrivateModel, path: str):
    """Header + per-layer share payloads for one party."""
    buf = io.BytesIO()
    arrays = []
    meta = []
    for li, layer in enumerate(model.layers):
        for attr, param, _, _ in layer.parameters():
            arrays.append(param.values.data)
            meta.append((li, attr, param.n_bits, param.precision,
                         param.party, param.shape))
    buf.write(_CKPT_MAGIC + struct.pack("<BI", 1, len(arrays)))
    for (li, attr, n_bits, precision, party, shape), arr in zip(meta, arrays):
        name = f"{li}:{attr}".encode()
        buf.write(struct.pack("<H", len(name)) + name)
        buf.write(struct.pack("<BBBB", n_bits, precision, party, len(shape)))
        for d in shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.astype("<u8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> dict:
    """Returns {"layer:attr": AdditiveShare} for reassembly by the caller."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC or data[4] != 1:
        raise ValueError("not a checkpoint file")
    (count,) = struct.unpack("<I", data[5:9])
    off = 9
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", data[off:off + 2]); off += 2
        name = data[off:off + name_len].decode(); off += name_len
        n_bits, precision, party, ndim = struct.unpack("<BBBB", data[off:off + 4])
        off += 4
        shape = tuple(struct.unpack("<I", data[off + 4 * i:off + 4 * i + 4])[0]
                      for i in range(ndim))
        off += 4 * ndim
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(data[off:off + size], dtype="<u8").reshape(shape)
        off += size
        out[name] = AdditiveShare(party, RingTensor(arr.astype(np.uint64), n_bits),
                                  precision)
    return out
