"""Beaver-triple generation and one-round private bilinear protocols.

A triple (a, b, c = a o b) is bound to one instance of a bilinear operation o
(elementwise product, matrix product, convolution, or a convolution gradient).
Online, the parties reveal delta = x - a and epsilon = y - b in a single
exchange and locally combine delta o b + a o epsilon + delta o epsilon + c,
which reconstructs to x o y exactly mod 2^n.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .fss import KIND_TRIPLE, KeyBatch
from .ring import RingTensor, ring_mask
from .runtime import FRAME_TRIPLE_DELTA, Session
from .sharing import AdditiveShare, pack_ring, unpack_ring

OP_MUL = "mul"
OP_MATMUL = "matmul"
OP_CONV2D = "conv2d"
OP_CONV2D_GRAD_KERNEL = "conv2d_grad_kernel"
OP_CONV2D_GRAD_INPUT = "conv2d_grad_input"


class TripleReuseError(RuntimeError):
    """A Beaver triple is strictly single-use."""


@dataclass(frozen=True)
class ElemwiseGeometry:
    shape: tuple

    @property
    def lhs_shape(self):
        return self.shape

    rhs_shape = lhs_shape

    @property
    def out_shape(self):
        return self.shape


@dataclass(frozen=True)
class MatmulGeometry:
    m1: int
    m2: int
    m3: int

    @property
    def lhs_shape(self):
        return (self.m1, self.m2)

    @property
    def rhs_shape(self):
        return (self.m2, self.m3)

    @property
    def out_shape(self):
        return (self.m1, self.m3)


@dataclass(frozen=True)
class ConvGeometry:
    """x: (N, C, H, W), kernel: (O, C, kh, kw), single stride/zero padding."""

    in_shape: tuple
    kernel_shape: tuple
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        n, c, h, w = self.in_shape
        o, ck, kh, kw = self.kernel_shape
        if ck != c:
            raise ValueError("kernel channel count does not match input")
        if kh > h + 2 * self.padding or kw > w + 2 * self.padding:
            raise ValueError("kernel larger than padded input")

    @property
    def out_hw(self):
        _, _, h, w = self.in_shape
        _, _, kh, kw = self.kernel_shape
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        return ho, wo

    @property
    def out_shape(self):
        ho, wo = self.out_hw
        return (self.in_shape[0], self.kernel_shape[0], ho, wo)


Geometry = Union[ElemwiseGeometry, MatmulGeometry, ConvGeometry]


# ---------------------------------------------------------------------------
# Plaintext ring kernels
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N*Ho*Wo, C*kh*kw) window matrix."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, in_shape, kh, kw, stride, padding, ho, wo) -> np.ndarray:
    """Scatter-add inverse of _im2col (wraps mod 2^64)."""
    n, c, h, w = in_shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.uint64)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += blocks[:, :, u, v]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def ring_conv2d(x: RingTensor, k: RingTensor, stride: int = 1,
                padding: int = 0) -> RingTensor:
    """Strided cross-correlation of (N,C,H,W) with (O,C,kh,kw) in the ring."""
    n = x.n_bits
    o, _, kh, kw = k.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    flat = k.data.reshape(o, -1)
    out = (cols @ flat.T) & ring_mask(n)  # (N*Ho*Wo, O)
    out = out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    return RingTensor(np.ascontiguousarray(out), n, _trusted=True)


def ring_conv2d_grad_kernel(x: RingTensor, g: RingTensor, kernel_shape,
                            stride: int = 1, padding: int = 0) -> RingTensor:
    """Kernel-shaped bilinear form: dK[o,c,u,v] = sum_n,h,w g[n,o,h,w] * window."""
    n = x.n_bits
    o, c, kh, kw = kernel_shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    gm = g.data.transpose(0, 2, 3, 1).reshape(-1, o)  # (N*Ho*Wo, O)
    out = (gm.T @ cols) & ring_mask(n)  # (O, C*kh*kw)
    return RingTensor(out.reshape(kernel_shape), n, _trusted=True)


def ring_conv2d_grad_input(g: RingTensor, k: RingTensor, in_shape,
                           stride: int = 1, padding: int = 0) -> RingTensor:
    """Input-shaped bilinear form: transposed convolution of g with k."""
    n = g.n_bits
    o, c, kh, kw = k.shape
    _, _, ho, wo = g.shape
    gm = g.data.transpose(0, 2, 3, 1).reshape(-1, o)
    dcols = (gm @ k.data.reshape(o, -1)) & ring_mask(n)
    out = _col2im(dcols, in_shape, kh, kw, stride, padding, ho, wo) & ring_mask(n)
    return RingTensor(out, n, _trusted=True)


def unroll(x: RingTensor, k: int, s: int) -> RingTensor:
    """Window matrix of a single-channel m x m tensor: one row per k x k window.

    conv(x, K) == unroll(x) @ flatten(K), reshaped back to the output grid.
    """
    m = x.shape[-1]
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError("unroll expects a square 2-D tensor")
    if k > m:
        raise ValueError(f"kernel {k} larger than input {m}")
    cols, ho, wo = _im2col(x.data[None, None], k, k, s, 0)
    return RingTensor(cols, x.n_bits, _trusted=True)


def apply_bilinear(op_tag: str, geometry: Geometry, lhs: RingTensor,
                   rhs: RingTensor) -> RingTensor:
    if op_tag == OP_MUL:
        return lhs * rhs
    if op_tag == OP_MATMUL:
        return lhs.matmul(rhs)
    if op_tag == OP_CONV2D:
        return ring_conv2d(lhs, rhs, geometry.stride, geometry.padding)
    if op_tag == OP_CONV2D_GRAD_KERNEL:
        return ring_conv2d_grad_kernel(lhs, rhs, geometry.kernel_shape,
                                       geometry.stride, geometry.padding)
    if op_tag == OP_CONV2D_GRAD_INPUT:
        return ring_conv2d_grad_input(lhs, rhs, geometry.in_shape,
                                      geometry.stride, geometry.padding)
    raise ValueError(f"unsupported op {op_tag!r}")


def _operand_shapes(op_tag: str, geometry: Geometry):
    if op_tag in (OP_MUL,):
        return geometry.shape, geometry.shape
    if op_tag == OP_MATMUL:
        return geometry.lhs_shape, geometry.rhs_shape
    if op_tag == OP_CONV2D:
        return geometry.in_shape, geometry.kernel_shape
    if op_tag == OP_CONV2D_GRAD_KERNEL:
        return geometry.in_shape, geometry.out_shape
    if op_tag == OP_CONV2D_GRAD_INPUT:
        return geometry.out_shape, geometry.kernel_shape
    raise ValueError(f"unsupported op {op_tag!r}")


def _result_shape(op_tag: str, geometry: Geometry):
    if op_tag == OP_MUL:
        return geometry.shape
    if op_tag == OP_MATMUL:
        return geometry.out_shape
    if op_tag == OP_CONV2D:
        return geometry.out_shape
    if op_tag == OP_CONV2D_GRAD_KERNEL:
        return geometry.kernel_shape
    if op_tag == OP_CONV2D_GRAD_INPUT:
        return geometry.in_shape
    raise ValueError(f"unsupported op {op_tag!r}")


# ---------------------------------------------------------------------------
# Triples
# ---------------------------------------------------------------------------

@dataclass
class BeaverTriple:
    """One party's half of a triple bound to a single operation instance."""

    party: int
    op_tag: str
    geometry: Geometry
    n_bits: int
    a: RingTensor
    b: RingTensor
    c: RingTensor
    consumed: bool = False


def gen_triple(op_tag: str, geometry: Geometry, n_bits: int,
               rng: np.random.Generator) -> tuple[BeaverTriple, BeaverTriple]:
    """Dealer-side triple: a, b uniform; c computed in plaintext and shared."""
    lhs_shape, rhs_shape = _operand_shapes(op_tag, geometry)
    a = RingTensor.random(lhs_shape, n_bits, rng)
    b = RingTensor.random(rhs_shape, n_bits, rng)
    c = apply_bilinear(op_tag, geometry, a, b)
    a0 = RingTensor.random(lhs_shape, n_bits, rng)
    b0 = RingTensor.random(rhs_shape, n_bits, rng)
    c0 = RingTensor.random(c.shape, n_bits, rng)
    t0 = BeaverTriple(0, op_tag, geometry, n_bits, a0, b0, c0)
    t1 = BeaverTriple(1, op_tag, geometry, n_bits, a - a0, b - b0, c - c0)
    return t0, t1


def beaver_protocol(session: Session, x: AdditiveShare, y: AdditiveShare,
                    t: BeaverTriple) -> AdditiveShare:
    """One-round private x o y using a matching triple.

    The result's precision is the sum of the operand precisions; callers
    truncate afterwards to return to the working fixed-point scale.
    """
    if t.consumed:
        raise TripleReuseError("triple already consumed")
    if t.party != x.party or t.party != y.party:
        raise ValueError("triple belongs to the other party")
    if t.n_bits != x.n_bits or t.n_bits != y.n_bits:
        raise ValueError("ring width mismatch between triple and operands")
    lhs_shape, rhs_shape = _operand_shapes(t.op_tag, t.geometry)
    if tuple(x.shape) != tuple(lhs_shape) or tuple(y.shape) != tuple(rhs_shape):
        raise ValueError(
            f"operand shapes {x.shape} o {y.shape} do not match the triple "
            f"geometry {lhs_shape} o {rhs_shape}")
    t.consumed = True

    n = t.n_bits
    delta_j = x.values - t.a
    eps_j = y.values - t.b
    payload = pack_ring(delta_j.data, n) + pack_ring(eps_j.data, n)
    peer = session.exchange(t.op_tag, FRAME_TRIPLE_DELTA, payload,
                            elements=delta_j.size + eps_j.size)
    flat = unpack_ring(peer, n)
    if flat.size != delta_j.size + eps_j.size:
        raise ValueError("peer payload size mismatch")
    delta = delta_j + RingTensor(flat[:delta_j.size].reshape(delta_j.shape), n)
    eps = eps_j + RingTensor(flat[delta_j.size:].reshape(eps_j.shape), n)

    z = (apply_bilinear(t.op_tag, t.geometry, delta, t.b)
         + apply_bilinear(t.op_tag, t.geometry, t.a, eps)
         + t.c)
    if t.party == 0:
        z = z + apply_bilinear(t.op_tag, t.geometry, delta, eps)
    return AdditiveShare(t.party, z, x.precision + y.precision)


def mul_protocol(session, x, y, t: BeaverTriple) -> AdditiveShare:
    if t.op_tag != OP_MUL:
        raise ValueError("triple is not an elementwise triple")
    return beaver_protocol(session, x, y, t)


def matmul_protocol(session, x, y, t: BeaverTriple) -> AdditiveShare:
    if t.op_tag != OP_MATMUL:
        raise ValueError("triple is not a matmul triple")
    return beaver_protocol(session, x, y, t)


def conv2d_protocol(session, x, k, t: BeaverTriple) -> AdditiveShare:
    if t.op_tag != OP_CONV2D:
        raise ValueError("triple is not a convolution triple")
    return beaver_protocol(session, x, k, t)


# ---------------------------------------------------------------------------
# Triple transport (kind-2 containers of the key file format)
# ---------------------------------------------------------------------------

_OP_CODES = {OP_MUL: 0, OP_MATMUL: 1, OP_CONV2D: 2,
             OP_CONV2D_GRAD_KERNEL: 3, OP_CONV2D_GRAD_INPUT: 4}
_OP_NAMES = {v: k for k, v in _OP_CODES.items()}


def _encode_geometry(op_tag: str, geometry: Geometry) -> bytes:
    out = bytes([_OP_CODES[op_tag]])
    if op_tag == OP_MUL:
        dims = geometry.shape
        out += bytes([len(dims)])
        for d in dims:
            out += int(d).to_bytes(4, "little")
    elif op_tag == OP_MATMUL:
        for d in (geometry.m1, geometry.m2, geometry.m3):
            out += int(d).to_bytes(4, "little")
    else:
        for d in geometry.in_shape + geometry.kernel_shape:
            out += int(d).to_bytes(4, "little")
        out += bytes([geometry.stride, geometry.padding])
    return out


def _decode_geometry(data: bytes):
    op_tag = _OP_NAMES[data[0]]
    off = 1
    if op_tag == OP_MUL:
        ndim = data[off]; off += 1
        dims = tuple(int.from_bytes(data[off + 4 * i:off + 4 * i + 4], "little")
                     for i in range(ndim))
        off += 4 * ndim
        return op_tag, ElemwiseGeometry(dims), off
    if op_tag == OP_MATMUL:
        m1, m2, m3 = (int.from_bytes(data[off + 4 * i:off + 4 * i + 4], "little")
                      for i in range(3))
        return op_tag, MatmulGeometry(m1, m2, m3), off + 12
    dims = [int.from_bytes(data[off + 4 * i:off + 4 * i + 4], "little")
            for i in range(8)]
    off += 32
    stride, padding = data[off], data[off + 1]
    geom = ConvGeometry(tuple(dims[:4]), tuple(dims[4:]), stride, padding)
    return op_tag, geom, off + 2


def pack_triples(t0: BeaverTriple, t1: BeaverTriple) -> KeyBatch:
    def body(t: BeaverTriple) -> bytes:
        geo = _encode_geometry(t.op_tag, t.geometry)
        data = geo
        for part in (t.a, t.b, t.c):
            data += part.data.astype("<u8").tobytes()
        return len(data).to_bytes(4, "little") + data

    if t0.n_bits != t1.n_bits or t0.op_tag != t1.op_tag or t0.geometry != t1.geometry:
        raise ValueError("triples do not form a pair")
    return KeyBatch(KIND_TRIPLE, t0.n_bits, 1, body(t0), body(t1))


def unpack_triples(batch: KeyBatch) -> tuple[BeaverTriple, BeaverTriple]:
    if batch.kind != KIND_TRIPLE:
        raise ValueError("container does not hold triples")

    def parse(party: int, payload: bytes) -> BeaverTriple:
        body = payload[4:]
        op_tag, geometry, off = _decode_geometry(body)
        lhs_shape, rhs_shape = _operand_shapes(op_tag, geometry)
        parts = []
        for shape in (lhs_shape, rhs_shape):
            size = int(np.prod(shape)) * 8
            arr = np.frombuffer(body[off:off + size], dtype="<u8").reshape(shape)
            parts.append(RingTensor(arr.astype(np.uint64), batch.n_bits))
            off += size
        out_shape = _result_shape(op_tag, geometry)
        c_size = int(np.prod(out_shape)) * 8
        if off + c_size != len(body):
            raise ValueError("triple payload size mismatch")
        arr = np.frombuffer(body[off:off + c_size], dtype="<u8")
        c = RingTensor(arr.astype(np.uint64).reshape(out_shape), batch.n_bits)
        return BeaverTriple(party, op_tag, geometry, batch.n_bits,
                            parts[0], parts[1], c)

    return parse(0, batch.payload0), parse(1, batch.payload1)
