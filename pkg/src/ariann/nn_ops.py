"""Private neural-network layer protocols built on sign, equality, and Beaver.

Online round budgets (batched over whole tensors): comparison 1, ReLU 2,
argmax 2, maxpool 3 (the k=2 tree variant trades a 4th round for ~4x fewer
comparisons), one multiplication 1. BatchNorm runs 3 rounds per Newton
iteration plus one round for the variance square and two for the affine part.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import beaver, fss
from .beaver import (BeaverTriple, ElemwiseGeometry, mul_protocol, unroll)
from .ring import RingTensor
from .sharing import AdditiveShare, encode_fixed, truncate


@dataclass
class ReluPrep:
    cmp: fss.CmpKeyBatch
    triple: BeaverTriple


@dataclass
class ArgmaxPrep:
    cmp: fss.CmpKeyBatch
    eq: fss.EqKeyBatch


@dataclass
class MaxpoolPrep:
    argmax: ArgmaxPrep
    dot_triple: BeaverTriple


@dataclass
class MaxpoolK2Prep:
    level1: ReluPrep
    level2: ReluPrep


@dataclass
class NewtonPrep:
    triples: list  # 3 elementwise triples per iteration


@dataclass
class BatchNormPrep:
    square_triple: BeaverTriple
    newton: NewtonPrep
    scale_triple: BeaverTriple   # gamma * theta
    apply_triple: BeaverTriple   # (gamma*theta) * (x - mu)


@dataclass
class BatchNormPolicy:
    """Newton schedule: warm starts reuse the previous batch's estimate."""

    cold_iters: int = 50
    warm_iters: int = 3
    c_mid: float = 6.0
    first_layer_iters: int = 60
    last_layer_iters: int = 10
    cold_theta0: float = 0.1

    def schedule(self, position: str = "mid", warm: bool = False) -> tuple[int, float]:
        """(iterations, C) for a layer position in {first, mid, last}."""
        if position == "first":
            return self.first_layer_iters, self.c_mid
        if position == "last":
            return self.last_layer_iters, self.c_mid
        return (self.warm_iters if warm else self.cold_iters), self.c_mid


def _ones_like(x: AdditiveShare) -> RingTensor:
    return RingTensor.from_ints(np.ones(x.shape, dtype=np.int64), x.n_bits)


def relu(session, x: AdditiveShare, prep: ReluPrep) -> AdditiveShare:
    """max(x, 0) elementwise; exactly 0 at x == 0. Two rounds.

    The sign test runs on x + 1 (one integer ULP), so the selection bit is
    b = 1 - 1[x <= -1] = 1[x >= 0], then one pointwise multiplication b * x.
    """
    shifted = AdditiveShare(x.party, x.values, 0).add_public(_ones_like(x))
    s = fss.sign_protocol(session, shifted, prep.cmp)
    b = (-s).add_public(_ones_like(x))
    out = mul_protocol(session, b, AdditiveShare(x.party, x.values, x.precision),
                       prep.triple)
    return out


def relu_mask(session, x: AdditiveShare, cmp_keys: fss.CmpKeyBatch) -> AdditiveShare:
    """Shares of 1[x >= 0] only (one round); used by the training tape."""
    shifted = AdditiveShare(x.party, x.values, 0).add_public(_ones_like(x))
    s = fss.sign_protocol(session, shifted, cmp_keys)
    return (-s).add_public(_ones_like(x))


def argmax(session, x: AdditiveShare, prep: ArgmaxPrep) -> AdditiveShare:
    """One-hot-style maximum indicator over the last axis. Two rounds.

    All pairwise tests go out in one batched message; ties leave several
    coordinates set (use break_ties for a strict one-hot).
    """
    m = x.shape[-1]
    if m < 2:
        raise ValueError("argmax needs at least two entries")
    data = x.values.data
    diffs = (data[..., None, :] - data[..., :, None])  # [..., j, i] = x_i - x_j
    off_diag = ~np.eye(m, dtype=bool)
    diffs = diffs[..., off_diag]  # (..., m*(m-1)) grouped by j
    y = AdditiveShare(x.party, RingTensor(diffs, x.n_bits), 0)
    s = fss.sign_protocol(session, y, prep.cmp)  # 1[x_i <= x_j]
    counts = s.reshape(*s.shape[:-1], m, m - 1).sum(axis=-1)
    centered = counts.add_public(
        RingTensor.from_ints(np.full(counts.shape, -(m - 1), dtype=np.int64),
                             x.n_bits))
    return fss.eq_protocol(session, centered, prep.eq)


def break_ties(session, delta: AdditiveShare, cmp_keys: fss.CmpKeyBatch,
               coin, threshold_digits: int = 4) -> AdditiveShare:
    """Reduce a multi-hot 0/1 vector to a one-hot choice, uniform over ties.

    ``coin`` is a public random draw from [0, 1) that both parties must agree
    on (a scalar, or one per leading row). The cumulative sum is compared
    against coin * total in one round; the selected index is where the
    comparison output steps from 0 to 1. Needs at least one set entry.
    threshold_digits trades selection granularity (~m/10^digits bias) against
    the sign-test magnitude m*10^digits, which drives the failure rate.
    """
    coin = np.asarray(coin, dtype=np.float64)
    if np.any(coin < 0.0) or np.any(coin >= 1.0):
        raise ValueError("coin must lie in [0, 1)")
    n = delta.n_bits
    cums = delta.cumsum(-1)
    total = cums[..., -1:]
    scale = 10 ** threshold_digits
    scaled = AdditiveShare(cums.party, cums.values * scale, 0)
    coin_int = RingTensor.from_ints(
        np.broadcast_to(np.floor(coin * scale).astype(np.int64),
                        total.shape).copy(), n)
    thresh = AdditiveShare(total.party, total.values * coin_int, 0)
    y = scaled - thresh  # broadcasts (..., m) - (..., 1)
    s = fss.sign_protocol(session, y, cmp_keys)  # 1[cumsum*S <= coin*total*S]
    c = (-s).add_public(_ones_like(s))           # 1[cumsum > threshold]
    shifted = np.zeros_like(c.values.data)
    shifted[..., 1:] = c.values.data[..., :-1]
    return c - AdditiveShare(c.party, RingTensor(shifted, c.n_bits), 0)


def maxpool(session, x: AdditiveShare, k: int, prep: MaxpoolPrep,
            stride: int = 2) -> AdditiveShare:
    """Max pooling over k x k windows of an m x m tensor. Three rounds.

    Rows are unrolled windows; each window's argmax indicator is dotted with
    the window. To keep the indicator one-hot under ties, the argmax input is
    scaled by k^2 and biased by the in-window index (strictly order-preserving
    on the original values), which costs k^2 fixed-point headroom.
    """
    win = unroll(x.values, k, stride)
    wshare = AdditiveShare(x.party, win, x.precision)
    kk = k * k
    perturbed = wshare.mul_public_int(kk).add_public(
        RingTensor.from_ints(np.broadcast_to(np.arange(kk, dtype=np.int64),
                                             win.shape).copy(), x.n_bits))
    onehot = argmax(session, perturbed, prep.argmax)
    prods = mul_protocol(session, onehot, wshare, prep.dot_triple)
    pooled = prods.sum(axis=-1)
    side = int(np.sqrt(pooled.shape[0]))
    return pooled.reshape(side, side)


def maxpool_k2(session, x: AdditiveShare, prep: MaxpoolK2Prep) -> AdditiveShare:
    """k=2 max pooling via a two-level max tree: 4 rounds, ~4x fewer
    comparisons than the unroll+argmax route. max(a, b) = b + ReLU(a - b)."""
    win = unroll(x.values, 2, 2)
    w = AdditiveShare(x.party, win, x.precision)
    lhs = w[:, (0, 2)]
    rhs = w[:, (1, 3)]
    mx = rhs + relu(session, lhs - rhs, prep.level1)
    a, b = mx[:, 0], mx[:, 1]
    out = b + relu(session, a - b, prep.level2)
    side = int(np.sqrt(out.shape[0]))
    return out.reshape(side, side)


def inv_sqrt_newton(session, v: AdditiveShare, theta0: AdditiveShare,
                    iters: int, c: float, prep: NewtonPrep) -> AdditiveShare:
    """Iterative estimate of 1/sqrt(v): theta <- theta * ((C+1) - v*theta^2) / C.

    C = 2 is the classic Newton step; larger C damps the update so a cheap
    constant initial guess converges without an initialisation polynomial.
    Three multiplication rounds per iteration, truncations folded in locally.
    """
    if iters < 1:
        raise ValueError("need at least one iteration")
    if len(prep.triples) < 3 * iters:
        raise ValueError("Newton preprocessing undersized")
    p = v.precision
    c_plus_1 = encode_fixed(np.full(v.shape, c + 1.0), p, v.n_bits)
    theta = theta0
    for i in range(iters):
        t_sq = truncate(mul_protocol(session, theta, theta, prep.triples[3 * i]), p)
        w = truncate(mul_protocol(session, v, t_sq, prep.triples[3 * i + 1]), p)
        z = (-w).add_public(c_plus_1)
        num = truncate(mul_protocol(session, theta, z, prep.triples[3 * i + 2]), p)
        theta = truncate(num.mul_public_fixed(1.0 / c, p), p)
    return theta


def batchnorm_forward(session, x: AdditiveShare, gamma: AdditiveShare,
                      beta: AdditiveShare, prep: BatchNormPrep,
                      policy: BatchNormPolicy = None,
                      warm_theta: Optional[AdditiveShare] = None,
                      position: str = "mid",
                      eps: float = 0.01):
    """Normalize a (batch, features) tensor: gamma * theta * (x - mu) + beta.

    theta estimates 1/sqrt(var + eps) via inv_sqrt_newton; passing the
    previous batch's theta as ``warm_theta`` shortens the schedule. Returns
    (output, theta) so callers can warm-start the next batch. The +eps floor
    also absorbs degenerate batches whose variance underflows to zero.
    """
    policy = policy or BatchNormPolicy()
    m = x.shape[0]
    p = x.precision
    iters, c = policy.schedule(position, warm=warm_theta is not None)
    if position == "last":
        warm_theta = None  # variance too small for previous-batch reuse

    # The public 1/m constant carries 3 extra digits so the mean bias stays
    # well under the Newton error budget; needs n_bits >= ~40 of headroom.
    mean_digits = p + 3
    mu = truncate(x.sum(axis=0).mul_public_fixed(1.0 / m, mean_digits),
                  mean_digits)
    xc = x - AdditiveShare(x.party,
                           RingTensor(np.broadcast_to(mu.values.data, x.shape).copy(),
                                      x.n_bits), p)
    sq = truncate(mul_protocol(session, xc, xc, prep.square_triple), p)
    var = truncate(sq.sum(axis=0).mul_public_fixed(1.0 / m, mean_digits),
                   mean_digits)
    v = var.add_public(encode_fixed(np.full(var.shape, eps), p, x.n_bits))

    if warm_theta is None:
        theta0 = AdditiveShare(x.party, RingTensor.zeros(v.shape, x.n_bits), p)
        theta0 = theta0.add_public(encode_fixed(
            np.full(v.shape, policy.cold_theta0), p, x.n_bits))
    else:
        theta0 = warm_theta
    theta = inv_sqrt_newton(session, v, theta0, iters, c, prep.newton)

    g = truncate(mul_protocol(session, gamma, theta, prep.scale_triple), p)
    g_b = AdditiveShare(g.party,
                        RingTensor(np.broadcast_to(g.values.data, x.shape).copy(),
                                   x.n_bits), p)
    out = truncate(mul_protocol(session, g_b, xc, prep.apply_triple), p)
    beta_b = AdditiveShare(beta.party,
                           RingTensor(np.broadcast_to(beta.values.data, x.shape).copy(),
                                      x.n_bits), p)
    return out + beta_b, theta


# ---------------------------------------------------------------------------
# Published preprocessing consumption formulas
# ---------------------------------------------------------------------------

def relu_plan(m: int) -> list:
    """ReLU on m elements: m comparison keys + one m-element triple."""
    return [("cmp", m), ("triple", beaver.OP_MUL, ElemwiseGeometry((m,)))]


def argmax_plan(batch: int, m: int) -> list:
    """Per vector: m*(m-1) comparison keys and m equality keys."""
    return [("cmp", batch * m * (m - 1)), ("eq", batch * m)]


def maxpool_plan(m: int, k: int, stride: int = 2) -> list:
    w = ((m - k) // stride + 1) ** 2
    return argmax_plan(w, k * k) + [
        ("triple", beaver.OP_MUL, ElemwiseGeometry((w, k * k)))]


def maxpool_k2_plan(m: int) -> list:
    w = ((m - 2) // 2 + 1) ** 2
    return [("cmp", 2 * w), ("triple", beaver.OP_MUL, ElemwiseGeometry((w, 2))),
            ("cmp", w), ("triple", beaver.OP_MUL, ElemwiseGeometry((w,)))]


def newton_plan(shape: tuple, iters: int) -> list:
    return [("triple", beaver.OP_MUL, ElemwiseGeometry(shape))] * (3 * iters)


def batchnorm_plan(batch: int, features: int, iters: int) -> list:
    full = ("triple", beaver.OP_MUL, ElemwiseGeometry((batch, features)))
    per_feat = newton_plan((features,), iters)
    scale = ("triple", beaver.OP_MUL, ElemwiseGeometry((features,)))
    return [full] + per_feat + [scale, full]
