"""Trusted-dealer preprocessing: circuit-independent correlated randomness.

The dealer knows only operation shapes (never data or the consuming circuit)
and produces per-party bundles of comparison/equality keys and Beaver
triples. For training, material is streamed on demand: both parties issue
identical request sequences, and the in-process dealer materializes each pair
exactly once.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import beaver, fss


@dataclass
class PrepBundle:
    """One party's material for a preprocessing plan, in plan order."""

    party: int
    items: list


def preprocess(plan: list, n_bits: int, rng: np.random.Generator,
               keep_tapes: bool = False):
    """Generate both parties' bundles for a plan.

    Plan entries: ("cmp", count) | ("eq", count) | ("triple", op_tag, geometry).
    Returns (bundle0, bundle1, tapes) where tapes align with key entries when
    requested (None otherwise).
    """
    items0, items1, tapes = [], [], []
    for entry in plan:
        kind = entry[0]
        if kind == "cmp":
            if keep_tapes:
                _, k0, k1, tape = fss.keygen_cmp_with_tape(n_bits, rng, entry[1])
            else:
                _, k0, k1 = fss.keygen_cmp(n_bits, rng, entry[1])
                tape = None
            items0.append(k0); items1.append(k1); tapes.append(tape)
        elif kind == "eq":
            if keep_tapes:
                _, k0, k1, tape = fss.keygen_eq_with_tape(n_bits, rng, entry[1])
            else:
                _, k0, k1 = fss.keygen_eq(n_bits, rng, entry[1])
                tape = None
            items0.append(k0); items1.append(k1); tapes.append(tape)
        elif kind == "triple":
            t0, t1 = beaver.gen_triple(entry[1], entry[2], n_bits, rng)
            items0.append(t0); items1.append(t1); tapes.append(None)
        else:
            raise ValueError(f"unknown plan entry {entry!r}")
    return (PrepBundle(0, items0), PrepBundle(1, items1),
            tapes if keep_tapes else None)


class Dealer:
    """Streaming dealer shared by two in-process party threads.

    Both parties must request material in the same order; each request index
    is generated once and handed out to each party exactly once.
    """

    def __init__(self, n_bits: int, rng: np.random.Generator):
        self.n_bits = n_bits
        self._rng = rng
        self._lock = threading.Lock()
        self._made: dict[int, tuple] = {}
        self._cursor = [0, 0]
        self._claimed: dict[int, int] = {}

    def _request(self, party: int, sig: tuple):
        with self._lock:
            idx = self._cursor[party]
            self._cursor[party] += 1
            if idx not in self._made:
                self._made[idx] = (sig, self._generate(sig))
            stored_sig, pair = self._made[idx]
            if stored_sig != sig:
                raise RuntimeError(
                    f"prep stream desync at {idx}: {stored_sig} vs {sig}")
            self._claimed[idx] = self._claimed.get(idx, 0) + 1
            if self._claimed[idx] == 2:  # both halves delivered, free the slot
                del self._made[idx]
                del self._claimed[idx]
            return pair[party]

    def _generate(self, sig: tuple):
        kind = sig[0]
        if kind == "cmp":
            domain = sig[2]
            out = self.n_bits if domain != self.n_bits else None
            _, k0, k1 = fss.keygen_cmp(domain, self._rng, sig[1], out_bits=out)
            return k0, k1
        if kind == "eq":
            _, k0, k1 = fss.keygen_eq(self.n_bits, self._rng, sig[1])
            return k0, k1
        if kind == "triple":
            return beaver.gen_triple(sig[1], sig[2], self.n_bits, self._rng)
        raise ValueError(f"unknown request {sig!r}")

    def for_party(self, party: int, cmp_bits: int = None) -> "PartyPrep":
        return PartyPrep(self, party, cmp_bits)


class PartyPrep:
    """One party's view of the streaming dealer.

    cmp_bits narrows the comparison mask domain below the arithmetic ring
    (keys still output full-width shares); default is the full ring.
    """

    def __init__(self, dealer: Dealer, party: int, cmp_bits: int = None):
        self._dealer = dealer
        self.party = party
        self.cmp_bits = cmp_bits or dealer.n_bits

    @property
    def n_bits(self) -> int:
        return self._dealer.n_bits

    def cmp_keys(self, count: int) -> fss.CmpKeyBatch:
        return self._dealer._request(self.party, ("cmp", count, self.cmp_bits))

    def eq_keys(self, count: int) -> fss.EqKeyBatch:
        return self._dealer._request(self.party, ("eq", count))

    def triple(self, op_tag: str, geometry) -> beaver.BeaverTriple:
        return self._dealer._request(self.party, ("triple", op_tag, geometry))

    def relu(self, m: int):
        from .nn_ops import ReluPrep
        return ReluPrep(self.cmp_keys(m),
                        self.triple(beaver.OP_MUL, beaver.ElemwiseGeometry((m,))))

    def relu_shaped(self, shape: tuple):
        from .nn_ops import ReluPrep
        m = int(np.prod(shape))
        return ReluPrep(self.cmp_keys(m),
                        self.triple(beaver.OP_MUL, beaver.ElemwiseGeometry(tuple(shape))))

    def argmax(self, batch: int, m: int):
        from .nn_ops import ArgmaxPrep
        return ArgmaxPrep(self.cmp_keys(batch * m * (m - 1)),
                          self.eq_keys(batch * m))

    def maxpool(self, m: int, k: int, stride: int = 2):
        from .nn_ops import MaxpoolPrep
        w = ((m - k) // stride + 1) ** 2
        return MaxpoolPrep(self.argmax(w, k * k),
                           self.triple(beaver.OP_MUL,
                                       beaver.ElemwiseGeometry((w, k * k))))

    def maxpool_k2(self, m: int):
        from .nn_ops import MaxpoolK2Prep
        w = ((m - 2) // 2 + 1) ** 2
        return MaxpoolK2Prep(self.relu_shaped((w, 2)), self.relu_shaped((w,)))

    def newton(self, shape: tuple, iters: int):
        from .nn_ops import NewtonPrep
        geom = beaver.ElemwiseGeometry(tuple(shape))
        return NewtonPrep([self.triple(beaver.OP_MUL, geom)
                           for _ in range(3 * iters)])

    def batchnorm(self, batch: int, features: int, iters: int):
        from .nn_ops import BatchNormPrep
        full = beaver.ElemwiseGeometry((batch, features))
        feat = beaver.ElemwiseGeometry((features,))
        return BatchNormPrep(self.triple(beaver.OP_MUL, full),
                             self.newton((features,), iters),
                             self.triple(beaver.OP_MUL, feat),
                             self.triple(beaver.OP_MUL, full))

    def matmul(self, m1: int, m2: int, m3: int) -> beaver.BeaverTriple:
        return self.triple(beaver.OP_MATMUL, beaver.MatmulGeometry(m1, m2, m3))

    def conv2d(self, geometry: beaver.ConvGeometry,
               op_tag: str = beaver.OP_CONV2D) -> beaver.BeaverTriple:
        return self.triple(op_tag, geometry)


def make_dealer(n_bits: int, seed: Optional[int] = None) -> Dealer:
    return Dealer(n_bits, np.random.default_rng(seed))
