"""Function-secret-sharing keys for private equality and comparison.

A key pair splits the predicate x == alpha (equality) or x <= alpha
(comparison) between two evaluators: per-party evaluations of a public input
sum to the predicate value mod 2^n, and either key alone is pseudorandom.
Evaluation walks an n-level binary tree MSB first; the per-level correction
words keep the two evaluators' PRG states correlated exactly on the
root-to-alpha path.

Correction words are stored compressed: one lambda-bit seed correction is
shared by both children (the child leaving the special path only needs
pseudorandomness, so it can reuse the collapsing child's string), plus two
control bits; comparison keys additionally carry an n-bit sigma correction,
two tau bits and one n-bit leaf word per level. Everything here is batched:
a batch of keys is a struct of arrays and one PRG call covers a whole level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import prg
from .ring import ring_mask

LAMBDA = prg.SEED_BITS

MAGIC = b"ARNK"
VERSION = 1
KIND_EQ = 0
KIND_CMP = 1
KIND_TRIPLE = 2

_HEADER_BYTES = 13  # magic 4 | version 1 | kind 1 | n 1 | lambda 2 | count 4


class KeyFormatError(ValueError):
    """Malformed serialized key material."""


class KeyExhaustedError(RuntimeError):
    """More single-use keys requested than remain unconsumed."""


def _uniform_ring(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    if n == 64:
        hi = rng.integers(0, 1 << 63, size=count, dtype=np.uint64) << np.uint64(1)
        return hi | rng.integers(0, 2, size=count, dtype=np.uint64)
    return rng.integers(0, 1 << n, size=count, dtype=np.uint64)


def _neg_where(flag: np.ndarray, values: np.ndarray, mask: np.uint64) -> np.ndarray:
    """(-1)^flag * values mod 2^n for a 0/1 uint8 flag array."""
    return np.where(flag.astype(bool), (np.uint64(0) - values) & mask, values)


@dataclass
class FssTape:
    """Dealer randomness disclosed for cut-and-choose auditing."""

    alpha: np.ndarray  # (count,) u64
    s0: np.ndarray     # (count, 16) u8
    s1: np.ndarray     # (count, 16) u8

    def take(self, idx) -> "FssTape":
        return FssTape(self.alpha[idx], self.s0[idx], self.s1[idx])


@dataclass
class EqKeyBatch:
    """One party's batch of equality keys (struct-of-arrays layout)."""

    party: int
    n_bits: int
    alpha_share: np.ndarray   # (count,) u64
    seed0: np.ndarray         # (count, 16) u8
    scw: np.ndarray           # (n, count, 16) u8 seed corrections
    tcw: np.ndarray           # (n, count) u8: bit0 = left t, bit1 = right t
    cw_final: np.ndarray      # (count,) u64
    consumed: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.consumed is None:
            self.consumed = np.zeros(self.count, dtype=bool)

    @property
    def count(self) -> int:
        return self.alpha_share.shape[0]

    def validate(self):
        n, count = self.n_bits, self.count
        if self.scw.shape != (n, count, 16) or self.tcw.shape != (n, count):
            raise KeyFormatError("correction word arrays do not match n_bits/count")
        if self.seed0.shape != (count, 16) or self.cw_final.shape != (count,):
            raise KeyFormatError("seed/final arrays do not match count")

    def take(self, idx) -> "EqKeyBatch":
        return EqKeyBatch(self.party, self.n_bits, self.alpha_share[idx],
                          self.seed0[idx], self.scw[:, idx], self.tcw[:, idx],
                          self.cw_final[idx], self.consumed[idx].copy())

    def take_unused(self, m: int) -> "EqKeyBatch":
        return _take_unused(self, m)


@dataclass
class CmpKeyBatch:
    """One party's batch of comparison keys.

    n_bits is the mask/tree domain width; out_bits the ring the output
    shares live in (defaults to n_bits, may be wider for degraded-encoding
    studies where only the comparison domain shrinks).
    """

    party: int
    n_bits: int
    alpha_share: np.ndarray   # (count,) u64
    seed0: np.ndarray         # (count, 16) u8
    scw: np.ndarray           # (n, count, 16) u8
    tcw: np.ndarray           # (n, count) u8: bits 0..3 = tL, tR, tauL, tauR
    sigma_cw: np.ndarray      # (n, count) u64
    leaf_cw: np.ndarray       # (n+1, count) u64
    consumed: np.ndarray = field(default=None)
    out_bits: int = None

    def __post_init__(self):
        if self.consumed is None:
            self.consumed = np.zeros(self.count, dtype=bool)
        if self.out_bits is None:
            self.out_bits = self.n_bits

    @property
    def count(self) -> int:
        return self.alpha_share.shape[0]

    def validate(self):
        n, count = self.n_bits, self.count
        if self.scw.shape != (n, count, 16) or self.tcw.shape != (n, count):
            raise KeyFormatError("correction word arrays do not match n_bits/count")
        if self.sigma_cw.shape != (n, count) or self.leaf_cw.shape != (n + 1, count):
            raise KeyFormatError("sigma/leaf arrays do not match n_bits/count")
        if self.seed0.shape != (count, 16):
            raise KeyFormatError("seed array does not match count")

    def take(self, idx) -> "CmpKeyBatch":
        return CmpKeyBatch(self.party, self.n_bits, self.alpha_share[idx],
                           self.seed0[idx], self.scw[:, idx], self.tcw[:, idx],
                           self.sigma_cw[:, idx], self.leaf_cw[:, idx],
                           self.consumed[idx].copy(), self.out_bits)

    def take_unused(self, m: int) -> "CmpKeyBatch":
        return _take_unused(self, m)


def _take_unused(batch, m: int):
    free = np.flatnonzero(~batch.consumed)
    if free.size < m:
        raise KeyExhaustedError(
            f"requested {m} keys but only {free.size} unconsumed remain (single-use)")
    idx = free[:m]
    out = batch.take(idx)
    batch.consumed[idx] = True
    out.consumed[:] = True  # the view itself is spent once handed out
    return out


# ---------------------------------------------------------------------------
# Key generation
# ---------------------------------------------------------------------------

def _keygen_eq_core(n: int, alpha: np.ndarray, alpha0: np.ndarray,
                    s0_init: np.ndarray, s1_init: np.ndarray):
    mask = ring_mask(n)
    count = alpha.shape[0]
    s0, s1 = s0_init.copy(), s1_init.copy()
    t0 = np.zeros(count, dtype=np.uint8)
    t1 = np.ones(count, dtype=np.uint8)
    scw = np.empty((n, count, 16), dtype=np.uint8)
    tcw = np.empty((n, count), dtype=np.uint8)

    for i in range(n):
        a = ((alpha >> np.uint64(n - 1 - i)) & np.uint64(1)).astype(np.uint8)
        keep_r = a.astype(bool)[:, None]
        s0l, t0l, s0r, t0r = prg.slice_eq(prg.expand(s0, 2))
        s1l, t1l, s1r, t1r = prg.slice_eq(prg.expand(s1, 2))

        # Seed correction reuses the collapsing (off-path) child's string.
        cw_seed = np.where(keep_r, s0l ^ s1l, s0r ^ s1r)
        cw_tl = t0l ^ t1l ^ np.uint8(1) ^ a
        cw_tr = t0r ^ t1r ^ a
        scw[i] = cw_seed
        tcw[i] = cw_tl | (cw_tr << np.uint8(1))

        # Advance each party's state exactly as its evaluator would.
        for (sj_l, sj_r, tj_l, tj_r, tj) in ((s0l, s0r, t0l, t0r, t0),
                                             (s1l, s1r, t1l, t1r, t1)):
            fj = tj.astype(bool)
            sj_l[fj] ^= cw_seed[fj]
            sj_r[fj] ^= cw_seed[fj]
            tj_l ^= tj & cw_tl
            tj_r ^= tj & cw_tr
        s0 = np.where(keep_r, s0r, s0l)
        s1 = np.where(keep_r, s1r, s1l)
        t0 = np.where(keep_r[:, 0], t0r, t0l)
        t1 = np.where(keep_r[:, 0], t1r, t1l)

    s0v = prg.seed_to_ring(s0, n)
    s1v = prg.seed_to_ring(s1, n)
    cw_final = _neg_where(t1, (np.uint64(1) - s0v + s1v) & mask, mask)

    alpha1 = (alpha - alpha0) & mask
    k0 = EqKeyBatch(0, n, alpha0, s0_init, scw, tcw, cw_final)
    k1 = EqKeyBatch(1, n, alpha1, s1_init, scw, tcw, cw_final)
    return k0, k1


def _keygen_cmp_core(n: int, alpha: np.ndarray, alpha0: np.ndarray,
                     s0_init: np.ndarray, s1_init: np.ndarray,
                     out_bits: int = None):
    out_bits = n if out_bits is None else out_bits
    mask = ring_mask(out_bits)
    count = alpha.shape[0]
    s0, s1 = s0_init.copy(), s1_init.copy()
    t0 = np.zeros(count, dtype=np.uint8)
    t1 = np.ones(count, dtype=np.uint8)
    scw = np.empty((n, count, 16), dtype=np.uint8)
    tcw = np.empty((n, count), dtype=np.uint8)
    sigma_cw = np.empty((n, count), dtype=np.uint64)
    leaf_cw = np.empty((n + 1, count), dtype=np.uint64)

    for i in range(n):
        a = ((alpha >> np.uint64(n - 1 - i)) & np.uint64(1)).astype(np.uint8)
        keep_r = a.astype(bool)[:, None]
        keep_r1 = keep_r[:, 0]
        s0l, t0l, s0r, t0r, g0l, u0l, g0r, u0r = prg.slice_cmp(
            prg.expand(s0, 3), out_bits)
        s1l, t1l, s1r, t1r, g1l, u1l, g1r, u1r = prg.slice_cmp(
            prg.expand(s1, 3), out_bits)

        cw_seed = np.where(keep_r, s0l ^ s1l, s0r ^ s1r)
        cw_tl = t0l ^ t1l ^ np.uint8(1) ^ a
        cw_tr = t0r ^ t1r ^ a
        # sigma collapses on the stay side (the alpha[i] child); the exit side
        # keeps a pseudorandom difference that the leaf word absorbs.
        cw_sig = np.where(keep_r1, g0r ^ g1r, g0l ^ g1l)
        cw_ul = u0l ^ u1l ^ a
        cw_ur = u0r ^ u1r ^ np.uint8(1) ^ a
        scw[i] = cw_seed
        tcw[i] = (cw_tl | (cw_tr << np.uint8(1)) | (cw_ul << np.uint8(2))
                  | (cw_ur << np.uint8(3)))
        sigma_cw[i] = cw_sig

        for (sj_l, sj_r, tj_l, tj_r, gj_l, gj_r, uj_l, uj_r, tj) in (
                (s0l, s0r, t0l, t0r, g0l, g0r, u0l, u0r, t0),
                (s1l, s1r, t1l, t1r, g1l, g1r, u1l, u1r, t1)):
            fj = tj.astype(bool)
            sj_l[fj] ^= cw_seed[fj]
            sj_r[fj] ^= cw_seed[fj]
            tj_l ^= tj & cw_tl
            tj_r ^= tj & cw_tr
            gj_l[fj] ^= cw_sig[fj]
            gj_r[fj] ^= cw_sig[fj]
            uj_l ^= tj & cw_ul
            uj_r ^= tj & cw_ur

        # Leaf word built from the exit-side sigma/tau as the evaluators see them.
        g0x = np.where(keep_r1, g0l, g0r)
        g1x = np.where(keep_r1, g1l, g1r)
        u1x = np.where(keep_r1, u1l, u1r)
        leaf = (a.astype(np.uint64) - g0x + g1x) & mask
        leaf_cw[i] = _neg_where(u1x, leaf, mask)

        s0 = np.where(keep_r, s0r, s0l)
        s1 = np.where(keep_r, s1r, s1l)
        t0 = np.where(keep_r1, t0r, t0l)
        t1 = np.where(keep_r1, t1r, t1l)

    s0v = prg.seed_to_ring(s0, out_bits)
    s1v = prg.seed_to_ring(s1, out_bits)
    leaf_cw[n] = _neg_where(t1, (np.uint64(1) - s0v + s1v) & mask, mask)

    alpha1 = (alpha - alpha0) & ring_mask(n)
    k0 = CmpKeyBatch(0, n, alpha0, s0_init, scw, tcw, sigma_cw, leaf_cw,
                     out_bits=out_bits)
    k1 = CmpKeyBatch(1, n, alpha1, s1_init, scw, tcw, sigma_cw, leaf_cw,
                     out_bits=out_bits)
    return k0, k1


def _sample_tape(n: int, rng: np.random.Generator, count: int,
                 alpha: Optional[np.ndarray]):
    if alpha is None:
        alpha = _uniform_ring(rng, count, n)
    else:
        alpha = np.asarray(alpha, dtype=np.uint64) & ring_mask(n)
        if alpha.shape != (count,):
            raise ValueError("alpha must have shape (count,)")
    alpha0 = _uniform_ring(rng, count, n)
    s0 = prg.random_seeds(rng, count)
    s1 = prg.random_seeds(rng, count)
    return alpha, alpha0, s0, s1


def keygen_eq(n: int, rng: np.random.Generator, count: int = 1,
              alpha: Optional[np.ndarray] = None):
    """Generate ``count`` equality key pairs; returns (alpha, k0, k1)."""
    if not 4 <= n <= 64:
        raise ValueError("equality keys support 4 <= n <= 64")
    alpha, alpha0, s0, s1 = _sample_tape(n, rng, count, alpha)
    k0, k1 = _keygen_eq_core(n, alpha, alpha0, s0, s1)
    return alpha, k0, k1


def keygen_eq_with_tape(n: int, rng: np.random.Generator, count: int = 1):
    alpha, k0, k1 = keygen_eq(n, rng, count)
    return alpha, k0, k1, FssTape(alpha, k0.seed0.copy(), k1.seed0.copy())


def keygen_cmp(n: int, rng: np.random.Generator, count: int = 1,
               alpha: Optional[np.ndarray] = None, out_bits: int = None):
    """Generate ``count`` comparison key pairs; returns (alpha, k0, k1).

    n (the mask domain) is capped at 63: the three-block PRG expansion
    carries 2(lambda+1) + 2(n+1) bits, which exceeds 384 at n = 64.
    out_bits widens the output ring beyond the domain for encoding studies.
    """
    if not 4 <= n <= 63:
        raise ValueError("comparison keys support 4 <= n <= 63")
    if out_bits is not None and not n <= out_bits <= 63:
        raise ValueError("out_bits must lie in [n, 63]")
    alpha, alpha0, s0, s1 = _sample_tape(n, rng, count, alpha)
    k0, k1 = _keygen_cmp_core(n, alpha, alpha0, s0, s1, out_bits)
    return alpha, k0, k1


def keygen_cmp_with_tape(n: int, rng: np.random.Generator, count: int = 1):
    alpha, k0, k1 = keygen_cmp(n, rng, count)
    return alpha, k0, k1, FssTape(alpha, k0.seed0.copy(), k1.seed0.copy())


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _broadcast_x(x, count: int, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64) & ring_mask(n)
    if x.ndim == 0:
        x = np.full(count, x, dtype=np.uint64)
    x = x.reshape(-1)
    if x.shape[0] != count:
        raise ValueError(f"need one public input per key: {x.shape[0]} != {count}")
    return x


def eval_eq(party: int, k: EqKeyBatch, x) -> np.ndarray:
    """Per-party share of 1[x == alpha]; shares sum to the predicate mod 2^n."""
    k.validate()
    n, count, mask = k.n_bits, k.count, ring_mask(k.n_bits)
    x = _broadcast_x(x, count, n)
    s = k.seed0.copy()
    t = np.full(count, party, dtype=np.uint8)
    for i in range(n):
        sl, tl, sr, tr = prg.slice_eq(prg.expand(s, 2))
        f = t.astype(bool)
        sl[f] ^= k.scw[i][f]
        sr[f] ^= k.scw[i][f]
        tl ^= t & (k.tcw[i] & np.uint8(1))
        tr ^= t & ((k.tcw[i] >> np.uint8(1)) & np.uint8(1))
        xb = ((x >> np.uint64(n - 1 - i)) & np.uint64(1)).astype(bool)
        s = np.where(xb[:, None], sr, sl)
        t = np.where(xb, tr, tl)
    out = (t.astype(np.uint64) * k.cw_final + prg.seed_to_ring(s, n)) & mask
    if party == 1:
        out = (np.uint64(0) - out) & mask
    return out


def eval_cmp(party: int, k: CmpKeyBatch, x, return_levels: bool = False):
    """Per-party share of 1[x <= alpha]; shares sum to the predicate mod 2^n.

    With return_levels the per-level output terms are also returned,
    shape (n+1, count); at most one level reconstructs to 1.
    """
    k.validate()
    n, count, mask = k.n_bits, k.count, ring_mask(k.out_bits)
    x = _broadcast_x(x, count, n)
    s = k.seed0.copy()
    t = np.full(count, party, dtype=np.uint8)
    acc = np.zeros(count, dtype=np.uint64)
    levels = np.empty((n + 1, count), dtype=np.uint64) if return_levels else None
    zero = np.uint64(0)
    for i in range(n):
        sl, tl, sr, tr, gl, ul, gr, ur = prg.slice_cmp(prg.expand(s, 3), k.out_bits)
        f = t.astype(bool)
        sl[f] ^= k.scw[i][f]
        sr[f] ^= k.scw[i][f]
        flags = k.tcw[i]
        tl ^= t & (flags & np.uint8(1))
        tr ^= t & ((flags >> np.uint8(1)) & np.uint8(1))
        sig_sel = np.where(f, k.sigma_cw[i], zero)
        gl ^= sig_sel
        gr ^= sig_sel
        ul ^= t & ((flags >> np.uint8(2)) & np.uint8(1))
        ur ^= t & ((flags >> np.uint8(3)) & np.uint8(1))

        xb = ((x >> np.uint64(n - 1 - i)) & np.uint64(1)).astype(bool)
        g = np.where(xb, gr, gl)
        u = np.where(xb, ur, ul)
        out_i = (u.astype(np.uint64) * k.leaf_cw[i] + g) & mask
        acc = (acc + out_i) & mask
        if return_levels:
            levels[i] = out_i
        s = np.where(xb[:, None], sr, sl)
        t = np.where(xb, tr, tl)
    out_last = (t.astype(np.uint64) * k.leaf_cw[n]
                + prg.seed_to_ring(s, k.out_bits)) & mask
    acc = (acc + out_last) & mask
    if return_levels:
        levels[n] = out_last
    if party == 1:
        acc = (zero - acc) & mask
        if return_levels:
            levels = (zero - levels) & mask
    return (acc, levels) if return_levels else acc


# ---------------------------------------------------------------------------
# Masked-input protocols
# ---------------------------------------------------------------------------

_sign_probe = None


def set_sign_probe(probe):
    """Install a harness callback probe(party, y_ring, out_ring) fired on every
    sign invocation; lets an all-in-one runner count actual masking failures.
    Pass None to uninstall."""
    global _sign_probe
    _sign_probe = probe


def sign_protocol(session, y, keys: CmpKeyBatch):
    """Shares of 1[y <= 0] for an additively shared y. One online round.

    Consumes one fresh comparison key per tensor element: the key's alpha
    masks y, the masked value is revealed, and the comparison tree is
    evaluated on it. Fails per element with probability |y| / 2^n (mask
    wraparound); the public-input evaluation itself is exact.
    """
    from .sharing import AdditiveShare, mask_and_reveal
    from .ring import RingTensor

    m = y.values.size
    if keys.out_bits != y.values.n_bits:
        raise ValueError("key output ring does not match the shared input")
    if keys.party != y.party:
        raise ValueError("key batch belongs to the other party")
    ks = keys.take_unused(m)
    if keys.n_bits != y.values.n_bits:
        # Narrow-domain keys: mask and reveal only the low domain bits.
        y = AdditiveShare(y.party,
                          RingTensor(y.values.data & ring_mask(keys.n_bits),
                                     keys.n_bits, _trusted=True), 0)
    x = mask_and_reveal(session, y, ks.alpha_share.reshape(y.values.shape),
                        op="comparison")
    out = eval_cmp(y.party, ks, x.data.reshape(-1))
    if _sign_probe is not None:
        _sign_probe(y.party, y.values.data.reshape(-1), out, ks.n_bits,
                    ks.out_bits)
    values = RingTensor(out.reshape(y.values.shape), ks.out_bits, _trusted=True)
    return AdditiveShare(y.party, values, precision=0)


def eq_protocol(session, y, keys: EqKeyBatch):
    """Shares of 1[y == 0] for an additively shared y. One online round, exact."""
    from .sharing import AdditiveShare, mask_and_reveal
    from .ring import RingTensor

    m = y.values.size
    if keys.n_bits != y.values.n_bits:
        raise ValueError("key ring width does not match the shared input")
    if keys.party != y.party:
        raise ValueError("key batch belongs to the other party")
    ks = keys.take_unused(m)
    x = mask_and_reveal(session, y, ks.alpha_share.reshape(y.values.shape),
                        op="equality")
    out = eval_eq(y.party, ks, x.data.reshape(-1))
    values = RingTensor(out.reshape(y.values.shape), y.values.n_bits, _trusted=True)
    return AdditiveShare(y.party, values, precision=0)


# ---------------------------------------------------------------------------
# Serialization (container format in LAYOUT.md)
# ---------------------------------------------------------------------------

@dataclass
class KeyBatch:
    """Dealer-side transport container holding both parties' payloads."""

    kind: int
    n_bits: int
    count: int
    payload0: bytes
    payload1: bytes


def _ring_width_bytes(n: int) -> int:
    return (n + 7) // 8


def eq_elem_bytes(n: int) -> int:
    """Serialized bytes per equality key element (one party)."""
    w = _ring_width_bytes(n)
    return w + 16 + n * 17 + w


def cmp_elem_bytes(n: int) -> int:
    """Serialized bytes per comparison key element (one party)."""
    w = _ring_width_bytes(n)
    return w + 16 + n * (17 + w) + (n + 1) * w


def cmp_key_bits(n: int, lam: int = LAMBDA) -> int:
    """Theoretical compressed comparison key size in bits."""
    return n * (lam + 2 * n + 4) + lam + 2 * n


def _u64_to_le(vals: np.ndarray, w: int) -> np.ndarray:
    return vals.astype("<u8").view(np.uint8).reshape(-1, 8)[:, :w]


def _le_to_u64(b: np.ndarray) -> np.ndarray:
    out = np.zeros((b.shape[0], 8), dtype=np.uint8)
    out[:, :b.shape[1]] = b
    return out.view("<u8").reshape(-1)


def _pack_eq(k: EqKeyBatch) -> bytes:
    n, count, w = k.n_bits, k.count, _ring_width_bytes(k.n_bits)
    buf = np.zeros((count, eq_elem_bytes(n)), dtype=np.uint8)
    off = 0
    buf[:, off:off + w] = _u64_to_le(k.alpha_share, w); off += w
    buf[:, off:off + 16] = k.seed0; off += 16
    for i in range(n):
        buf[:, off:off + 16] = k.scw[i]; off += 16
        buf[:, off] = k.tcw[i]; off += 1
    buf[:, off:off + w] = _u64_to_le(k.cw_final, w)
    return buf.tobytes()


def _unpack_eq(party: int, n: int, count: int, payload: bytes) -> EqKeyBatch:
    w = _ring_width_bytes(n)
    buf = np.frombuffer(payload, dtype=np.uint8).reshape(count, eq_elem_bytes(n))
    off = 0
    alpha = _le_to_u64(buf[:, off:off + w]); off += w
    seed0 = buf[:, off:off + 16].copy(); off += 16
    scw = np.empty((n, count, 16), dtype=np.uint8)
    tcw = np.empty((n, count), dtype=np.uint8)
    for i in range(n):
        scw[i] = buf[:, off:off + 16]; off += 16
        tcw[i] = buf[:, off]; off += 1
    cw_final = _le_to_u64(buf[:, off:off + w])
    return EqKeyBatch(party, n, alpha, seed0, scw, tcw, cw_final)


def _pack_cmp(k: CmpKeyBatch) -> bytes:
    if k.out_bits != k.n_bits:
        raise KeyFormatError(
            "widened-output comparison keys are in-memory only")
    n, count, w = k.n_bits, k.count, _ring_width_bytes(k.n_bits)
    buf = np.zeros((count, cmp_elem_bytes(n)), dtype=np.uint8)
    off = 0
    buf[:, off:off + w] = _u64_to_le(k.alpha_share, w); off += w
    buf[:, off:off + 16] = k.seed0; off += 16
    for i in range(n):
        buf[:, off:off + 16] = k.scw[i]; off += 16
        buf[:, off] = k.tcw[i]; off += 1
        buf[:, off:off + w] = _u64_to_le(k.sigma_cw[i], w); off += w
    for i in range(n + 1):
        buf[:, off:off + w] = _u64_to_le(k.leaf_cw[i], w); off += w
    return buf.tobytes()


def _unpack_cmp(party: int, n: int, count: int, payload: bytes) -> CmpKeyBatch:
    w = _ring_width_bytes(n)
    buf = np.frombuffer(payload, dtype=np.uint8).reshape(count, cmp_elem_bytes(n))
    off = 0
    alpha = _le_to_u64(buf[:, off:off + w]); off += w
    seed0 = buf[:, off:off + 16].copy(); off += 16
    scw = np.empty((n, count, 16), dtype=np.uint8)
    tcw = np.empty((n, count), dtype=np.uint8)
    sigma_cw = np.empty((n, count), dtype=np.uint64)
    leaf_cw = np.empty((n + 1, count), dtype=np.uint64)
    for i in range(n):
        scw[i] = buf[:, off:off + 16]; off += 16
        tcw[i] = buf[:, off]; off += 1
        sigma_cw[i] = _le_to_u64(buf[:, off:off + w]); off += w
    for i in range(n + 1):
        leaf_cw[i] = _le_to_u64(buf[:, off:off + w]); off += w
    return CmpKeyBatch(party, n, alpha, seed0, scw, tcw, sigma_cw, leaf_cw)


def pack_keys(k0, k1) -> KeyBatch:
    """Bundle a key pair into the transport container."""
    if type(k0) is not type(k1) or k0.n_bits != k1.n_bits or k0.count != k1.count:
        raise ValueError("key batches do not form a pair")
    if isinstance(k0, EqKeyBatch):
        return KeyBatch(KIND_EQ, k0.n_bits, k0.count, _pack_eq(k0), _pack_eq(k1))
    if isinstance(k0, CmpKeyBatch):
        return KeyBatch(KIND_CMP, k0.n_bits, k0.count, _pack_cmp(k0), _pack_cmp(k1))
    raise TypeError(f"cannot pack {type(k0)!r}")


def unpack_keys(batch: KeyBatch):
    """Rebuild the typed key pair from a container."""
    if batch.kind == KIND_EQ:
        return (_unpack_eq(0, batch.n_bits, batch.count, batch.payload0),
                _unpack_eq(1, batch.n_bits, batch.count, batch.payload1))
    if batch.kind == KIND_CMP:
        return (_unpack_cmp(0, batch.n_bits, batch.count, batch.payload0),
                _unpack_cmp(1, batch.n_bits, batch.count, batch.payload1))
    raise KeyFormatError(f"cannot unpack kind {batch.kind}")


def serialize_keys(batch: KeyBatch) -> bytes:
    header = (MAGIC + bytes([VERSION, batch.kind, batch.n_bits])
              + LAMBDA.to_bytes(2, "little") + batch.count.to_bytes(4, "little"))
    return header + batch.payload0 + batch.payload1


def deserialize_keys(data: bytes) -> KeyBatch:
    if len(data) < _HEADER_BYTES:
        raise KeyFormatError("truncated header")
    if data[:4] != MAGIC:
        raise KeyFormatError("bad magic")
    version, kind, n = data[4], data[5], data[6]
    if version != VERSION:
        raise KeyFormatError(f"unsupported version {version}")
    lam = int.from_bytes(data[7:9], "little")
    if lam != LAMBDA:
        raise KeyFormatError(f"unsupported lambda {lam}")
    count = int.from_bytes(data[9:13], "little")
    body = data[_HEADER_BYTES:]
    if kind == KIND_EQ:
        per = eq_elem_bytes(n) * count
    elif kind == KIND_CMP:
        per = cmp_elem_bytes(n) * count
    elif kind == KIND_TRIPLE:
        if len(body) < 4:
            raise KeyFormatError("truncated triple payload")
        per = int.from_bytes(body[:4], "little") + 4
    else:
        raise KeyFormatError(f"unknown kind {kind}")
    if len(body) != 2 * per:
        raise KeyFormatError(f"payload size mismatch: {len(body)} != {2 * per}")
    return KeyBatch(kind, n, count, body[:per], body[per:])


# ---------------------------------------------------------------------------
# Cut-and-choose audit
# ---------------------------------------------------------------------------

def audit_keys(k0, k1, tape: FssTape, indices) -> list:
    """Replay keygen from the disclosed tape and byte-compare with issued keys.

    Returns the list of indices whose key material does not match (empty =
    audit passed). Sampled keys are destroyed: they are marked consumed in
    both batches and must never be used online.
    """
    indices = np.asarray(indices, dtype=np.int64)
    sub0, sub1 = k0.take(indices), k1.take(indices)
    k0.consumed[indices] = True
    k1.consumed[indices] = True
    t = tape.take(indices)
    mask = ring_mask(k0.n_bits)

    if isinstance(k0, EqKeyBatch):
        r0, r1 = _keygen_eq_core(k0.n_bits, t.alpha, sub0.alpha_share, t.s0, t.s1)
        pack = _pack_eq
        elem = eq_elem_bytes(k0.n_bits)
    elif isinstance(k0, CmpKeyBatch):
        if k0.out_bits != k0.n_bits:
            raise KeyFormatError(
                "widened-output comparison keys cannot be audited byte-wise")
        r0, r1 = _keygen_cmp_core(k0.n_bits, t.alpha, sub0.alpha_share, t.s0, t.s1)
        pack = _pack_cmp
        elem = cmp_elem_bytes(k0.n_bits)
    else:
        raise TypeError(f"cannot audit {type(k0)!r}")

    got0 = np.frombuffer(pack(sub0), dtype=np.uint8).reshape(-1, elem)
    got1 = np.frombuffer(pack(sub1), dtype=np.uint8).reshape(-1, elem)
    want0 = np.frombuffer(pack(r0), dtype=np.uint8).reshape(-1, elem)
    want1 = np.frombuffer(pack(r1), dtype=np.uint8).reshape(-1, elem)
    ok = np.all(got0 == want0, axis=1) & np.all(got1 == want1, axis=1)
    ok &= ((sub0.alpha_share + sub1.alpha_share) & mask) == t.alpha
    return [int(i) for i, good in zip(indices, ok) if not good]
